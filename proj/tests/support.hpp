#pragma once

// Shared fixtures and independent reference implementations for the tests
// and the acceptance binary. Nothing here calls into the code under test
// except for constructing inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "selcal/metrics.hpp"
#include "selcal/records.hpp"

namespace selcal::testing {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("selcal_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline double naive_log_partition(const std::vector<double>& logits, double tail_lse) {
  double m = tail_lse;
  for (double x : logits) m = std::max(m, x);
  double s = std::exp(tail_lse - m);
  for (double x : logits) s += std::exp(x - m);
  return m + std::log(s);
}

// A record over exactly the given logits (descending) with a negligible tail.
inline TokenRecord record_from_logits(const std::vector<double>& logits, int token_id = 0) {
  TokenRecord r;
  r.utt_id = "u";
  r.token_id = token_id;
  r.topk_logits = logits;
  for (std::size_t i = 0; i < logits.size(); ++i) r.topk_ids.push_back(token_id + static_cast<int>(i));
  r.tail_lse = -1e9;
  r.tail_count = 1;
  r.confidence = std::exp(logits[0] - naive_log_partition(logits, r.tail_lse));
  return r;
}

// A valid record with K descending logits and a tail of vocab - K entries.
inline TokenRecord random_record(std::mt19937_64& rng, int k = 32, std::int64_t vocab = 51865) {
  std::normal_distribution<double> n(0.0, 2.0);
  std::uniform_real_distribution<double> gap(0.0, 8.0);
  std::vector<double> x(static_cast<std::size_t>(k));
  for (double& v : x) v = n(rng);
  std::sort(x.begin(), x.end(), std::greater<>());
  x[0] += gap(rng);
  TokenRecord r;
  r.utt_id = "utt";
  r.token_id = static_cast<int>(rng() % 50000);
  r.topk_logits = x;
  r.topk_ids.push_back(r.token_id);
  for (int i = 1; i < k; ++i) r.topk_ids.push_back(r.token_id + 1 + i);
  r.tail_count = vocab - k;
  // tail entries sit below the last stored logit
  r.tail_lse = x.back() - 1.0 - gap(rng) + std::log(static_cast<double>(r.tail_count));
  r.confidence = std::exp(x[0] - naive_log_partition(x, r.tail_lse));
  return r;
}

// ---- metric oracles: direct double loops, no shared helpers ----

inline double oracle_ece(const std::vector<ScoredToken>& t, int m = 10) {
  double total = 0.0;
  for (int b = 0; b < m; ++b) {
    const double lo = static_cast<double>(b) / m;
    const double hi = static_cast<double>(b + 1) / m;
    double conf = 0.0, acc = 0.0;
    int n = 0;
    for (const auto& s : t) {
      const bool in = b == m - 1 ? (s.confidence >= lo && s.confidence <= hi) : (s.confidence >= lo && s.confidence < hi);
      if (!in) continue;
      conf += s.confidence;
      acc += s.y;
      ++n;
    }
    if (n > 0) total += std::abs(acc - conf) / static_cast<double>(t.size());
  }
  return total;
}

inline double oracle_nce(const std::vector<ScoredToken>& t) {
  const double eps = 1e-7;
  double correct = 0.0;
  for (const auto& s : t) correct += s.y;
  const double n = static_cast<double>(t.size());
  const double p = correct / n;
  const double h_base = -(correct * std::log(p) + (n - correct) * std::log(1.0 - p));
  double h = 0.0;
  for (const auto& s : t) {
    const double c = std::min(1.0 - eps, std::max(eps, s.confidence));
    h -= s.y ? std::log(c) : std::log(1.0 - c);
  }
  return (h_base - h) / h_base;
}

inline double oracle_overconfidence_mass(const std::vector<ScoredToken>& t, double threshold = 0.7) {
  int n = 0;
  for (const auto& s : t) n += (s.y == 0 && s.confidence >= threshold) ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(t.size());
}

// Accept when confidence >= threshold; false accept = accepted incorrect
// token, false reject = rejected correct token. Thresholds {0, 1} plus the
// midpoints of consecutive distinct confidences; returns (FAR + FRR) / 2 at
// the threshold minimizing |FAR - FRR|, ties to the smaller average.
inline double oracle_eer(const std::vector<ScoredToken>& t) {
  std::vector<double> c;
  for (const auto& s : t) c.push_back(s.confidence);
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  std::vector<double> th = {0.0, 1.0};
  for (std::size_t i = 0; i + 1 < c.size(); ++i) th.push_back(0.5 * (c[i] + c[i + 1]));
  long long pos = 0, neg = 0;
  for (const auto& s : t) (s.y ? pos : neg) += 1;
  // rates compared exactly as fa/neg vs fr/pos via cross-multiplication
  long long best_gap = -1, best_sum = 0;
  double best = 0.0;
  for (double h : th) {
    long long fa = 0, fr = 0;
    for (const auto& s : t) {
      const bool accept = s.confidence >= h;
      if (accept && !s.y) fa += 1;
      if (!accept && s.y) fr += 1;
    }
    const long long gap = std::llabs(fa * pos - fr * neg), sum = fa * pos + fr * neg;
    if (best_gap < 0 || gap < best_gap || (gap == best_gap && sum < best_sum)) {
      best_gap = gap;
      best_sum = sum;
      best = 0.5 * (static_cast<double>(fa) / neg + static_cast<double>(fr) / pos);
    }
  }
  return best;
}

// ---- alignment oracle: exhaustive search over edit scripts ----

// Edit scripts are enumerated from the end of both sequences. The first pass
// finds the minimum cost; the second walks scripts in preference order
// (match, substitution, insertion, deletion at each step from the end) and
// returns the first one attaining it. Pruning uses only the admissible bound
// |remaining hyp - remaining ref|.
class AlignmentOracle {
 public:
  AlignmentOracle(const std::vector<int>& hyp, const std::vector<int>& ref) : hyp_(hyp), ref_(ref) {
    min_cost_ = std::numeric_limits<int>::max();
    search_min(static_cast<int>(hyp.size()), static_cast<int>(ref.size()), 0);
    std::vector<EditOp> rev;
    found_ = false;
    search_first(static_cast<int>(hyp.size()), static_cast<int>(ref.size()), 0, rev);
  }

  int cost() const { return min_cost_; }
  const std::vector<EditOp>& ops() const { return ops_; }

  std::vector<int> labels() const {
    std::vector<int> y;
    for (EditOp op : ops_) {
      if (op == EditOp::Match) y.push_back(1);
      else if (op != EditOp::Deletion) y.push_back(0);
    }
    return y;
  }

 private:
  static int bound(int i, int j) { return std::abs(i - j); }

  void search_min(int i, int j, int cost) {
    if (cost + bound(i, j) >= min_cost_) return;
    if (i == 0 && j == 0) {
      min_cost_ = cost;
      return;
    }
    if (i > 0 && j > 0) search_min(i - 1, j - 1, cost + (hyp_[i - 1] == ref_[j - 1] ? 0 : 1));
    if (i > 0) search_min(i - 1, j, cost + 1);
    if (j > 0) search_min(i, j - 1, cost + 1);
  }

  void search_first(int i, int j, int cost, std::vector<EditOp>& rev) {
    if (found_ || cost + bound(i, j) > min_cost_) return;
    if (i == 0 && j == 0) {
      if (cost == min_cost_) {
        found_ = true;
        ops_.assign(rev.rbegin(), rev.rend());
      }
      return;
    }
    auto step = [&](EditOp op, int ni, int nj, int c) {
      rev.push_back(op);
      search_first(ni, nj, cost + c, rev);
      rev.pop_back();
    };
    if (i > 0 && j > 0 && hyp_[i - 1] == ref_[j - 1]) step(EditOp::Match, i - 1, j - 1, 0);
    if (i > 0 && j > 0 && hyp_[i - 1] != ref_[j - 1]) step(EditOp::Substitution, i - 1, j - 1, 1);
    if (i > 0) step(EditOp::Insertion, i - 1, j, 1);
    if (j > 0) step(EditOp::Deletion, i, j - 1, 1);
  }

  const std::vector<int>& hyp_;
  const std::vector<int>& ref_;
  int min_cost_ = 0;
  bool found_ = false;
  std::vector<EditOp> ops_;
};

// Every sequence of length 0..max_len over {0..alphabet-1}.
inline std::vector<std::vector<int>> all_sequences(int max_len, int alphabet) {
  std::vector<std::vector<int>> out = {{}};
  std::vector<std::vector<int>> frontier = {{}};
  for (int len = 1; len <= max_len; ++len) {
    std::vector<std::vector<int>> next;
    for (const auto& s : frontier) {
      for (int a = 0; a < alphabet; ++a) {
        auto t = s;
        t.push_back(a);
        next.push_back(t);
      }
    }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

inline std::vector<ScoredToken> random_tokens(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ScoredToken> t(n);
  for (auto& s : t) {
    s.confidence = u(rng);
    s.y = u(rng) < s.confidence ? 1 : 0;
  }
  // both classes present so NCE and EER are defined
  t[0].y = 1;
  t[1].y = 0;
  return t;
}

}  // namespace selcal::testing
