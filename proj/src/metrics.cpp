#include "selcal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>

#include "selcal/error.hpp"
#include "selcal/fileio.hpp"

namespace selcal {

namespace {

void require_tokens(std::span<const ScoredToken> tokens, const char* what) {
  if (tokens.empty()) throw ValidationError(std::string(what) + ": empty token set");
  for (const auto& t : tokens) {
    if (!(t.confidence >= 0.0 && t.confidence <= 1.0)) {
      throw ValidationError(std::string(what) + ": confidence out of range");
    }
    if (t.y != 0 && t.y != 1) throw ValidationError(std::string(what) + ": label must be 0/1");
  }
}

double clamp_prob(double c) { return std::clamp(c, kProbabilityClamp, 1.0 - kProbabilityClamp); }

}  // namespace

int confidence_bin(double c, int m) {
  int b = static_cast<int>(std::floor(c * m));
  // Correct for rounding in c*m so the edges m/M behave half-open.
  if (b > 0 && c < static_cast<double>(b) / m) --b;
  if (b < m && c >= static_cast<double>(b + 1) / m) ++b;
  return std::clamp(b, 0, m - 1);
}

ReliabilityBins reliability_bins(std::span<const ScoredToken> tokens, int m) {
  if (m < 1) throw ValidationError("reliability_bins: M must be >= 1");
  require_tokens(tokens, "reliability_bins");
  std::vector<double> conf_sum(m, 0.0), correct(m, 0.0);
  ReliabilityBins out;
  out.m = m;
  out.bins.resize(m);
  for (const auto& t : tokens) {
    const int b = confidence_bin(t.confidence, m);
    ++out.bins[b].count;
    conf_sum[b] += t.confidence;
    correct[b] += t.y;
  }
  for (int b = 0; b < m; ++b) {
    auto& bin = out.bins[b];
    bin.lo = static_cast<double>(b) / m;
    bin.hi = static_cast<double>(b + 1) / m;
    if (bin.count > 0) {
      bin.mean_confidence = conf_sum[b] / static_cast<double>(bin.count);
      bin.accuracy = correct[b] / static_cast<double>(bin.count);
    }
  }
  return out;
}

double ece(std::span<const ScoredToken> tokens, int m) {
  const ReliabilityBins rb = reliability_bins(tokens, m);
  const double n = static_cast<double>(tokens.size());
  double total = 0.0;
  for (const auto& bin : rb.bins) {
    if (bin.count == 0) continue;
    total += static_cast<double>(bin.count) / n * std::abs(*bin.accuracy - *bin.mean_confidence);
  }
  return total;
}

namespace {

struct Entropies {
  double cond = 0.0;
  double base = 0.0;
};

Entropies entropies(std::span<const ScoredToken> tokens) {
  Entropies e;
  double n_correct = 0.0;
  for (const auto& t : tokens) {
    const double c = clamp_prob(t.confidence);
    e.cond -= t.y ? std::log(c) : std::log(1.0 - c);
    n_correct += t.y;
  }
  const double n = static_cast<double>(tokens.size());
  const double p = n_correct / n;
  if (n_correct > 0.0) e.base -= n_correct * std::log(p);
  if (n_correct < n) e.base -= (n - n_correct) * std::log(1.0 - p);
  return e;
}

}  // namespace

double nce(std::span<const ScoredToken> tokens) {
  require_tokens(tokens, "nce");
  const Entropies e = entropies(tokens);
  if (!(e.base > 0.0)) throw ValidationError("nce: undefined for single-label token sets");
  return (e.base - e.cond) / e.base;
}

double nll(std::span<const ScoredToken> tokens) {
  require_tokens(tokens, "nll");
  return entropies(tokens).cond / static_cast<double>(tokens.size());
}

double eer(std::span<const ScoredToken> tokens) {
  require_tokens(tokens, "eer");
  std::vector<double> correct, incorrect, distinct;
  for (const auto& t : tokens) {
    (t.y ? correct : incorrect).push_back(t.confidence);
    distinct.push_back(t.confidence);
  }
  if (correct.empty() || incorrect.empty()) {
    throw ValidationError("eer: needs both correct and incorrect tokens");
  }
  std::sort(correct.begin(), correct.end());
  std::sort(incorrect.begin(), incorrect.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

  std::vector<double> thresholds = {0.0, 1.0};
  for (std::size_t i = 1; i < distinct.size(); ++i) {
    thresholds.push_back(0.5 * (distinct[i - 1] + distinct[i]));
  }

  // accepted(t) = #{c >= t}
  auto accepted = [](const std::vector<double>& sorted, double t) {
    return static_cast<std::int64_t>(sorted.end() - std::lower_bound(sorted.begin(), sorted.end(), t));
  };
  // Gaps and averages are compared as exact integers scaled by n_pos * n_neg,
  // so thresholds with equal rates tie exactly and the tie-break is well defined.
  const auto n_neg = static_cast<std::int64_t>(incorrect.size());
  const auto n_pos = static_cast<std::int64_t>(correct.size());
  std::int64_t best_gap = std::numeric_limits<std::int64_t>::max();
  std::int64_t best_sum = std::numeric_limits<std::int64_t>::max();
  double best_avg = 0.0;
  for (double t : thresholds) {
    const std::int64_t fa = accepted(incorrect, t);
    const std::int64_t fr = n_pos - accepted(correct, t);
    const std::int64_t gap = std::abs(fa * n_pos - fr * n_neg);
    const std::int64_t sum = fa * n_pos + fr * n_neg;
    if (gap < best_gap || (gap == best_gap && sum < best_sum)) {
      best_gap = gap;
      best_sum = sum;
      best_avg = 0.5 * (static_cast<double>(fa) / static_cast<double>(n_neg) +
                        static_cast<double>(fr) / static_cast<double>(n_pos));
    }
  }
  return best_avg;
}

double overconfidence_mass(std::span<const ScoredToken> tokens, double threshold) {
  require_tokens(tokens, "overconfidence_mass");
  std::size_t count = 0;
  for (const auto& t : tokens) {
    if (t.y == 0 && t.confidence >= threshold) ++count;
  }
  return static_cast<double>(count) / static_cast<double>(tokens.size());
}

bool SnrBand::contains(double snr) const {
  const bool above = lo_closed ? snr >= lo : snr > lo;
  const bool below = hi_closed ? snr <= hi : snr < hi;
  return above && below;
}

std::string SnrBand::label() const {
  return std::string(lo_closed ? "[" : "(") + format_double(lo) + "," + format_double(hi) +
         (hi_closed ? "]" : ")");
}

SnrBand SnrBand::parse(const std::string& text) {
  SnrBand b;
  if (text.size() < 5) throw ValidationError("bad SNR band: " + text);
  const char open = text.front();
  const char close = text.back();
  if ((open != '[' && open != '(') || (close != ']' && close != ')')) {
    throw ValidationError("bad SNR band: " + text);
  }
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw ValidationError("bad SNR band: " + text);
  try {
    b.lo = std::stod(text.substr(1, comma - 1));
    b.hi = std::stod(text.substr(comma + 1, text.size() - comma - 2));
  } catch (const std::exception&) {
    throw ValidationError("bad SNR band: " + text);
  }
  b.lo_closed = open == '[';
  b.hi_closed = close == ']';
  if (b.lo > b.hi) throw ValidationError("bad SNR band: " + text);
  return b;
}

std::vector<SnrBand> default_snr_bands() {
  return {{5, 10, false, true},    {0, 5, false, true},      {-5, 0, false, true},
          {-10, -5, true, true},   {-15, -10, true, false},  {-18, -15, true, true}};
}

namespace {

std::vector<std::vector<ScoredToken>> split_by_band(std::span<const ScoredToken> tokens,
                                                    std::span<const SnrBand> bands) {
  std::vector<std::vector<ScoredToken>> out(bands.size());
  for (const auto& t : tokens) {
    if (!t.snr_db) throw ValidationError("token without snr_db");
    for (std::size_t b = 0; b < bands.size(); ++b) {
      if (bands[b].contains(*t.snr_db)) out[b].push_back(t);
    }
  }
  return out;
}

}  // namespace

CalibrationReport snr_stratified_report(std::span<const ScoredToken> tokens,
                                        std::span<const SnrBand> bands, int m) {
  CalibrationReport report;
  const auto groups = split_by_band(tokens, bands);
  for (std::size_t b = 0; b < bands.size(); ++b) {
    BandMetrics bm;
    bm.band = bands[b];
    bm.count = groups[b].size();
    bm.low_count = bm.count < kMinBandTokens;
    if (bm.count > 0) {
      bm.ece = ece(groups[b], m);
      bm.overconfidence_mass = overconfidence_mass(groups[b]);
      try {
        bm.nce = nce(groups[b]);
      } catch (const ValidationError&) {
        bm.nce.reset();
      }
    }
    report.bands.push_back(bm);
  }
  return report;
}

Heatmap confidence_accuracy_heatmap(std::span<const ScoredToken> tokens, int m,
                                    std::span<const SnrBand> bands) {
  if (m < 1) throw ValidationError("heatmap: M must be >= 1");
  const auto groups = split_by_band(tokens, bands);
  Heatmap map(bands.size(), std::vector<HeatmapCell>(m));
  for (std::size_t b = 0; b < bands.size(); ++b) {
    std::vector<double> correct(m, 0.0);
    for (const auto& t : groups[b]) {
      const int bin = confidence_bin(t.confidence, m);
      ++map[b][bin].count;
      correct[bin] += t.y;
    }
    for (int k = 0; k < m; ++k) {
      if (map[b][k].count > 0) map[b][k].accuracy = correct[k] / static_cast<double>(map[b][k].count);
    }
  }
  return map;
}

}  // namespace selcal
