#include "selcal/records.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "selcal/error.hpp"
#include "selcal/fileio.hpp"

namespace selcal {

namespace fs = std::filesystem;
using nlohmann::json;

double log_partition(const TokenRecord& record) {
  double m = record.tail_lse;
  for (double x : record.topk_logits) m = std::max(m, x);
  double sum = std::exp(record.tail_lse - m);
  for (double x : record.topk_logits) sum += std::exp(x - m);
  return m + std::log(sum);
}

void validate(const TokenRecord& r, std::optional<std::int64_t> vocab_size) {
  const std::size_t k = r.topk_logits.size();
  if (k == 0) throw ValidationError("topk empty");
  if (r.topk_ids.size() != k) throw ValidationError("topk_ids/topk_logits length mismatch");
  if (r.token_index < 0) throw ValidationError("token_index negative");
  if (r.token_id < 0) throw ValidationError("token_id negative");
  for (double x : r.topk_logits) {
    if (!std::isfinite(x)) throw ValidationError("topk_logits not finite");
  }
  if (!std::isfinite(r.tail_lse)) throw ValidationError("tail_lse not finite");
  for (std::size_t i = 1; i < k; ++i) {
    if (r.topk_logits[i] > r.topk_logits[i - 1]) throw ValidationError("topk order");
  }
  if (r.topk_ids[0] != r.token_id) throw ValidationError("topk_ids[0] != token_id");
  if (r.tail_count < 1) throw ValidationError("tail_count must be positive");
  if (vocab_size && r.tail_count != *vocab_size - static_cast<std::int64_t>(k)) {
    throw ValidationError("tail_count != vocab_size - K");
  }
  if (!(r.confidence > 0.0 && r.confidence <= 1.0)) {
    throw ValidationError("confidence out of range");
  }
  const double expected = std::exp(r.topk_logits[0] - log_partition(r));
  if (std::abs(expected - r.confidence) > 1e-5) {
    throw ValidationError("confidence inconsistent with logits");
  }
  if (r.y && *r.y != 0 && *r.y != 1) throw ValidationError("y must be 0 or 1");
  if (r.o) {
    if (*r.o != 0 && *r.o != 1) throw ValidationError("o must be 0 or 1");
    if (!r.y) throw ValidationError("o present without y");
    if (*r.o == 1 && *r.y != 0) throw ValidationError("o == 1 requires y == 0");
  }
}

void validate(const CorpusManifest& m) {
  if (m.k < 1) throw ValidationError("manifest: K must be >= 1");
  if (m.vocab_size <= m.k) throw ValidationError("manifest: vocab_size must exceed K");
}

json to_json(const TokenRecord& r) {
  json j = {{"utt_id", r.utt_id},         {"token_index", r.token_index},
            {"token_id", r.token_id},     {"topk_ids", r.topk_ids},
            {"topk_logits", r.topk_logits}, {"tail_lse", r.tail_lse},
            {"tail_count", r.tail_count}, {"confidence", r.confidence}};
  j["y"] = r.y ? json(*r.y) : json(nullptr);
  j["o"] = r.o ? json(*r.o) : json(nullptr);
  return j;
}

json to_json(const UtteranceRecord& u) {
  json j = {{"utt_id", u.utt_id},
            {"mel_path", u.mel_path},
            {"n_frames", u.n_frames},
            {"n_mel_bins", u.n_mel_bins},
            {"hyp_token_ids", u.hyp_token_ids},
            {"ref_token_ids", u.ref_token_ids}};
  j["snr_db"] = u.snr_db ? json(*u.snr_db) : json(nullptr);
  return j;
}

json to_json(const CorpusManifest& m) {
  return {{"vocab_size", m.vocab_size},
          {"K", m.k},
          {"records_path", m.records_path},
          {"utterances_path", m.utterances_path},
          {"seed", m.seed}};
}

namespace {

std::string where(std::size_t line, const char* field) {
  std::string s = line ? "line " + std::to_string(line) + ": " : std::string();
  return s + "field '" + field + "'";
}

template <typename T>
T field(const json& j, const char* name, std::size_t line) {
  auto it = j.find(name);
  if (it == j.end()) throw ValidationError(where(line, name) + " missing");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ValidationError(where(line, name) + " has wrong type");
  }
}

template <typename T>
std::optional<T> optional_field(const json& j, const char* name, std::size_t line) {
  auto it = j.find(name);
  if (it == j.end() || it->is_null()) return std::nullopt;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ValidationError(where(line, name) + " has wrong type");
  }
}

template <typename F>
void for_each_line(const fs::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ValidationError(path.string() + ": line " + std::to_string(line) + ": malformed (" +
                            e.what() + ")");
    }
    if (!j.is_object()) {
      throw ValidationError(path.string() + ": line " + std::to_string(line) + ": not an object");
    }
    f(j, line);
  }
  if (in.bad()) throw IoError("read failed: " + path.string());
}

}  // namespace

TokenRecord token_record_from_json(const json& j, std::size_t line) {
  TokenRecord r;
  r.utt_id = field<std::string>(j, "utt_id", line);
  r.token_index = field<int>(j, "token_index", line);
  r.token_id = field<int>(j, "token_id", line);
  r.topk_ids = field<std::vector<int>>(j, "topk_ids", line);
  r.topk_logits = field<std::vector<double>>(j, "topk_logits", line);
  r.tail_lse = field<double>(j, "tail_lse", line);
  r.tail_count = field<std::int64_t>(j, "tail_count", line);
  r.confidence = field<double>(j, "confidence", line);
  r.y = optional_field<int>(j, "y", line);
  r.o = optional_field<int>(j, "o", line);
  return r;
}

UtteranceRecord utterance_from_json(const json& j, std::size_t line) {
  UtteranceRecord u;
  u.utt_id = field<std::string>(j, "utt_id", line);
  u.snr_db = optional_field<double>(j, "snr_db", line);
  u.mel_path = field<std::string>(j, "mel_path", line);
  u.n_frames = field<int>(j, "n_frames", line);
  u.n_mel_bins = field<int>(j, "n_mel_bins", line);
  u.hyp_token_ids = field<std::vector<int>>(j, "hyp_token_ids", line);
  u.ref_token_ids = field<std::vector<int>>(j, "ref_token_ids", line);
  if (u.n_frames < 1) throw ValidationError(where(line, "n_frames") + " must be positive");
  if (u.n_mel_bins < 1) throw ValidationError(where(line, "n_mel_bins") + " must be positive");
  return u;
}

CorpusManifest manifest_from_json(const json& j) {
  CorpusManifest m;
  m.vocab_size = field<std::int64_t>(j, "vocab_size", 0);
  m.k = field<int>(j, "K", 0);
  m.records_path = field<std::string>(j, "records_path", 0);
  m.utterances_path = field<std::string>(j, "utterances_path", 0);
  m.seed = field<std::uint64_t>(j, "seed", 0);
  validate(m);
  return m;
}

void save_records(std::span<const TokenRecord> records, const fs::path& path) {
  write_atomically(path, [&](std::ostream& out) {
    for (const auto& r : records) out << to_json(r).dump() << '\n';
  });
}

std::vector<TokenRecord> load_records(const fs::path& path, std::optional<std::int64_t> vocab_size) {
  std::vector<TokenRecord> out;
  for_each_line(path, [&](const json& j, std::size_t line) {
    TokenRecord r = token_record_from_json(j, line);
    try {
      validate(r, vocab_size);
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ": line " + std::to_string(line) + ": " + e.what());
    }
    out.push_back(std::move(r));
  });
  return out;
}

void save_utterances(std::span<const UtteranceRecord> utts, const fs::path& path) {
  write_atomically(path, [&](std::ostream& out) {
    for (const auto& u : utts) out << to_json(u).dump() << '\n';
  });
}

std::vector<UtteranceRecord> load_utterances(const fs::path& path) {
  std::vector<UtteranceRecord> out;
  for_each_line(path, [&](const json& j, std::size_t line) {
    out.push_back(utterance_from_json(j, line));
  });
  return out;
}

void save_manifest(const CorpusManifest& m, const fs::path& path) {
  write_text_atomically(path, to_json(m).dump(2) + "\n");
}

CorpusManifest load_manifest(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": malformed manifest (" + e.what() + ")");
  }
  return manifest_from_json(j);
}

Alignment align(std::span<const int> hyp, std::span<const int> ref) {
  const std::size_t n = hyp.size();
  const std::size_t m = ref.size();
  // cost[i][j]: edit distance between hyp[0..i) and ref[0..j)
  std::vector<int> cost((n + 1) * (m + 1));
  auto at = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };
  for (std::size_t i = 0; i <= n; ++i) cost[at(i, 0)] = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) cost[at(0, j)] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const int diag = cost[at(i - 1, j - 1)] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
      cost[at(i, j)] = std::min({diag, cost[at(i - 1, j)] + 1, cost[at(i, j - 1)] + 1});
    }
  }

  Alignment a;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    const int c = cost[at(i, j)];
    if (i > 0 && j > 0 && hyp[i - 1] == ref[j - 1] && cost[at(i - 1, j - 1)] == c) {
      a.ops.push_back(EditOp::Match);
      ++a.matches;
      --i, --j;
    } else if (i > 0 && j > 0 && hyp[i - 1] != ref[j - 1] && cost[at(i - 1, j - 1)] + 1 == c) {
      a.ops.push_back(EditOp::Substitution);
      ++a.substitutions;
      --i, --j;
    } else if (i > 0 && cost[at(i - 1, j)] + 1 == c) {
      a.ops.push_back(EditOp::Insertion);
      ++a.insertions;
      --i;
    } else {
      a.ops.push_back(EditOp::Deletion);
      ++a.deletions;
      --j;
    }
  }
  std::reverse(a.ops.begin(), a.ops.end());
  return a;
}

std::vector<int> align_and_label(std::span<const int> hyp, std::span<const int> ref) {
  std::vector<int> labels;
  labels.reserve(hyp.size());
  for (EditOp op : align(hyp, ref).ops) {
    if (op == EditOp::Deletion) continue;
    labels.push_back(op == EditOp::Match ? 1 : 0);
  }
  return labels;
}

double compute_wer(std::span<const int> hyp, std::span<const int> ref) {
  if (ref.empty()) throw ValidationError("compute_wer: empty reference");
  return static_cast<double>(align(hyp, ref).errors()) / static_cast<double>(ref.size());
}

int label_overconfident(const TokenRecord& record, double threshold) {
  if (!record.y) throw ValidationError("unlabeled record");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("threshold must be in (0,1)");
  return (*record.y == 0 && record.confidence >= threshold) ? 1 : 0;
}

}  // namespace selcal
