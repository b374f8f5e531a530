#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace selcal {

inline constexpr double kOverconfidenceThreshold = 0.7;

// One decoded token. Only the top-K logits are kept; the remaining
// vocab_size - K logits are summarized by their log-sum-exp.
struct TokenRecord {
  std::string utt_id;
  int token_index = 0;
  int token_id = 0;
  std::vector<int> topk_ids;
  std::vector<double> topk_logits;
  double tail_lse = 0.0;
  std::int64_t tail_count = 1;
  double confidence = 0.0;
  std::optional<int> y;  // 1 if the token is correct
  std::optional<int> o;  // 1 if incorrect with confidence >= threshold

  bool operator==(const TokenRecord&) const = default;
};

struct UtteranceRecord {
  std::string utt_id;
  std::optional<double> snr_db;
  std::string mel_path;
  int n_frames = 0;
  int n_mel_bins = 0;
  std::vector<int> hyp_token_ids;
  std::vector<int> ref_token_ids;

  bool operator==(const UtteranceRecord&) const = default;
};

struct CorpusManifest {
  std::int64_t vocab_size = 51865;
  int k = 32;
  std::string records_path = "records.jsonl";
  std::string utterances_path = "utterances.jsonl";
  std::uint64_t seed = 0;
};

// log of the full-vocabulary partition function recovered from top-K + tail.
double log_partition(const TokenRecord& record);

// Throws ValidationError naming the first violated invariant. vocab_size,
// when known, is checked against tail_count + K.
void validate(const TokenRecord& record, std::optional<std::int64_t> vocab_size = std::nullopt);
void validate(const CorpusManifest& manifest);

nlohmann::json to_json(const TokenRecord& record);
nlohmann::json to_json(const UtteranceRecord& utt);
nlohmann::json to_json(const CorpusManifest& manifest);

// `line` is used only for error messages (1-based, 0 = unknown).
TokenRecord token_record_from_json(const nlohmann::json& j, std::size_t line = 0);
UtteranceRecord utterance_from_json(const nlohmann::json& j, std::size_t line = 0);
CorpusManifest manifest_from_json(const nlohmann::json& j);

// Line-oriented JSON, one record per line. Writes are atomic.
void save_records(std::span<const TokenRecord> records, const std::filesystem::path& path);
std::vector<TokenRecord> load_records(const std::filesystem::path& path,
                                      std::optional<std::int64_t> vocab_size = std::nullopt);

void save_utterances(std::span<const UtteranceRecord> utts, const std::filesystem::path& path);
std::vector<UtteranceRecord> load_utterances(const std::filesystem::path& path);

void save_manifest(const CorpusManifest& manifest, const std::filesystem::path& path);
CorpusManifest load_manifest(const std::filesystem::path& path);

// Edit operation of a minimum-edit alignment, in tie-break preference order.
enum class EditOp { Match, Substitution, Insertion, Deletion };

struct Alignment {
  std::vector<EditOp> ops;  // in hypothesis/reference order
  int substitutions = 0;
  int deletions = 0;
  int insertions = 0;
  int matches = 0;

  int errors() const { return substitutions + deletions + insertions; }
};

// Unit-cost Levenshtein alignment. An insertion is a hypothesis token with no
// reference counterpart. Ties are broken during the backtrace in the order
// match > substitution > insertion > deletion.
Alignment align(std::span<const int> hyp, std::span<const int> ref);

// y_i per hypothesis token: 1 iff aligned to an identical reference token.
std::vector<int> align_and_label(std::span<const int> hyp, std::span<const int> ref);

// (S + D + I) / len(ref). Throws ValidationError on an empty reference.
double compute_wer(std::span<const int> hyp, std::span<const int> ref);

// 1 iff the record is incorrect and its confidence is at least `threshold`.
int label_overconfident(const TokenRecord& record, double threshold = kOverconfidenceThreshold);

}  // namespace selcal
