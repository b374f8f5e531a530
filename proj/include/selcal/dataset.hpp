#pragma once

#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "selcal/linalg.hpp"
#include "selcal/metrics.hpp"
#include "selcal/records.hpp"

namespace selcal {

// A corpus held in memory: records, utterances and their mel matrices.
struct Dataset {
  CorpusManifest manifest;
  std::vector<UtteranceRecord> utterances;
  std::vector<TokenRecord> records;
  std::vector<Matrix> mels;  // parallel to utterances
  // Record indices per utterance, ordered by token_index.
  std::vector<std::vector<std::size_t>> tokens_of;

  // Rebuilds tokens_of and checks that every record resolves to exactly one
  // utterance and that mel shapes match their utterance records.
  void index();

  std::size_t utterance_of(std::size_t record) const { return record_utt_.at(record); }

 private:
  std::vector<std::size_t> record_utt_;
};

// Reads corpus.json and everything it references. Relative paths resolve
// against the manifest's directory.
Dataset load_dataset(const std::filesystem::path& manifest_path);

// Writes corpus.json, the two record files and mel/<utt_id>.mel into `dir`,
// staged in a sibling temporary directory and renamed into place. mel_path
// fields are rewritten relative to `dir`.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);

// Utterances (with their tokens) in the given order.
Dataset subset(const Dataset& data, std::span<const std::size_t> utterance_indices);

// Utterances whose snr_db lies in [lo, hi]; utterances without SNR are dropped.
Dataset filter_snr(const Dataset& data, double lo, double hi);

// Seeded utterance-level split; the second part holds round(fraction * n)
// utterances (at least one when n > 1).
std::pair<Dataset, Dataset> split_validation(const Dataset& data, double fraction,
                                             std::uint64_t seed);

// Per-record scored tokens with utterance SNR. Requires y on every record.
std::vector<ScoredToken> scored_tokens(const Dataset& data);
std::vector<ScoredToken> scored_tokens(const Dataset& data, std::span<const double> confidences);

}  // namespace selcal
