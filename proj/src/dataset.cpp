#include "selcal/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "selcal/error.hpp"
#include "selcal/fileio.hpp"
#include "selcal/mel.hpp"

namespace selcal {

namespace fs = std::filesystem;

void Dataset::index() {
  if (mels.size() != utterances.size()) throw ValidationError("dataset: mel count != utterance count");
  std::map<std::string, std::size_t> by_id;
  for (std::size_t u = 0; u < utterances.size(); ++u) {
    if (!by_id.emplace(utterances[u].utt_id, u).second) {
      throw ValidationError("duplicate utt_id '" + utterances[u].utt_id + "'");
    }
    const auto& mel = mels[u];
    if (mel.rows() != utterances[u].n_frames || mel.cols() != utterances[u].n_mel_bins) {
      throw ValidationError("utterance '" + utterances[u].utt_id + "': mel shape does not match n_frames/n_mel_bins");
    }
  }
  tokens_of.assign(utterances.size(), {});
  record_utt_.assign(records.size(), 0);
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto it = by_id.find(records[i].utt_id);
    if (it == by_id.end()) throw ValidationError("record utt_id '" + records[i].utt_id + "' has no utterance");
    tokens_of[it->second].push_back(i);
    record_utt_[i] = it->second;
  }
  for (auto& list : tokens_of) {
    std::stable_sort(list.begin(), list.end(), [&](std::size_t a, std::size_t b) {
      return records[a].token_index < records[b].token_index;
    });
  }
}

Dataset load_dataset(const fs::path& manifest_path) {
  Dataset data;
  data.manifest = load_manifest(manifest_path);
  const fs::path base = manifest_path.parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  data.records = load_records(resolve(data.manifest.records_path), data.manifest.vocab_size);
  data.utterances = load_utterances(resolve(data.manifest.utterances_path));
  for (const auto& r : data.records) {
    if (static_cast<int>(r.topk_logits.size()) != data.manifest.k) {
      throw ValidationError("record in '" + r.utt_id + "' stores " + std::to_string(r.topk_logits.size()) +
                            " logits, manifest K is " + std::to_string(data.manifest.k));
    }
  }
  data.mels.reserve(data.utterances.size());
  for (const auto& u : data.utterances) {
    const fs::path mel_path = resolve(u.mel_path);
    const MelHeader h = read_mel_header(mel_path);
    if (h.n_frames != u.n_frames || h.n_bins != u.n_mel_bins) {
      throw ValidationError(mel_path.string() + ": header " + std::to_string(h.n_frames) + "x" +
                            std::to_string(h.n_bins) + " does not match utterance '" + u.utt_id + "'");
    }
    data.mels.push_back(read_mel(mel_path));
  }
  data.index();
  return data;
}

void save_dataset(const Dataset& data, const fs::path& dir) {
  validate(data.manifest);
  if (data.mels.size() != data.utterances.size()) throw ValidationError("dataset: mel count != utterance count");
  write_directory_atomically(dir, [&](const fs::path& stage) {
    fs::create_directories(stage / "mel");
    Dataset out = data;
    out.manifest.records_path = "records.jsonl";
    out.manifest.utterances_path = "utterances.jsonl";
    for (std::size_t u = 0; u < out.utterances.size(); ++u) {
      out.utterances[u].mel_path = "mel/" + out.utterances[u].utt_id + ".mel";
      write_mel(stage / out.utterances[u].mel_path, out.mels[u]);
    }
    save_records(out.records, stage / "records.jsonl");
    save_utterances(out.utterances, stage / "utterances.jsonl");
    save_manifest(out.manifest, stage / "corpus.json");
  });
}

Dataset subset(const Dataset& data, std::span<const std::size_t> utterance_indices) {
  Dataset out;
  out.manifest = data.manifest;
  for (std::size_t u : utterance_indices) {
    out.utterances.push_back(data.utterances.at(u));
    out.mels.push_back(data.mels.at(u));
    for (std::size_t i : data.tokens_of.at(u)) out.records.push_back(data.records[i]);
  }
  out.index();
  return out;
}

Dataset filter_snr(const Dataset& data, double lo, double hi) {
  std::vector<std::size_t> keep;
  for (std::size_t u = 0; u < data.utterances.size(); ++u) {
    const auto& snr = data.utterances[u].snr_db;
    if (snr && *snr >= lo && *snr <= hi) keep.push_back(u);
  }
  return subset(data, keep);
}

std::pair<Dataset, Dataset> split_validation(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ValidationError("validation fraction must be in [0,1)");
  const std::size_t n = data.utterances.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (fraction > 0.0 && n > 1) n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {subset(data, train), subset(data, val)};
}

std::vector<ScoredToken> scored_tokens(const Dataset& data, std::span<const double> confidences) {
  if (confidences.size() != data.records.size()) throw ValidationError("confidence count != record count");
  std::vector<ScoredToken> out(data.records.size());
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const auto& r = data.records[i];
    if (!r.y) throw ValidationError("record " + r.utt_id + "#" + std::to_string(r.token_index) + " has no y");
    out[i] = {confidences[i], *r.y, data.utterances[data.utterance_of(i)].snr_db};
  }
  return out;
}

std::vector<ScoredToken> scored_tokens(const Dataset& data) {
  std::vector<double> conf(data.records.size());
  for (std::size_t i = 0; i < conf.size(); ++i) conf[i] = data.records[i].confidence;
  return scored_tokens(data, conf);
}

}  // namespace selcal
