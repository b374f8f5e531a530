#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "selcal/dataset.hpp"
#include "selcal/features.hpp"
#include "selcal/model.hpp"

namespace selcal {

struct TrainConfig {
  double w_pos = 7.0;
  double lambda_bce = 0.5;
  double lambda_ce = 1.0;
  double lambda_ece = 10.0;
  double selection_threshold = 0.5;
  int soft_bins = 10;
  double soft_bin_tau = 0.01;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_tokens = 1024;
  int epochs = 20;
  std::uint64_t seed = 42;
  double overconf_threshold = kOverconfidenceThreshold;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& cfg);
// Overrides fields of `base` with the keys present in `j`; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

double sigmoid(double z);
// ln(1 + e^z) without overflow for large z or loss of precision for very negative z.
double softplus(double z);

// Overconfidence probability o_hat in (0,1).
double classify(const Vector& f, const ModelParams& params);
double classify(const FeatureVector& f, const ModelParams& params);
// T = 1 + softplus(head(f)).
double predict_temperature(const Vector& f, const ModelParams& params);
double predict_temperature(const FeatureVector& f, const ModelParams& params);

// scaled_confidence capped at the stored confidence, with its T-derivative
// (zero where the cap is active).
ScaledConfidence capped_scaled_confidence(const TokenRecord& record, double temperature);

struct CalibratedToken {
  double confidence = 0.0;
  bool flagged = false;
  double o_hat = 0.0;
  double temperature = 1.0;  // applied temperature; 1 when not flagged
};

// Flags o_hat >= threshold and rescales only flagged tokens. The result
// never exceeds the stored confidence.
CalibratedToken select_and_apply(const TokenRecord& record, const Vector& f, const ModelParams& params,
                                 double threshold = 0.5);
std::vector<CalibratedToken> select_and_apply(std::span<const TokenRecord> records, std::span<const Vector> features,
                                              const ModelParams& params, double threshold = 0.5);

double loss_weighted_bce(std::span<const double> o_hat, std::span<const int> o, double w);
// Mean binary cross entropy of scaled confidences against y over the flagged set; 0 when empty.
double loss_selective_ce(std::span<const double> scaled_confidence, std::span<const int> y);
double loss_soft_ece(std::span<const double> confidence, std::span<const int> y, int bins, double tau);

// Soft-ECE with its derivative with respect to every confidence.
double loss_soft_ece(std::span<const double> confidence, std::span<const int> y, int bins, double tau,
                     std::span<double> d_confidence);

// Per-token inputs with everything that does not depend on learnable parameters precomputed.
struct PreparedToken {
  const TokenRecord* record = nullptr;
  std::size_t utterance = 0;
  int embedding_row = 0;
  SoftmaxStats stats;
  double rel_position = 0.0;
  std::optional<int> y;
  std::optional<int> o;
};

struct PreparedUtterance {
  Matrix frames;  // acoustic_frames() of the utterance
  std::vector<std::size_t> tokens;
};

struct PreparedCorpus {
  const Dataset* data = nullptr;
  FeatureConfig config;
  std::vector<PreparedToken> tokens;  // parallel to data->records
  std::vector<PreparedUtterance> utterances;
  std::vector<double> frozen_o_hat;  // selector output per token, when a selector is attached
};

// Labels: when require_labels, every record needs y; a missing o is derived from
// y and overconf_threshold.
PreparedCorpus prepare_corpus(const Dataset& data, const FeatureConfig& cfg, bool require_labels,
                              double overconf_threshold = kOverconfidenceThreshold);

// Fixes the flags of `corpus` to the outputs of a trained token-level model.
void attach_selector(PreparedCorpus& corpus, const ModelParams& selector);

// Parameter-free feature vector of a token: statistics, position and logits;
// embedding and acoustic slices are zero. Masked groups are zero.
Vector static_features(const PreparedToken& token, const FeatureConfig& cfg);

struct LossOptions {
  TemperatureGranularity granularity = TemperatureGranularity::Token;
  bool use_frozen_selector = false;  // requires attach_selector
};

struct LossBreakdown {
  double total = 0.0;
  double bce = 0.0;
  double ce = 0.0;
  double ece = 0.0;
  std::size_t n_tokens = 0;
  std::size_t n_flagged = 0;
};

// Loss over the tokens of the listed utterances. When `grad` is given it is
// overwritten with d total / d params; the classifier receives gradient only
// from the BCE term, the hard selection passes none.
LossBreakdown total_loss(const PreparedCorpus& corpus, std::span<const std::size_t> batch_utterances,
                         const ModelParams& params, const TrainConfig& cfg, const LossOptions& opts,
                         ModelParams* grad = nullptr);

// Inference over a whole corpus. For utterance granularity one temperature is
// shared by all flagged tokens of an utterance.
std::vector<CalibratedToken> calibrate_corpus(const PreparedCorpus& corpus, const ModelParams& params,
                                              double threshold, const LossOptions& opts);

struct EpochStats {
  int epoch = 0;
  double total = 0.0;
  double bce = 0.0;
  double ce = 0.0;
  double ece = 0.0;
  double flagged_fraction = 0.0;
  std::optional<double> validation_ece;
  std::optional<double> validation_nce;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  // Classifier at the selection threshold, on validation data when given.
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t train_tokens = 0;
  std::size_t validation_tokens = 0;
};

nlohmann::json to_json(const TrainReport& report);

struct TrainOptions {
  TemperatureGranularity granularity = TemperatureGranularity::Token;
  const ModelParams* selector = nullptr;  // frozen classifier; required for utterance granularity
};

struct TrainResult {
  ModelParams params;
  TrainReport report;
};

TrainResult train(const Dataset& train_data, const Dataset* validation, const ModelParams& init,
                  const TrainConfig& cfg, const TrainOptions& opts = {});

}  // namespace selcal
