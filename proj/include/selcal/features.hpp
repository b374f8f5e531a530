#pragma once

#include <array>
#include <optional>
#include <set>
#include <string>
#include <string_view>

#include "json.hpp"
#include "selcal/linalg.hpp"
#include "selcal/records.hpp"

namespace selcal {

struct ModelParams;
struct PoolingParams;

// Independently maskable feature groups, in feature-vector order.
enum class FeatureGroup { Top1, Margin, Entropy, TokenEmbedding, Position, TopkLogits, Mel };

inline constexpr std::array kFeatureGroups = {
    FeatureGroup::Top1,     FeatureGroup::Margin,     FeatureGroup::Entropy, FeatureGroup::TokenEmbedding,
    FeatureGroup::Position, FeatureGroup::TopkLogits, FeatureGroup::Mel};

std::string_view to_string(FeatureGroup group);
FeatureGroup parse_feature_group(std::string_view name);

inline constexpr double kMelFrameRate = 100.0;  // 10 ms hop

struct FeatureConfig {
  int k_logits = 5;
  int d_token_emb = 32;
  int d_acoustic = 64;
  int n_mel_bins = 80;
  double acoustic_window_s = 3.0;
  std::set<FeatureGroup> ablation_mask;

  int dimension() const { return 3 + d_token_emb + 1 + k_logits + d_acoustic; }
  bool enabled(FeatureGroup g) const { return !ablation_mask.contains(g); }
  // Column range [offset, offset + width) of a group in the flat vector.
  int offset(FeatureGroup g) const;
  int width(FeatureGroup g) const;
  int window_frames() const;

  // stored_k: K of the records the features will be built from.
  void validate(std::optional<int> stored_k = std::nullopt) const;

  bool operator==(const FeatureConfig&) const = default;
};

nlohmann::json to_json(const FeatureConfig& cfg);
// Rejects unknown keys; missing keys keep their defaults.
FeatureConfig feature_config_from_json(const nlohmann::json& j);

struct SoftmaxStats {
  double top1_prob = 0.0;
  double margin = 0.0;   // top-1 minus top-2 probability
  double entropy = 0.0;  // nats
};

// Statistics of the distribution over top-K logits plus the tail, where the
// tail is tail_count equal logits of value tail_lse - ln(tail_count).
SoftmaxStats softmax_stats(const TokenRecord& record);

// Top-1 probability after dividing every reconstructed logit by T >= 1.
double scaled_confidence(const TokenRecord& record, double temperature);

struct ScaledConfidence {
  double value = 0.0;
  double d_temperature = 0.0;  // d value / d T
};
ScaledConfidence scaled_confidence_with_derivative(const TokenRecord& record, double temperature);

struct FeatureVector {
  double top1_prob = 0.0;
  double margin = 0.0;
  double entropy = 0.0;
  Vector token_emb;
  double rel_position = 0.0;
  Vector topk_logits;  // shifted so the first entry is 0
  Vector acoustic_emb;

  Vector flatten() const;
};

// Natural-log mel values span roughly [-23, 10]; dividing by this keeps the
// pooling pre-activations near unit scale.
inline constexpr double kMelInputScale = 5.0;

// First window_frames() frames of the utterance divided by kMelInputScale.
Matrix acoustic_frames(const Matrix& mel, const FeatureConfig& cfg);

// Additive attention pooling: s_t = v . tanh(W_a m_t + b_a), alpha = softmax(s),
// result = sum_t alpha_t (W_p m_t + b_p).
Vector attention_pool(const Matrix& frames, const PoolingParams& pooling);

double relative_position(int token_index, std::size_t hyp_length);

// Builds f_i from a precomputed utterance embedding.
FeatureVector assemble_features(const TokenRecord& record, std::size_t hyp_length,
                                const Vector& acoustic_emb, const ModelParams& params,
                                const FeatureConfig& cfg);

// mel: the utterance's full mel matrix; nullptr is an error.
FeatureVector assemble_features(const TokenRecord& record, const UtteranceRecord& utt,
                                const Matrix* mel, const ModelParams& params,
                                const FeatureConfig& cfg);

}  // namespace selcal
