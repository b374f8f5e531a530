#include "selcal/features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "selcal/error.hpp"
#include "selcal/model.hpp"

namespace selcal {

using nlohmann::json;

std::string_view to_string(FeatureGroup group) {
  switch (group) {
    case FeatureGroup::Top1: return "top1";
    case FeatureGroup::Margin: return "margin";
    case FeatureGroup::Entropy: return "entropy";
    case FeatureGroup::TokenEmbedding: return "token_emb";
    case FeatureGroup::Position: return "position";
    case FeatureGroup::TopkLogits: return "topk_logits";
    case FeatureGroup::Mel: return "mel";
  }
  return "?";
}

FeatureGroup parse_feature_group(std::string_view name) {
  for (FeatureGroup g : kFeatureGroups) {
    if (to_string(g) == name) return g;
  }
  throw ValidationError("unknown feature group '" + std::string(name) + "'");
}

int FeatureConfig::offset(FeatureGroup g) const {
  switch (g) {
    case FeatureGroup::Top1: return 0;
    case FeatureGroup::Margin: return 1;
    case FeatureGroup::Entropy: return 2;
    case FeatureGroup::TokenEmbedding: return 3;
    case FeatureGroup::Position: return 3 + d_token_emb;
    case FeatureGroup::TopkLogits: return 4 + d_token_emb;
    case FeatureGroup::Mel: return 4 + d_token_emb + k_logits;
  }
  return 0;
}

int FeatureConfig::width(FeatureGroup g) const {
  switch (g) {
    case FeatureGroup::TokenEmbedding: return d_token_emb;
    case FeatureGroup::TopkLogits: return k_logits;
    case FeatureGroup::Mel: return d_acoustic;
    default: return 1;
  }
}

int FeatureConfig::window_frames() const {
  return std::max(1, static_cast<int>(std::floor(acoustic_window_s * kMelFrameRate + 1e-9)));
}

void FeatureConfig::validate(std::optional<int> stored_k) const {
  if (k_logits < 1 || d_token_emb < 1 || d_acoustic < 1 || n_mel_bins < 1) {
    throw ValidationError("feature config: dimensions must be positive");
  }
  if (!(acoustic_window_s > 0.0)) throw ValidationError("feature config: acoustic_window_s must be positive");
  if (stored_k && k_logits > *stored_k) {
    throw ValidationError("feature config: k_logits (" + std::to_string(k_logits) +
                          ") exceeds stored K (" + std::to_string(*stored_k) + ")");
  }
}

json to_json(const FeatureConfig& cfg) {
  json mask = json::array();
  for (FeatureGroup g : cfg.ablation_mask) mask.push_back(std::string(to_string(g)));
  return {{"k_logits", cfg.k_logits},       {"d_token_emb", cfg.d_token_emb},
          {"d_acoustic", cfg.d_acoustic},   {"n_mel_bins", cfg.n_mel_bins},
          {"acoustic_window_s", cfg.acoustic_window_s}, {"ablation_mask", mask}};
}

FeatureConfig feature_config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("feature config must be an object");
  FeatureConfig cfg;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "k_logits") cfg.k_logits = value.get<int>();
      else if (key == "d_token_emb") cfg.d_token_emb = value.get<int>();
      else if (key == "d_acoustic") cfg.d_acoustic = value.get<int>();
      else if (key == "n_mel_bins") cfg.n_mel_bins = value.get<int>();
      else if (key == "acoustic_window_s") cfg.acoustic_window_s = value.get<double>();
      else if (key == "ablation_mask") {
        for (const auto& name : value) cfg.ablation_mask.insert(parse_feature_group(name.get<std::string>()));
      } else {
        throw ValidationError("unknown feature config key '" + key + "'");
      }
    } catch (const json::exception&) {
      throw ValidationError("feature config key '" + key + "' has wrong type");
    }
  }
  cfg.validate();
  return cfg;
}

namespace {

// Reconstructed distribution: K explicit logits plus one tail pseudo-logit of
// multiplicity tail_count.
struct Reconstructed {
  const std::vector<double>& logits;
  double tail_logit;
  double tail_weight;
};

Reconstructed reconstruct(const TokenRecord& r) {
  const double n = static_cast<double>(r.tail_count);
  return {r.topk_logits, r.tail_lse - std::log(n), n};
}

}  // namespace

SoftmaxStats softmax_stats(const TokenRecord& record) {
  const Reconstructed d = reconstruct(record);
  const double log_z = log_partition(record);
  std::vector<double> p(d.logits.size());
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = std::exp(d.logits[k] - log_z);
  const double p_tail = std::exp(d.tail_logit - log_z);

  SoftmaxStats s;
  s.top1_prob = p[0];
  const double second = p.size() > 1 ? std::max(p[1], p_tail) : p_tail;
  s.margin = p[0] - second;
  double h = 0.0;
  for (double q : p) {
    if (q > 0.0) h -= q * std::log(q);
  }
  if (p_tail > 0.0) h -= d.tail_weight * p_tail * std::log(p_tail);
  s.entropy = h;
  return s;
}

ScaledConfidence scaled_confidence_with_derivative(const TokenRecord& record, double temperature) {
  if (!(temperature >= 1.0)) throw ValidationError("temperature must be >= 1");
  const Reconstructed d = reconstruct(record);
  const double inv_t = 1.0 / temperature;
  double m = d.tail_logit * inv_t;
  for (double x : d.logits) m = std::max(m, x * inv_t);
  double z = 0.0, zx = 0.0;
  for (double x : d.logits) {
    const double e = std::exp(x * inv_t - m);
    z += e;
    zx += e * x;
  }
  const double e_tail = d.tail_weight * std::exp(d.tail_logit * inv_t - m);
  z += e_tail;
  zx += e_tail * d.tail_logit;

  ScaledConfidence out;
  const double x0 = d.logits[0];
  out.value = std::exp(x0 * inv_t - m) / z;
  // d ln c / dT = (E[x] - x0) / T^2
  out.d_temperature = out.value * (zx / z - x0) * inv_t * inv_t;
  return out;
}

double scaled_confidence(const TokenRecord& record, double temperature) {
  return scaled_confidence_with_derivative(record, temperature).value;
}

Vector FeatureVector::flatten() const {
  Vector f(3 + token_emb.size() + 1 + topk_logits.size() + acoustic_emb.size());
  Eigen::Index i = 0;
  f[i++] = top1_prob;
  f[i++] = margin;
  f[i++] = entropy;
  f.segment(i, token_emb.size()) = token_emb;
  i += token_emb.size();
  f[i++] = rel_position;
  f.segment(i, topk_logits.size()) = topk_logits;
  i += topk_logits.size();
  f.segment(i, acoustic_emb.size()) = acoustic_emb;
  return f;
}

Matrix acoustic_frames(const Matrix& mel, const FeatureConfig& cfg) {
  if (mel.rows() == 0) throw ValidationError("acoustic_frames: zero frames");
  if (mel.cols() != cfg.n_mel_bins) {
    throw ValidationError("acoustic_frames: mel has " + std::to_string(mel.cols()) +
                          " bins, config expects " + std::to_string(cfg.n_mel_bins));
  }
  const Eigen::Index rows = std::min<Eigen::Index>(mel.rows(), cfg.window_frames());
  // Fixed affine rescale only: per-utterance statistics would erase the absolute
  // level, which is the strongest cue to how noisy the utterance is.
  return mel.topRows(rows) / kMelInputScale;
}

Vector attention_pool(const Matrix& frames, const PoolingParams& pool) {
  if (frames.rows() == 0) throw ValidationError("attention_pool: zero frames");
  if (frames.cols() != pool.w_score.cols()) throw ValidationError("attention_pool: frame width mismatch");
  const Matrix act = ((frames * pool.w_score.transpose()).rowwise() + pool.b_score.transpose())
                         .array()
                         .tanh()
                         .matrix();
  Vector scores = act * pool.v;
  scores.array() -= scores.maxCoeff();
  Vector alpha = scores.array().exp().matrix();
  alpha /= alpha.sum();
  // sum_t alpha_t (W_p m_t + b_p) = W_p (sum_t alpha_t m_t) + b_p
  const Vector pooled_frame = frames.transpose() * alpha;
  return pool.w_proj * pooled_frame + pool.b_proj;
}

double relative_position(int token_index, std::size_t hyp_length) {
  const double denom = std::max<double>(1.0, static_cast<double>(hyp_length) - 1.0);
  return static_cast<double>(token_index) / denom;
}

FeatureVector assemble_features(const TokenRecord& record, std::size_t hyp_length,
                                const Vector& acoustic_emb, const ModelParams& params,
                                const FeatureConfig& cfg) {
  if (cfg.d_token_emb != params.config.d_token_emb || cfg.d_acoustic != params.config.d_acoustic ||
      cfg.k_logits != params.config.k_logits || cfg.n_mel_bins != params.config.n_mel_bins) {
    throw ValidationError("feature config does not match model shapes");
  }
  if (static_cast<int>(record.topk_logits.size()) < cfg.k_logits) {
    throw ValidationError("record stores fewer than k_logits logits");
  }
  FeatureVector f;
  const SoftmaxStats s = softmax_stats(record);
  if (cfg.enabled(FeatureGroup::Top1)) f.top1_prob = s.top1_prob;
  if (cfg.enabled(FeatureGroup::Margin)) f.margin = s.margin;
  if (cfg.enabled(FeatureGroup::Entropy)) f.entropy = s.entropy;

  f.token_emb = Vector::Zero(cfg.d_token_emb);
  if (cfg.enabled(FeatureGroup::TokenEmbedding)) {
    f.token_emb = params.token_emb.row(embedding_row(record.token_id)).transpose();
  }
  if (cfg.enabled(FeatureGroup::Position)) {
    f.rel_position = relative_position(record.token_index, hyp_length);
  }
  f.topk_logits = Vector::Zero(cfg.k_logits);
  if (cfg.enabled(FeatureGroup::TopkLogits)) {
    for (int k = 0; k < cfg.k_logits; ++k) f.topk_logits[k] = record.topk_logits[k] - record.topk_logits[0];
  }
  f.acoustic_emb = Vector::Zero(cfg.d_acoustic);
  if (cfg.enabled(FeatureGroup::Mel)) {
    if (acoustic_emb.size() != cfg.d_acoustic) throw ValidationError("acoustic embedding size mismatch");
    f.acoustic_emb = acoustic_emb;
  }
  return f;
}

FeatureVector assemble_features(const TokenRecord& record, const UtteranceRecord& utt,
                                const Matrix* mel, const ModelParams& params,
                                const FeatureConfig& cfg) {
  if (mel == nullptr) throw ValidationError("missing mel for utterance " + utt.utt_id);
  if (record.utt_id != utt.utt_id) throw ValidationError("record does not belong to utterance");
  Vector emb = Vector::Zero(cfg.d_acoustic);
  if (cfg.enabled(FeatureGroup::Mel)) emb = attention_pool(acoustic_frames(*mel, cfg), params.pooling);
  return assemble_features(record, utt.hyp_token_ids.size(), emb, params, cfg);
}

}  // namespace selcal
