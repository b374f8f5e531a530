#include "selcal/calibrator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "selcal/error.hpp"
#include "selcal/metrics.hpp"

namespace selcal {

using nlohmann::json;

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError(std::string(name) + " must be positive");
  };
  auto non_negative = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(std::string(name) + " must be >= 0");
  };
  positive(w_pos, "w_pos");
  non_negative(lambda_bce, "lambda_bce");
  non_negative(lambda_ce, "lambda_ce");
  non_negative(lambda_ece, "lambda_ece");
  if (!(selection_threshold > 0.0 && selection_threshold < 1.0)) {
    throw ValidationError("selection_threshold must be in (0,1)");
  }
  if (soft_bins < 1) throw ValidationError("soft_bins must be >= 1");
  positive(soft_bin_tau, "soft_bin_tau");
  positive(learning_rate, "learning_rate");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ValidationError("adam betas must be in [0,1)");
  }
  positive(adam_eps, "adam_eps");
  if (batch_tokens < 1) throw ValidationError("batch_tokens must be >= 1");
  if (epochs < 0) throw ValidationError("epochs must be >= 0");
  if (!(overconf_threshold > 0.0 && overconf_threshold < 1.0)) {
    throw ValidationError("overconf_threshold must be in (0,1)");
  }
}

json to_json(const TrainConfig& c) {
  return {{"w_pos", c.w_pos},
          {"lambda_bce", c.lambda_bce},
          {"lambda_ce", c.lambda_ce},
          {"lambda_ece", c.lambda_ece},
          {"selection_threshold", c.selection_threshold},
          {"soft_bins", c.soft_bins},
          {"soft_bin_tau", c.soft_bin_tau},
          {"learning_rate", c.learning_rate},
          {"adam_betas", {c.adam_beta1, c.adam_beta2}},
          {"adam_eps", c.adam_eps},
          {"batch_tokens", c.batch_tokens},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"overconf_threshold", c.overconf_threshold}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ValidationError("train config must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "w_pos") c.w_pos = v.get<double>();
      else if (key == "lambda_bce") c.lambda_bce = v.get<double>();
      else if (key == "lambda_ce") c.lambda_ce = v.get<double>();
      else if (key == "lambda_ece") c.lambda_ece = v.get<double>();
      else if (key == "selection_threshold") c.selection_threshold = v.get<double>();
      else if (key == "soft_bins") c.soft_bins = v.get<int>();
      else if (key == "soft_bin_tau") c.soft_bin_tau = v.get<double>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "adam_betas") {
        const auto b = v.get<std::vector<double>>();
        if (b.size() != 2) throw ValidationError("adam_betas needs two values");
        c.adam_beta1 = b[0];
        c.adam_beta2 = b[1];
      } else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "batch_tokens") c.batch_tokens = v.get<int>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "overconf_threshold") c.overconf_threshold = v.get<double>();
      else throw ValidationError("unknown train config key '" + key + "'");
    } catch (const json::exception&) {
      throw ValidationError("train config key '" + key + "' has wrong type");
    }
  }
  c.validate();
  return c;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double softplus(double z) {
  // max(z, 0) + log1p(exp(-|z|)) is exact in both tails.
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

namespace {

void check_feature_dim(Eigen::Index n, const ModelParams& p) {
  if (n != p.config.dimension()) {
    throw ValidationError("feature dimension " + std::to_string(n) + " does not match model dimension " +
                          std::to_string(p.config.dimension()));
  }
}

double head_output(const Vector& f, const MlpHead& h) {
  const Vector hidden = (h.w1 * f + h.b1).cwiseMax(0.0);
  return h.w2.dot(hidden) + h.b2;
}

}  // namespace

double classify(const Vector& f, const ModelParams& params) {
  check_feature_dim(f.size(), params);
  return sigmoid(head_output(f, params.classifier));
}

double classify(const FeatureVector& f, const ModelParams& params) { return classify(f.flatten(), params); }

double predict_temperature(const Vector& f, const ModelParams& params) {
  check_feature_dim(f.size(), params);
  return 1.0 + softplus(head_output(f, params.temperature));
}

double predict_temperature(const FeatureVector& f, const ModelParams& params) {
  return predict_temperature(f.flatten(), params);
}

ScaledConfidence capped_scaled_confidence(const TokenRecord& record, double temperature) {
  ScaledConfidence s = scaled_confidence_with_derivative(record, temperature);
  if (s.value > record.confidence) return {record.confidence, 0.0};
  return s;
}

CalibratedToken select_and_apply(const TokenRecord& record, const Vector& f, const ModelParams& params,
                                 double threshold) {
  CalibratedToken out;
  out.o_hat = classify(f, params);
  out.flagged = out.o_hat >= threshold;
  out.confidence = record.confidence;
  if (out.flagged) {
    out.temperature = predict_temperature(f, params);
    out.confidence = capped_scaled_confidence(record, out.temperature).value;
  }
  return out;
}

std::vector<CalibratedToken> select_and_apply(std::span<const TokenRecord> records, std::span<const Vector> features,
                                              const ModelParams& params, double threshold) {
  if (records.size() != features.size()) throw ValidationError("record/feature count mismatch");
  std::vector<CalibratedToken> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.push_back(select_and_apply(records[i], features[i], params, threshold));
  }
  return out;
}

namespace {

double clamp_prob(double p) { return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp); }
bool clamped(double p) { return p < kProbabilityClamp || p > 1.0 - kProbabilityClamp; }

// Row-normalized soft memberships u_im = softmax_m(-(c_i - mu_m)^2 / tau).
void soft_memberships(double c, int bins, double tau, std::vector<double>& u, std::vector<double>& a) {
  double amax = -std::numeric_limits<double>::infinity();
  for (int m = 0; m < bins; ++m) {
    const double mu = (m + 0.5) / bins;
    a[m] = -(c - mu) * (c - mu) / tau;
    amax = std::max(amax, a[m]);
  }
  double z = 0.0;
  for (int m = 0; m < bins; ++m) {
    u[m] = std::exp(a[m] - amax);
    z += u[m];
  }
  for (int m = 0; m < bins; ++m) u[m] /= z;
}

}  // namespace

double loss_weighted_bce(std::span<const double> o_hat, std::span<const int> o, double w) {
  if (o_hat.empty()) throw ValidationError("loss_weighted_bce: empty batch");
  if (o_hat.size() != o.size()) throw ValidationError("loss_weighted_bce: size mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < o_hat.size(); ++i) {
    const double p = clamp_prob(o_hat[i]);
    sum += o[i] ? w * std::log(p) : std::log(1.0 - p);
  }
  return -sum / static_cast<double>(o_hat.size());
}

double loss_selective_ce(std::span<const double> c, std::span<const int> y) {
  if (c.size() != y.size()) throw ValidationError("loss_selective_ce: size mismatch");
  if (c.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double p = clamp_prob(c[i]);
    sum += y[i] ? std::log(p) : std::log(1.0 - p);
  }
  return -sum / static_cast<double>(c.size());
}

double loss_soft_ece(std::span<const double> c, std::span<const int> y, int bins, double tau,
                     std::span<double> d_c) {
  if (c.empty()) throw ValidationError("loss_soft_ece: empty set");
  if (c.size() != y.size()) throw ValidationError("loss_soft_ece: size mismatch");
  if (bins < 1 || !(tau > 0.0)) throw ValidationError("loss_soft_ece: need bins >= 1 and tau > 0");
  const bool want_grad = !d_c.empty();
  if (want_grad && d_c.size() != c.size()) throw ValidationError("loss_soft_ece: gradient size mismatch");
  const std::size_t n = c.size();
  std::vector<double> u(bins), a(bins);
  // D_m = sum_i u_im (y_i - c_i); the loss is sum_m |D_m| / N.
  std::vector<double> d(bins, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    soft_memberships(c[i], bins, tau, u, a);
    for (int m = 0; m < bins; ++m) d[m] += u[m] * (y[i] - c[i]);
  }
  double loss = 0.0;
  for (int m = 0; m < bins; ++m) loss += std::abs(d[m]);
  loss /= static_cast<double>(n);
  if (want_grad) {
    std::vector<double> sign(bins);
    for (int m = 0; m < bins; ++m) sign[m] = d[m] > 0.0 ? 1.0 : (d[m] < 0.0 ? -1.0 : 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      soft_memberships(c[i], bins, tau, u, a);
      double abar = 0.0;  // membership-weighted mean of da_im/dc_i
      for (int m = 0; m < bins; ++m) {
        const double mu = (m + 0.5) / bins;
        a[m] = -2.0 * (c[i] - mu) / tau;
        abar += u[m] * a[m];
      }
      double g = 0.0;
      for (int m = 0; m < bins; ++m) {
        g += sign[m] * (u[m] * (a[m] - abar) * (y[i] - c[i]) - u[m]);
      }
      d_c[i] = g / static_cast<double>(n);
    }
  }
  return loss;
}

double loss_soft_ece(std::span<const double> c, std::span<const int> y, int bins, double tau) {
  return loss_soft_ece(c, y, bins, tau, std::span<double>{});
}

PreparedCorpus prepare_corpus(const Dataset& data, const FeatureConfig& cfg, bool require_labels,
                              double overconf_threshold) {
  cfg.validate(data.manifest.k);
  if (data.tokens_of.size() != data.utterances.size()) throw ValidationError("dataset is not indexed");
  PreparedCorpus pc;
  pc.data = &data;
  pc.config = cfg;
  pc.utterances.resize(data.utterances.size());
  for (std::size_t u = 0; u < data.utterances.size(); ++u) {
    if (data.mels[u].cols() != cfg.n_mel_bins) {
      throw ValidationError("utterance '" + data.utterances[u].utt_id + "' has " +
                            std::to_string(data.mels[u].cols()) + " mel bins, model expects " +
                            std::to_string(cfg.n_mel_bins));
    }
    if (cfg.enabled(FeatureGroup::Mel)) pc.utterances[u].frames = acoustic_frames(data.mels[u], cfg);
    pc.utterances[u].tokens = data.tokens_of[u];
  }
  pc.tokens.resize(data.records.size());
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const TokenRecord& r = data.records[i];
    PreparedToken& t = pc.tokens[i];
    t.record = &r;
    t.utterance = data.utterance_of(i);
    t.embedding_row = embedding_row(r.token_id);
    t.stats = softmax_stats(r);
    t.rel_position = relative_position(r.token_index, data.utterances[t.utterance].hyp_token_ids.size());
    t.y = r.y;
    t.o = r.o;
    if (require_labels) {
      if (!t.y) throw ValidationError("corpus without overconfidence labels: record " + r.utt_id + "#" +
                                      std::to_string(r.token_index) + " has no y");
      if (!t.o) t.o = label_overconfident(r, overconf_threshold);
    }
  }
  return pc;
}

Vector static_features(const PreparedToken& t, const FeatureConfig& cfg) {
  Vector f = Vector::Zero(cfg.dimension());
  if (cfg.enabled(FeatureGroup::Top1)) f[cfg.offset(FeatureGroup::Top1)] = t.stats.top1_prob;
  if (cfg.enabled(FeatureGroup::Margin)) f[cfg.offset(FeatureGroup::Margin)] = t.stats.margin;
  if (cfg.enabled(FeatureGroup::Entropy)) f[cfg.offset(FeatureGroup::Entropy)] = t.stats.entropy;
  if (cfg.enabled(FeatureGroup::Position)) f[cfg.offset(FeatureGroup::Position)] = t.rel_position;
  if (cfg.enabled(FeatureGroup::TopkLogits)) {
    const int off = cfg.offset(FeatureGroup::TopkLogits);
    const auto& x = t.record->topk_logits;
    for (int k = 0; k < cfg.k_logits; ++k) f[off + k] = x[k] - x[0];
  }
  return f;
}

namespace {

struct HeadPass {
  Matrix pre;  // rows x hidden
  Vector z;
};

HeadPass head_forward(const Matrix& in, const MlpHead& h) {
  HeadPass p;
  p.pre = in * h.w1.transpose();
  p.pre.rowwise() += h.b1.transpose();
  p.z = p.pre.cwiseMax(0.0) * h.w2;
  p.z.array() += h.b2;
  return p;
}

// Accumulates parameter gradients into g and input gradients into d_in.
void head_backward(const Matrix& in, const HeadPass& p, const Vector& dz, const MlpHead& h, MlpHead& g,
                   Matrix& d_in) {
  const Matrix act = p.pre.cwiseMax(0.0);
  g.w2 += act.transpose() * dz;
  g.b2 += dz.sum();
  Matrix dh = dz * h.w2.transpose();
  dh.array() *= (p.pre.array() > 0.0).cast<double>();
  g.w1 += dh.transpose() * in;
  g.b1 += dh.colwise().sum().transpose();
  d_in += dh * h.w1;
}

struct PoolPass {
  Matrix act;  // tanh(X Wa^T + ba), frames x d
  Vector alpha;
  Vector xbar;  // X^T alpha
  Vector e;
};

PoolPass pool_forward(const Matrix& x, const PoolingParams& p) {
  PoolPass f;
  f.act = x * p.w_score.transpose();
  f.act.rowwise() += p.b_score.transpose();
  f.act = f.act.array().tanh().matrix();
  Vector s = f.act * p.v;
  s.array() -= s.maxCoeff();
  f.alpha = s.array().exp().matrix();
  f.alpha /= f.alpha.sum();
  f.xbar = x.transpose() * f.alpha;
  f.e = p.w_proj * f.xbar + p.b_proj;
  return f;
}

void pool_backward(const Matrix& x, const PoolPass& f, const Vector& de, const PoolingParams& p,
                   PoolingParams& g) {
  g.w_proj += de * f.xbar.transpose();
  g.b_proj += de;
  const Vector dxbar = p.w_proj.transpose() * de;
  const Vector dalpha = x * dxbar;
  const Vector ds = f.alpha.cwiseProduct((dalpha.array() - f.alpha.dot(dalpha)).matrix());
  g.v += f.act.transpose() * ds;
  Matrix dpre = ds * p.v.transpose();
  dpre.array() *= 1.0 - f.act.array().square();
  g.w_score += dpre.transpose() * x;
  g.b_score += dpre.colwise().sum().transpose();
}

// Utterance-level temperature input: mean uncertainty statistics plus the
// acoustic slice; every other group is zero.
Vector utterance_features(const PreparedCorpus& pc, std::size_t u, const Vector& e) {
  const FeatureConfig& cfg = pc.config;
  Vector g = Vector::Zero(cfg.dimension());
  const auto& toks = pc.utterances[u].tokens;
  if (!toks.empty()) {
    double top1 = 0.0, margin = 0.0, entropy = 0.0;
    for (std::size_t i : toks) {
      top1 += pc.tokens[i].stats.top1_prob;
      margin += pc.tokens[i].stats.margin;
      entropy += pc.tokens[i].stats.entropy;
    }
    const double n = static_cast<double>(toks.size());
    if (cfg.enabled(FeatureGroup::Top1)) g[cfg.offset(FeatureGroup::Top1)] = top1 / n;
    if (cfg.enabled(FeatureGroup::Margin)) g[cfg.offset(FeatureGroup::Margin)] = margin / n;
    if (cfg.enabled(FeatureGroup::Entropy)) g[cfg.offset(FeatureGroup::Entropy)] = entropy / n;
  }
  if (cfg.enabled(FeatureGroup::Mel)) g.segment(cfg.offset(FeatureGroup::Mel), cfg.d_acoustic) = e;
  return g;
}

struct Forward {
  std::vector<std::size_t> tokens;     // corpus token indices in batch order
  std::vector<std::size_t> token_row;  // batch row of each token's utterance
  std::vector<PoolPass> pools;         // per batch utterance (empty when mel masked)
  Matrix features;                     // tokens x dim
  HeadPass classifier;
  Matrix temp_input;  // tokens x dim, or utterances x dim
  HeadPass temperature;
  std::vector<double> o_hat;
  std::vector<char> flagged;
  std::vector<double> temp;  // per token, the temperature its head predicts
  std::vector<double> conf;  // calibrated confidence
  std::vector<double> dconf_dtemp;
};

Forward run_forward(const PreparedCorpus& pc, std::span<const std::size_t> batch, const ModelParams& params,
                    double threshold, const LossOptions& opts) {
  if (!(pc.config == params.config)) throw ValidationError("corpus features were prepared for a different model config");
  params.check_shapes();
  if (opts.use_frozen_selector && pc.frozen_o_hat.size() != pc.tokens.size()) {
    throw ValidationError("frozen selector requested but none attached");
  }
  const FeatureConfig& cfg = params.config;
  const bool mel_on = cfg.enabled(FeatureGroup::Mel);
  const bool emb_on = cfg.enabled(FeatureGroup::TokenEmbedding);
  const bool per_utt = opts.granularity == TemperatureGranularity::Utterance;
  Forward fw;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::size_t u = batch[b];
    if (u >= pc.utterances.size()) throw ValidationError("batch utterance index out of range");
    for (std::size_t i : pc.utterances[u].tokens) {
      fw.tokens.push_back(i);
      fw.token_row.push_back(b);
    }
    if (mel_on) fw.pools.push_back(pool_forward(pc.utterances[u].frames, params.pooling));
  }
  const std::size_t n = fw.tokens.size();
  const int dim = cfg.dimension();
  const int emb_off = cfg.offset(FeatureGroup::TokenEmbedding);
  const int mel_off = cfg.offset(FeatureGroup::Mel);
  fw.features.resize(static_cast<Eigen::Index>(n), dim);
  for (std::size_t r = 0; r < n; ++r) {
    const PreparedToken& t = pc.tokens[fw.tokens[r]];
    Vector f = static_features(t, cfg);
    if (emb_on) f.segment(emb_off, cfg.d_token_emb) = params.token_emb.row(t.embedding_row).transpose();
    if (mel_on) f.segment(mel_off, cfg.d_acoustic) = fw.pools[fw.token_row[r]].e;
    fw.features.row(static_cast<Eigen::Index>(r)) = f.transpose();
  }

  fw.o_hat.resize(n);
  if (opts.use_frozen_selector) {
    for (std::size_t r = 0; r < n; ++r) fw.o_hat[r] = pc.frozen_o_hat[fw.tokens[r]];
  } else {
    fw.classifier = head_forward(fw.features, params.classifier);
    for (std::size_t r = 0; r < n; ++r) fw.o_hat[r] = sigmoid(fw.classifier.z[static_cast<Eigen::Index>(r)]);
  }
  fw.flagged.resize(n);
  for (std::size_t r = 0; r < n; ++r) fw.flagged[r] = fw.o_hat[r] >= threshold;

  if (per_utt) {
    fw.temp_input.resize(static_cast<Eigen::Index>(batch.size()), dim);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Vector e = mel_on ? fw.pools[b].e : Vector::Zero(cfg.d_acoustic);
      fw.temp_input.row(static_cast<Eigen::Index>(b)) = utterance_features(pc, batch[b], e).transpose();
    }
  } else {
    fw.temp_input = fw.features;
  }
  fw.temperature = head_forward(fw.temp_input, params.temperature);

  fw.temp.assign(n, 1.0);
  fw.conf.resize(n);
  fw.dconf_dtemp.assign(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const TokenRecord& rec = *pc.tokens[fw.tokens[r]].record;
    const auto z_row = static_cast<Eigen::Index>(per_utt ? fw.token_row[r] : r);
    fw.temp[r] = 1.0 + softplus(fw.temperature.z[z_row]);
    if (fw.flagged[r]) {
      const ScaledConfidence s = capped_scaled_confidence(rec, fw.temp[r]);
      fw.conf[r] = s.value;
      fw.dconf_dtemp[r] = s.d_temperature;
    } else {
      fw.conf[r] = rec.confidence;
    }
  }
  return fw;
}

}  // namespace

void attach_selector(PreparedCorpus& pc, const ModelParams& selector) {
  if (pc.data == nullptr) throw ValidationError("corpus not prepared");
  PreparedCorpus sel = prepare_corpus(*pc.data, selector.config, false);
  std::vector<std::size_t> all(sel.utterances.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const Forward fw = run_forward(sel, all, selector, 0.5, {});
  pc.frozen_o_hat.assign(pc.tokens.size(), 0.0);
  for (std::size_t r = 0; r < fw.tokens.size(); ++r) pc.frozen_o_hat[fw.tokens[r]] = fw.o_hat[r];
}

LossBreakdown total_loss(const PreparedCorpus& pc, std::span<const std::size_t> batch, const ModelParams& params,
                         const TrainConfig& cfg, const LossOptions& opts, ModelParams* grad) {
  const Forward fw = run_forward(pc, batch, params, cfg.selection_threshold, opts);
  const std::size_t n = fw.tokens.size();
  if (n == 0) throw ValidationError("total_loss: empty batch");
  std::vector<int> o(n), y(n);
  for (std::size_t r = 0; r < n; ++r) {
    const PreparedToken& t = pc.tokens[fw.tokens[r]];
    if (!t.y || !t.o) throw ValidationError("total_loss: unlabeled batch");
    y[r] = *t.y;
    o[r] = *t.o;
  }
  std::vector<double> sel_conf;
  std::vector<int> sel_y;
  for (std::size_t r = 0; r < n; ++r) {
    if (fw.flagged[r]) {
      sel_conf.push_back(fw.conf[r]);
      sel_y.push_back(y[r]);
    }
  }
  LossBreakdown lb;
  lb.n_tokens = n;
  lb.n_flagged = sel_conf.size();
  lb.bce = loss_weighted_bce(fw.o_hat, o, cfg.w_pos);
  lb.ce = loss_selective_ce(sel_conf, sel_y);
  std::vector<double> d_ece(n);
  lb.ece = loss_soft_ece(fw.conf, y, cfg.soft_bins, cfg.soft_bin_tau, d_ece);
  lb.total = cfg.lambda_bce * lb.bce + cfg.lambda_ce * lb.ce + cfg.lambda_ece * lb.ece;
  if (grad == nullptr) return lb;

  if (!(grad->config == params.config) || grad->hidden != params.hidden) *grad = ModelParams::zeros(params.config, params.hidden);
  grad->set_zero();
  const FeatureConfig& fc = params.config;
  const bool per_utt = opts.granularity == TemperatureGranularity::Utterance;
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_s = sel_conf.empty() ? 0.0 : 1.0 / static_cast<double>(sel_conf.size());

  Matrix d_features = Matrix::Zero(fw.features.rows(), fw.features.cols());
  if (!opts.use_frozen_selector) {
    Vector dz(static_cast<Eigen::Index>(n));
    for (std::size_t r = 0; r < n; ++r) {
      const double p = fw.o_hat[r];
      dz[static_cast<Eigen::Index>(r)] =
          clamped(p) ? 0.0 : cfg.lambda_bce * inv_n * (-cfg.w_pos * o[r] * (1.0 - p) + (1 - o[r]) * p);
    }
    head_backward(fw.features, fw.classifier, dz, params.classifier, grad->classifier, d_features);
  }

  Vector dz_t = Vector::Zero(fw.temp_input.rows());
  for (std::size_t r = 0; r < n; ++r) {
    if (!fw.flagged[r]) continue;
    const double c = fw.conf[r];
    double dc = cfg.lambda_ece * d_ece[r];
    if (!clamped(c)) dc += cfg.lambda_ce * inv_s * (y[r] ? -1.0 / c : 1.0 / (1.0 - c));
    const auto row = static_cast<Eigen::Index>(per_utt ? fw.token_row[r] : r);
    dz_t[row] += dc * fw.dconf_dtemp[r];
  }
  for (Eigen::Index row = 0; row < dz_t.size(); ++row) dz_t[row] *= sigmoid(fw.temperature.z[row]);
  Matrix d_temp_input = Matrix::Zero(fw.temp_input.rows(), fw.temp_input.cols());
  head_backward(fw.temp_input, fw.temperature, dz_t, params.temperature, grad->temperature, d_temp_input);
  if (!per_utt) d_features += d_temp_input;

  if (fc.enabled(FeatureGroup::TokenEmbedding)) {
    const int off = fc.offset(FeatureGroup::TokenEmbedding);
    for (std::size_t r = 0; r < n; ++r) {
      grad->token_emb.row(pc.tokens[fw.tokens[r]].embedding_row) +=
          d_features.row(static_cast<Eigen::Index>(r)).segment(off, fc.d_token_emb);
    }
  }
  if (fc.enabled(FeatureGroup::Mel)) {
    const int off = fc.offset(FeatureGroup::Mel);
    std::vector<Vector> de(batch.size(), Vector::Zero(fc.d_acoustic));
    for (std::size_t r = 0; r < n; ++r) {
      de[fw.token_row[r]] += d_features.row(static_cast<Eigen::Index>(r)).segment(off, fc.d_acoustic).transpose();
    }
    if (per_utt) {
      for (std::size_t b = 0; b < batch.size(); ++b) {
        de[b] += d_temp_input.row(static_cast<Eigen::Index>(b)).segment(off, fc.d_acoustic).transpose();
      }
    }
    for (std::size_t b = 0; b < batch.size(); ++b) {
      pool_backward(pc.utterances[batch[b]].frames, fw.pools[b], de[b], params.pooling, grad->pooling);
    }
  }
  return lb;
}

std::vector<CalibratedToken> calibrate_corpus(const PreparedCorpus& pc, const ModelParams& params, double threshold,
                                              const LossOptions& opts) {
  std::vector<CalibratedToken> out(pc.tokens.size());
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < pc.utterances.size(); start += kChunk) {
    std::vector<std::size_t> batch;
    for (std::size_t u = start; u < std::min(pc.utterances.size(), start + kChunk); ++u) batch.push_back(u);
    const Forward fw = run_forward(pc, batch, params, threshold, opts);
    for (std::size_t r = 0; r < fw.tokens.size(); ++r) {
      CalibratedToken& c = out[fw.tokens[r]];
      c.o_hat = fw.o_hat[r];
      c.flagged = fw.flagged[r];
      c.confidence = fw.conf[r];
      c.temperature = c.flagged ? fw.temp[r] : 1.0;
    }
  }
  return out;
}

json to_json(const TrainReport& report) {
  json epochs = json::array();
  for (const auto& e : report.epochs) {
    json j = {{"epoch", e.epoch}, {"total", e.total}, {"bce", e.bce}, {"ce", e.ce},
              {"ece", e.ece},     {"flagged_fraction", e.flagged_fraction}};
    j["validation_ece"] = e.validation_ece ? json(*e.validation_ece) : json(nullptr);
    j["validation_nce"] = e.validation_nce ? json(*e.validation_nce) : json(nullptr);
    epochs.push_back(j);
  }
  return {{"epochs", epochs},
          {"precision", report.precision},
          {"recall", report.recall},
          {"f1", report.f1},
          {"train_tokens", report.train_tokens},
          {"validation_tokens", report.validation_tokens}};
}

namespace {

struct Adam {
  ModelParams m, v;
  long step = 0;

  explicit Adam(const ModelParams& like)
      : m(ModelParams::zeros(like.config, like.hidden)), v(ModelParams::zeros(like.config, like.hidden)) {}

  void update(ModelParams& params, const ModelParams& grad, const TrainConfig& cfg) {
    ++step;
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
    auto step_one = [&](double& p, double& mi, double& vi, double g) {
      mi = cfg.adam_beta1 * mi + (1.0 - cfg.adam_beta1) * g;
      vi = cfg.adam_beta2 * vi + (1.0 - cfg.adam_beta2) * g * g;
      p -= cfg.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_eps);
    };
    // Lazy update for the embedding table: rows of tokens absent from the batch
    // keep their values and moments, so a rare token's row does not keep
    // drifting on stale momentum long after its last occurrence.
    const Matrix& g_emb = grad.token_emb;
    for (Eigen::Index r = 0; r < g_emb.rows(); ++r) {
      if ((g_emb.row(r).array() == 0.0).all()) continue;
      for (Eigen::Index c = 0; c < g_emb.cols(); ++c) {
        step_one(params.token_emb(r, c), m.token_emb(r, c), v.token_emb(r, c), g_emb(r, c));
      }
    }
    auto pb = params.blocks();
    auto gb = grad.blocks();
    auto mb = m.blocks();
    auto vb = v.blocks();
    for (std::size_t b = 0; b < pb.size(); ++b) {
      if (pb[b].name == "token_emb") continue;
      for (std::size_t i = 0; i < pb[b].values.size(); ++i) {
        step_one(pb[b].values[i], mb[b].values[i], vb[b].values[i], gb[b].values[i]);
      }
    }
  }
};

std::vector<std::vector<std::size_t>> make_batches(const PreparedCorpus& pc, const std::vector<std::size_t>& order,
                                                   int batch_tokens) {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t count = 0;
  for (std::size_t u : order) {
    const std::size_t n = pc.utterances[u].tokens.size();
    if (n == 0) continue;
    if (!current.empty() && count + n > static_cast<std::size_t>(batch_tokens)) {
      batches.push_back(std::move(current));
      current.clear();
      count = 0;
    }
    current.push_back(u);
    count += n;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

}  // namespace

TrainResult train(const Dataset& train_data, const Dataset* validation, const ModelParams& init,
                  const TrainConfig& cfg, const TrainOptions& topts) {
  cfg.validate();
  init.check_shapes();
  LossOptions opts;
  opts.granularity = topts.granularity;
  if (topts.granularity == TemperatureGranularity::Utterance && topts.selector == nullptr) {
    throw ValidationError("utterance-level training needs a trained token-level selector");
  }
  opts.use_frozen_selector = topts.selector != nullptr;

  PreparedCorpus pc = prepare_corpus(train_data, init.config, true, cfg.overconf_threshold);
  if (topts.selector) attach_selector(pc, *topts.selector);
  std::optional<PreparedCorpus> val;
  if (validation != nullptr && !validation->records.empty()) {
    val = prepare_corpus(*validation, init.config, true, cfg.overconf_threshold);
    if (topts.selector) attach_selector(*val, *topts.selector);
  }

  TrainResult result{init, {}};
  result.report.train_tokens = pc.tokens.size();
  result.report.validation_tokens = val ? val->tokens.size() : 0;
  ModelParams& params = result.params;
  ModelParams grad = ModelParams::zeros(init.config, init.hidden);
  Adam adam(init);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(pc.utterances.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats stats;
    stats.epoch = epoch;
    std::size_t tokens = 0, flagged = 0;
    for (const auto& batch : make_batches(pc, order, cfg.batch_tokens)) {
      const LossBreakdown lb = total_loss(pc, batch, params, cfg, opts, &grad);
      if (!std::isfinite(lb.total) || !grad.all_finite()) {
        throw ValidationError("training diverged at epoch " + std::to_string(epoch));
      }
      adam.update(params, grad, cfg);
      const double w = static_cast<double>(lb.n_tokens);
      stats.total += w * lb.total;
      stats.bce += w * lb.bce;
      stats.ce += w * lb.ce;
      stats.ece += w * lb.ece;
      tokens += lb.n_tokens;
      flagged += lb.n_flagged;
    }
    if (tokens > 0) {
      const double inv = 1.0 / static_cast<double>(tokens);
      stats.total *= inv;
      stats.bce *= inv;
      stats.ce *= inv;
      stats.ece *= inv;
      stats.flagged_fraction = static_cast<double>(flagged) * inv;
    }
    if (val) {
      const auto cal = calibrate_corpus(*val, params, cfg.selection_threshold, opts);
      std::vector<ScoredToken> scored(cal.size());
      for (std::size_t i = 0; i < cal.size(); ++i) scored[i] = {cal[i].confidence, *val->tokens[i].y, std::nullopt};
      stats.validation_ece = ece(scored);
      try {
        stats.validation_nce = nce(scored);
      } catch (const ValidationError&) {
      }
    }
    result.report.epochs.push_back(stats);
  }

  const PreparedCorpus& eval = val ? *val : pc;
  const auto cal = calibrate_corpus(eval, params, cfg.selection_threshold, opts);
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < cal.size(); ++i) {
    const bool actual = *eval.tokens[i].o == 1;
    if (cal[i].flagged && actual) ++tp;
    else if (cal[i].flagged) ++fp;
    else if (actual) ++fn;
  }
  auto& rep = result.report;
  rep.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  rep.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  rep.f1 = rep.precision + rep.recall > 0.0 ? 2.0 * rep.precision * rep.recall / (rep.precision + rep.recall) : 0.0;
  return result;
}

}  // namespace selcal
