#include "selcal/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <unordered_map>

#include "selcal/error.hpp"
#include "selcal/metrics.hpp"

namespace selcal {

namespace {

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

void record_comparison(FiniteDiffReport& rep, const std::string& name, std::size_t index, double analytic,
                       double numeric) {
  ++rep.compared;
  const double err = relative_error(analytic, numeric);
  if (err > rep.max_relative_error || rep.worst_parameter.empty()) {
    rep.max_relative_error = std::max(err, rep.max_relative_error);
    rep.worst_parameter = name + "[" + std::to_string(index) + "]";
    rep.worst_analytic = analytic;
    rep.worst_numeric = numeric;
  }
}

void record_unreachable(FiniteDiffReport& rep, const std::string& name, std::size_t index, double analytic) {
  ++rep.unreachable;
  if (analytic != 0.0) {
    rep.max_relative_error = std::max(rep.max_relative_error, 1.0);
    rep.worst_parameter = name + "[" + std::to_string(index) + "] (unreachable)";
    rep.worst_analytic = analytic;
    rep.worst_numeric = 0.0;
  }
}

// Piecewise-smooth state of the loss; equal signatures on both sides of a
// perturbation mean the central difference sees one smooth branch.
struct Signature {
  std::vector<char> flags;
  std::vector<char> bce_clamp;
  std::vector<char> conf_state;  // CE clamp or confidence cap
  std::vector<char> gap_sign;    // sign of each soft-ECE bin gap
  bool operator==(const Signature&) const = default;
};

struct Evaluation {
  double loss = 0.0;
  Signature sig;
};

char sign_of(double x) { return x > 0.0 ? 1 : (x < 0.0 ? -1 : 0); }

// Cached forward state of one batch for the incremental evaluator.
class StagedForward {
 public:
  StagedForward(const PreparedCorpus& pc, std::span<const std::size_t> batch, const ModelParams& p,
                const TrainConfig& cfg)
      : pc_(pc), p_(p), cfg_(cfg), batch_(batch.begin(), batch.end()) {
    const FeatureConfig& fc = p.config;
    mel_on_ = fc.enabled(FeatureGroup::Mel);
    emb_on_ = fc.enabled(FeatureGroup::TokenEmbedding);
    mel_off_ = fc.offset(FeatureGroup::Mel);
    emb_off_ = fc.offset(FeatureGroup::TokenEmbedding);
    for (std::size_t b = 0; b < batch_.size(); ++b) {
      const auto& utt = pc.utterances[batch_[b]];
      for (std::size_t i : utt.tokens) {
        tokens_.push_back(i);
        row_utt_.push_back(b);
      }
      if (mel_on_) {
        const Matrix& x = utt.frames;
        Matrix pre = x * p.pooling.w_score.transpose();
        pre.rowwise() += p.pooling.b_score.transpose();
        Matrix act = pre.array().tanh().matrix();
        Vector s = act * p.pooling.v;
        Vector alpha = softmax(s);
        Vector xbar = x.transpose() * alpha;
        Vector e = p.pooling.w_proj * xbar + p.pooling.b_proj;
        pools_.push_back({std::move(pre), std::move(act), std::move(s), std::move(xbar), std::move(e)});
      }
    }
    const std::size_t n = tokens_.size();
    if (n == 0) throw ValidationError("finite_diff_check: empty batch");
    features_.resize(static_cast<Eigen::Index>(n), fc.dimension());
    for (std::size_t r = 0; r < n; ++r) {
      const PreparedToken& t = pc.tokens[tokens_[r]];
      if (!t.y || !t.o) throw ValidationError("finite_diff_check: unlabeled batch");
      y_.push_back(*t.y);
      o_.push_back(*t.o);
      Vector f = static_features(t, fc);
      if (emb_on_) f.segment(emb_off_, fc.d_token_emb) = p.token_emb.row(t.embedding_row).transpose();
      if (mel_on_) f.segment(mel_off_, fc.d_acoustic) = pools_[row_utt_[r]].e;
      features_.row(static_cast<Eigen::Index>(r)) = f.transpose();
      rows_by_emb_[t.embedding_row].push_back(r);
    }
    pre_c_ = head_pre(p.classifier);
    pre_t_ = head_pre(p.temperature);
    zc_ = head_out(pre_c_, p.classifier);
    zt_ = head_out(pre_t_, p.temperature);
    base_ = evaluate(zc_, zt_, true);
    base_conf_ = conf_;
  }

  const Evaluation& base() const { return base_; }
  std::size_t n() const { return tokens_.size(); }
  bool mel_on() const { return mel_on_; }
  bool emb_on() const { return emb_on_; }
  const std::vector<std::size_t>* rows_using(int emb_row) const {
    auto it = rows_by_emb_.find(emb_row);
    return it == rows_by_emb_.end() ? nullptr : &it->second;
  }

  // Loss when the outputs of the two heads are zc / zt. With
  // temperature_changed false the calibrated confidences are reused.
  Evaluation evaluate(const Vector& zc, const Vector& zt, bool temperature_changed) {
    const std::size_t n = tokens_.size();
    Evaluation ev;
    ev.sig.flags.resize(n);
    ev.sig.bce_clamp.resize(n);
    ev.sig.conf_state.assign(n, 0);
    std::vector<double> o_hat(n);
    for (std::size_t r = 0; r < n; ++r) {
      o_hat[r] = sigmoid(zc[static_cast<Eigen::Index>(r)]);
      ev.sig.flags[r] = o_hat[r] >= cfg_.selection_threshold;
      ev.sig.bce_clamp[r] = o_hat[r] < kProbabilityClamp || o_hat[r] > 1.0 - kProbabilityClamp;
    }
    if (!base_.sig.flags.empty() && ev.sig.flags != base_.sig.flags) return ev;  // selection changed
    conf_.resize(n);
    std::vector<double> sel_conf;
    std::vector<int> sel_y;
    for (std::size_t r = 0; r < n; ++r) {
      const TokenRecord& rec = *pc_.tokens[tokens_[r]].record;
      if (!ev.sig.flags[r]) {
        conf_[r] = rec.confidence;
        continue;
      }
      if (temperature_changed || base_conf_.empty()) {
        const double t = 1.0 + softplus(zt[static_cast<Eigen::Index>(r)]);
        const double raw = scaled_confidence(rec, t);
        conf_[r] = std::min(raw, rec.confidence);
        ev.sig.conf_state[r] = raw > rec.confidence ? 2 : 0;
      } else {
        conf_[r] = base_conf_[r];
        ev.sig.conf_state[r] = base_.sig.conf_state[r];
      }
      if (conf_[r] < kProbabilityClamp || conf_[r] > 1.0 - kProbabilityClamp) ev.sig.conf_state[r] |= 1;
      sel_conf.push_back(conf_[r]);
      sel_y.push_back(y_[r]);
    }
    ev.sig.gap_sign = gap_signs(conf_);
    ev.loss = cfg_.lambda_bce * loss_weighted_bce(o_hat, o_, cfg_.w_pos) +
              cfg_.lambda_ce * loss_selective_ce(sel_conf, sel_y) +
              cfg_.lambda_ece * loss_soft_ece(conf_, y_, cfg_.soft_bins, cfg_.soft_bin_tau);
    return ev;
  }

  // --- head perturbations -------------------------------------------------
  // Output of a head when hidden unit j's pre-activation of every token shifts
  // by delta * input_r. Returns false when a ReLU changes state.
  bool shift_unit(const Matrix& pre, const MlpHead& h, const Vector& z, int j, double delta,
                  const std::function<double(std::size_t)>& input, Vector& z_out) const {
    z_out = z;
    for (std::size_t r = 0; r < tokens_.size(); ++r) {
      const auto row = static_cast<Eigen::Index>(r);
      const double before = pre(row, j);
      const double after = before + delta * input(r);
      if ((before > 0.0) != (after > 0.0)) return false;
      z_out[row] += h.w2[j] * (std::max(after, 0.0) - std::max(before, 0.0));
    }
    return true;
  }

  // Head outputs after adding d_pre (hidden) to the pre-activations of `rows`.
  bool shift_rows(const Matrix& pre, const MlpHead& h, const Vector& z, const std::vector<std::size_t>& rows,
                  const std::function<Vector(std::size_t)>& d_pre, Vector& z_out) const {
    z_out = z;
    for (std::size_t r : rows) {
      const auto row = static_cast<Eigen::Index>(r);
      const Vector after = pre.row(row).transpose() + d_pre(r);
      for (Eigen::Index j = 0; j < after.size(); ++j) {
        if ((pre(row, j) > 0.0) != (after[j] > 0.0)) return false;
      }
      z_out[row] = h.w2.dot(after.cwiseMax(0.0)) + h.b2;
    }
    return true;
  }

  const Matrix& pre_c() const { return pre_c_; }
  const Matrix& pre_t() const { return pre_t_; }
  const Vector& zc() const { return zc_; }
  const Vector& zt() const { return zt_; }
  const Matrix& features() const { return features_; }

  // --- pooling perturbations ----------------------------------------------
  struct PoolState {
    Matrix pre, act;
    Vector s, xbar, e;
  };
  const std::vector<PoolState>& pools() const { return pools_; }
  std::size_t utterance_count() const { return batch_.size(); }
  const Matrix& frames(std::size_t b) const { return pc_.utterances[batch_[b]].frames; }

  // Loss change propagated from per-utterance acoustic embedding shifts.
  bool apply_embedding_shift(const std::vector<Vector>& de, Vector& zc, Vector& zt) const {
    const MlpHead& c = p_.classifier;
    const MlpHead& t = p_.temperature;
    const int d = p_.config.d_acoustic;
    std::vector<Vector> dc(de.size()), dt(de.size());
    for (std::size_t b = 0; b < de.size(); ++b) {
      dc[b] = c.w1.middleCols(mel_off_, d) * de[b];
      dt[b] = t.w1.middleCols(mel_off_, d) * de[b];
    }
    std::vector<std::size_t> all(tokens_.size());
    for (std::size_t r = 0; r < all.size(); ++r) all[r] = r;
    return shift_rows(pre_c_, c, zc_, all, [&](std::size_t r) { return dc[row_utt_[r]]; }, zc) &&
           shift_rows(pre_t_, t, zt_, all, [&](std::size_t r) { return dt[row_utt_[r]]; }, zt);
  }

  static Vector softmax(Vector s) {
    s.array() -= s.maxCoeff();
    s = s.array().exp().matrix();
    return s / s.sum();
  }

 private:
  Matrix head_pre(const MlpHead& h) const {
    Matrix pre = features_ * h.w1.transpose();
    pre.rowwise() += h.b1.transpose();
    return pre;
  }
  static Vector head_out(const Matrix& pre, const MlpHead& h) {
    Vector z = pre.cwiseMax(0.0) * h.w2;
    z.array() += h.b2;
    return z;
  }

  std::vector<char> gap_signs(const std::vector<double>& c) const {
    const int m = cfg_.soft_bins;
    std::vector<double> gap(m, 0.0), u(m);
    for (std::size_t i = 0; i < c.size(); ++i) {
      double amax = -std::numeric_limits<double>::infinity();
      for (int b = 0; b < m; ++b) {
        const double mu = (b + 0.5) / m;
        u[b] = -(c[i] - mu) * (c[i] - mu) / cfg_.soft_bin_tau;
        amax = std::max(amax, u[b]);
      }
      double z = 0.0;
      for (int b = 0; b < m; ++b) z += (u[b] = std::exp(u[b] - amax));
      for (int b = 0; b < m; ++b) gap[b] += u[b] / z * (y_[i] - c[i]);
    }
    std::vector<char> s(m);
    for (int b = 0; b < m; ++b) s[b] = sign_of(gap[b]);
    return s;
  }

  const PreparedCorpus& pc_;
  const ModelParams& p_;
  const TrainConfig& cfg_;
  std::vector<std::size_t> batch_;
  bool mel_on_ = false, emb_on_ = false;
  int mel_off_ = 0, emb_off_ = 0;
  std::vector<std::size_t> tokens_, row_utt_;
  std::vector<int> y_, o_;
  std::vector<PoolState> pools_;
  Matrix features_, pre_c_, pre_t_;
  Vector zc_, zt_;
  std::unordered_map<int, std::vector<std::size_t>> rows_by_emb_;
  Evaluation base_;
  std::vector<double> conf_, base_conf_;
};

}  // namespace

FiniteDiffReport finite_diff_check(const PreparedCorpus& pc, std::span<const std::size_t> batch,
                                   const ModelParams& params, const TrainConfig& cfg, double eps) {
  if (!(eps > 0.0)) throw ValidationError("epsilon must be positive");
  ModelParams grad = ModelParams::zeros(params.config, params.hidden);
  total_loss(pc, batch, params, cfg, {}, &grad);
  StagedForward sf(pc, batch, params, cfg);
  FiniteDiffReport rep;
  const Signature& base_sig = sf.base().sig;

  auto probe = [&](const std::string& name, std::size_t index, double analytic, bool temperature_changed,
                   const std::function<bool(double, Vector&, Vector&)>& perturb) {
    double loss[2];
    for (int k = 0; k < 2; ++k) {
      Vector zc, zt;
      if (!perturb(k == 0 ? 1.0 : -1.0, zc, zt)) {
        ++rep.skipped_kinks;
        return;
      }
      const Evaluation ev = sf.evaluate(zc, zt, temperature_changed);
      if (!(ev.sig == base_sig)) {
        ++rep.skipped_kinks;
        return;
      }
      loss[k] = ev.loss;
    }
    record_comparison(rep, name, index, analytic, (loss[0] - loss[1]) / (2.0 * eps));
  };

  const FeatureConfig& fc = params.config;
  const int dim = fc.dimension();
  const std::size_t n = sf.n();

  // Heads.
  for (int which = 0; which < 2; ++which) {
    const bool temp = which == 1;
    const MlpHead& h = temp ? params.temperature : params.classifier;
    const MlpHead& g = temp ? grad.temperature : grad.classifier;
    const Matrix& pre = temp ? sf.pre_t() : sf.pre_c();
    const Vector& z = temp ? sf.zt() : sf.zc();
    const std::string prefix = temp ? "temperature." : "classifier.";
    auto assign = [&](Vector& moved, Vector& zc, Vector& zt) {
      zc = temp ? sf.zc() : moved;
      zt = temp ? moved : sf.zt();
    };
    for (int j = 0; j < params.hidden; ++j) {
      for (int k = 0; k < dim; ++k) {
        probe(prefix + "w1", static_cast<std::size_t>(j) * dim + k, g.w1(j, k), temp,
              [&](double s, Vector& zc, Vector& zt) {
                Vector moved;
                if (!sf.shift_unit(pre, h, z, j, s * eps,
                                   [&](std::size_t r) { return sf.features()(static_cast<Eigen::Index>(r), k); },
                                   moved)) {
                  return false;
                }
                assign(moved, zc, zt);
                return true;
              });
      }
      probe(prefix + "b1", j, g.b1[j], temp, [&](double s, Vector& zc, Vector& zt) {
        Vector moved;
        if (!sf.shift_unit(pre, h, z, j, s * eps, [](std::size_t) { return 1.0; }, moved)) return false;
        assign(moved, zc, zt);
        return true;
      });
      probe(prefix + "w2", j, g.w2[j], temp, [&](double s, Vector& zc, Vector& zt) {
        Vector moved = z;
        for (std::size_t r = 0; r < n; ++r) {
          moved[static_cast<Eigen::Index>(r)] += s * eps * std::max(pre(static_cast<Eigen::Index>(r), j), 0.0);
        }
        assign(moved, zc, zt);
        return true;
      });
    }
    probe(prefix + "b2", 0, g.b2, temp, [&](double s, Vector& zc, Vector& zt) {
      Vector moved = z;
      moved.array() += s * eps;
      assign(moved, zc, zt);
      return true;
    });
  }

  // Token embedding.
  const int emb_off = fc.offset(FeatureGroup::TokenEmbedding);
  for (int row = 0; row < kEmbeddingRows; ++row) {
    const auto* rows = sf.emb_on() ? sf.rows_using(row) : nullptr;
    for (int k = 0; k < fc.d_token_emb; ++k) {
      const std::size_t index = static_cast<std::size_t>(row) * fc.d_token_emb + k;
      if (rows == nullptr) {
        record_unreachable(rep, "token_emb", index, grad.token_emb(row, k));
        continue;
      }
      probe("token_emb", index, grad.token_emb(row, k), true, [&](double s, Vector& zc, Vector& zt) {
        const Vector dc = s * eps * params.classifier.w1.col(emb_off + k);
        const Vector dt = s * eps * params.temperature.w1.col(emb_off + k);
        return sf.shift_rows(sf.pre_c(), params.classifier, sf.zc(), *rows, [&](std::size_t) { return dc; }, zc) &&
               sf.shift_rows(sf.pre_t(), params.temperature, sf.zt(), *rows, [&](std::size_t) { return dt; }, zt);
      });
    }
  }

  // Attention pooling.
  const PoolingParams& pp = params.pooling;
  const PoolingParams& pg = grad.pooling;
  const int d = fc.d_acoustic;
  const int bins = fc.n_mel_bins;
  const std::size_t nu = sf.utterance_count();
  if (!sf.mel_on()) {
    auto unreachable = [&](const std::string& name, const auto& g) {
      for (Eigen::Index i = 0; i < g.size(); ++i) record_unreachable(rep, name, i, g.data()[i]);
    };
    unreachable("pool.w_score", pg.w_score);
    unreachable("pool.b_score", pg.b_score);
    unreachable("pool.v", pg.v);
    unreachable("pool.w_proj", pg.w_proj);
    unreachable("pool.b_proj", pg.b_proj);
    return rep;
  }
  // Embedding shift of every utterance when the attention scores move.
  auto rescore = [&](const std::function<Vector(std::size_t)>& new_scores, std::vector<Vector>& de) {
    de.resize(nu);
    for (std::size_t b = 0; b < nu; ++b) {
      const auto& ps = sf.pools()[b];
      const Vector alpha = StagedForward::softmax(new_scores(b));
      const Vector dxbar = sf.frames(b).transpose() * alpha - ps.xbar;
      de[b] = pp.w_proj * dxbar;
    }
  };
  for (int j = 0; j < d; ++j) {
    for (int k = 0; k < bins; ++k) {
      probe("pool.w_score", static_cast<std::size_t>(j) * bins + k, pg.w_score(j, k), true,
            [&](double s, Vector& zc, Vector& zt) {
              std::vector<Vector> de;
              rescore(
                  [&](std::size_t b) {
                    const auto& ps = sf.pools()[b];
                    const Vector moved = (ps.pre.col(j) + s * eps * sf.frames(b).col(k)).array().tanh().matrix();
                    return Vector(ps.s + pp.v[j] * (moved - ps.act.col(j)));
                  },
                  de);
              return sf.apply_embedding_shift(de, zc, zt);
            });
    }
    probe("pool.b_score", j, pg.b_score[j], true, [&](double s, Vector& zc, Vector& zt) {
      std::vector<Vector> de;
      rescore(
          [&](std::size_t b) {
            const auto& ps = sf.pools()[b];
            const Vector moved = (ps.pre.col(j).array() + s * eps).tanh().matrix();
            return Vector(ps.s + pp.v[j] * (moved - ps.act.col(j)));
          },
          de);
      return sf.apply_embedding_shift(de, zc, zt);
    });
    probe("pool.v", j, pg.v[j], true, [&](double s, Vector& zc, Vector& zt) {
      std::vector<Vector> de;
      rescore([&](std::size_t b) { return Vector(sf.pools()[b].s + s * eps * sf.pools()[b].act.col(j)); }, de);
      return sf.apply_embedding_shift(de, zc, zt);
    });
    for (int k = 0; k < bins; ++k) {
      probe("pool.w_proj", static_cast<std::size_t>(j) * bins + k, pg.w_proj(j, k), true,
            [&](double s, Vector& zc, Vector& zt) {
              std::vector<Vector> de(nu, Vector::Zero(d));
              for (std::size_t b = 0; b < nu; ++b) de[b][j] = s * eps * sf.pools()[b].xbar[k];
              return sf.apply_embedding_shift(de, zc, zt);
            });
    }
    probe("pool.b_proj", j, pg.b_proj[j], true, [&](double s, Vector& zc, Vector& zt) {
      std::vector<Vector> de(nu, Vector::Zero(d));
      for (std::size_t b = 0; b < nu; ++b) de[b][j] = s * eps;
      return sf.apply_embedding_shift(de, zc, zt);
    });
  }
  return rep;
}

FiniteDiffReport finite_diff_check_sampled(const PreparedCorpus& pc, std::span<const std::size_t> batch,
                                           const ModelParams& params, const TrainConfig& cfg, const LossOptions& opts,
                                           double eps, std::size_t per_block, std::uint64_t seed) {
  if (!(eps > 0.0)) throw ValidationError("epsilon must be positive");
  ModelParams grad = ModelParams::zeros(params.config, params.hidden);
  const double base = total_loss(pc, batch, params, cfg, opts, &grad).total;
  ModelParams work = params;
  auto wb = work.blocks();
  const auto gb = std::as_const(grad).blocks();
  std::mt19937_64 rng(seed);
  FiniteDiffReport rep;
  for (std::size_t b = 0; b < wb.size(); ++b) {
    const std::size_t size = wb[b].values.size();
    std::vector<std::size_t> idx(size);
    for (std::size_t i = 0; i < size; ++i) idx[i] = i;
    if (size > per_block) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(per_block);
    }
    for (std::size_t i : idx) {
      double& x = wb[b].values[i];
      const double saved = x;
      x = saved + eps;
      const double up = total_loss(pc, batch, work, cfg, opts).total;
      x = saved - eps;
      const double down = total_loss(pc, batch, work, cfg, opts).total;
      x = saved;
      const double fwd = (up - base) / eps;
      const double bwd = (base - down) / eps;
      if (std::abs(fwd - bwd) > 0.1 * std::max({std::abs(fwd), std::abs(bwd), 1e-6})) {
        ++rep.skipped_kinks;
        continue;
      }
      record_comparison(rep, wb[b].name, i, gb[b].values[i], (up - down) / (2.0 * eps));
    }
  }
  return rep;
}

}  // namespace selcal
