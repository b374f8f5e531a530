#include "selcal/model.hpp"

#include <cmath>
#include <random>

#include "selcal/error.hpp"
#include "selcal/fileio.hpp"
#include "selcal/rng.hpp"

namespace selcal {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kModelFormat = "selcal-model";

MlpHead zero_head(int hidden, int dim) {
  MlpHead h;
  h.w1 = Matrix::Zero(hidden, dim);
  h.b1 = Vector::Zero(hidden);
  h.w2 = Vector::Zero(hidden);
  h.b2 = 0.0;
  return h;
}

void glorot(Matrix& w, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
  std::uniform_real_distribution<double> u(-a, a);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
}

void glorot(Vector& w, std::mt19937_64& rng) {
  // A vector here is a 1 x n output layer.
  const double a = std::sqrt(6.0 / static_cast<double>(w.size() + 1));
  std::uniform_real_distribution<double> u(-a, a);
  for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = u(rng);
}

template <class Block, class Self>
std::vector<Block> collect_blocks(Self& p) {
  using ParamGroup::Classifier;
  using ParamGroup::Shared;
  using ParamGroup::Temperature;
  auto mat = [](std::string name, ParamGroup g, auto& m) {
    return Block{std::move(name), g, {m.data(), static_cast<std::size_t>(m.size())},
                 static_cast<int>(m.rows()), static_cast<int>(m.cols())};
  };
  auto vec = [](std::string name, ParamGroup g, auto& v) {
    return Block{std::move(name), g, {v.data(), static_cast<std::size_t>(v.size())},
                 static_cast<int>(v.size()), 1};
  };
  auto scalar = [](std::string name, ParamGroup g, auto& x) {
    return Block{std::move(name), g, {&x, 1}, 1, 1};
  };
  return {mat("token_emb", Shared, p.token_emb),
          mat("pool.w_score", Shared, p.pooling.w_score),
          vec("pool.b_score", Shared, p.pooling.b_score),
          vec("pool.v", Shared, p.pooling.v),
          mat("pool.w_proj", Shared, p.pooling.w_proj),
          vec("pool.b_proj", Shared, p.pooling.b_proj),
          mat("classifier.w1", Classifier, p.classifier.w1),
          vec("classifier.b1", Classifier, p.classifier.b1),
          vec("classifier.w2", Classifier, p.classifier.w2),
          scalar("classifier.b2", Classifier, p.classifier.b2),
          mat("temperature.w1", Temperature, p.temperature.w1),
          vec("temperature.b1", Temperature, p.temperature.b1),
          vec("temperature.w2", Temperature, p.temperature.w2),
          scalar("temperature.b2", Temperature, p.temperature.b2)};
}

}  // namespace

ModelParams ModelParams::zeros(const FeatureConfig& cfg, int hidden) {
  cfg.validate();
  if (hidden < 1) throw ValidationError("hidden width must be positive");
  ModelParams p;
  p.config = cfg;
  p.hidden = hidden;
  const int dim = cfg.dimension();
  p.token_emb = Matrix::Zero(kEmbeddingRows, cfg.d_token_emb);
  p.pooling.w_score = Matrix::Zero(cfg.d_acoustic, cfg.n_mel_bins);
  p.pooling.b_score = Vector::Zero(cfg.d_acoustic);
  p.pooling.v = Vector::Zero(cfg.d_acoustic);
  p.pooling.w_proj = Matrix::Zero(cfg.d_acoustic, cfg.n_mel_bins);
  p.pooling.b_proj = Vector::Zero(cfg.d_acoustic);
  p.classifier = zero_head(hidden, dim);
  p.temperature = zero_head(hidden, dim);
  return p;
}

ModelParams ModelParams::initialize(const FeatureConfig& cfg, std::uint64_t seed, int hidden) {
  ModelParams p = zeros(cfg, hidden);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> emb(0.0, 0.02);
  for (Eigen::Index i = 0; i < p.token_emb.size(); ++i) p.token_emb.data()[i] = emb(rng);
  glorot(p.pooling.w_score, rng);
  glorot(p.pooling.v, rng);
  glorot(p.pooling.w_proj, rng);
  glorot(p.classifier.w1, rng);
  glorot(p.classifier.w2, rng);
  glorot(p.temperature.w1, rng);
  glorot(p.temperature.w2, rng);
  return p;
}

std::vector<ParamBlock> ModelParams::blocks() { return collect_blocks<ParamBlock>(*this); }

std::vector<ConstParamBlock> ModelParams::blocks() const {
  return collect_blocks<ConstParamBlock>(*this);
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks()) n += b.values.size();
  return n;
}

void ModelParams::set_zero() {
  for (auto& b : blocks()) std::fill(b.values.begin(), b.values.end(), 0.0);
}

void ModelParams::check_shapes() const {
  const int dim = config.dimension();
  auto expect = [](bool ok, const char* what) {
    if (!ok) throw ValidationError(std::string("model shape mismatch: ") + what);
  };
  expect(token_emb.rows() == kEmbeddingRows && token_emb.cols() == config.d_token_emb, "token_emb");
  expect(pooling.w_score.rows() == config.d_acoustic && pooling.w_score.cols() == config.n_mel_bins,
         "pool.w_score");
  expect(pooling.b_score.size() == config.d_acoustic, "pool.b_score");
  expect(pooling.v.size() == config.d_acoustic, "pool.v");
  expect(pooling.w_proj.rows() == config.d_acoustic && pooling.w_proj.cols() == config.n_mel_bins,
         "pool.w_proj");
  expect(pooling.b_proj.size() == config.d_acoustic, "pool.b_proj");
  for (const MlpHead* h : {&classifier, &temperature}) {
    expect(h->w1.rows() == hidden && h->w1.cols() == dim, "head w1");
    expect(h->b1.size() == hidden, "head b1");
    expect(h->w2.size() == hidden, "head w2");
  }
}

bool ModelParams::all_finite() const {
  for (const auto& b : blocks()) {
    for (double x : b.values) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

int embedding_row(int token_id) {
  return static_cast<int>(splitmix64(static_cast<std::uint64_t>(token_id)) % kEmbeddingRows);
}

std::string_view to_string(TemperatureGranularity g) {
  return g == TemperatureGranularity::Token ? "token" : "utterance";
}

TemperatureGranularity parse_granularity(std::string_view s) {
  if (s == "token") return TemperatureGranularity::Token;
  if (s == "utterance") return TemperatureGranularity::Utterance;
  throw ValidationError("unknown granularity '" + std::string(s) + "'");
}

void save_model(const ModelFile& model, const fs::path& path) {
  model.params.check_shapes();
  json arrays = json::array();
  for (const auto& b : model.params.blocks()) {
    arrays.push_back({{"name", b.name},
                      {"shape", {b.rows, b.cols}},
                      {"data", std::vector<double>(b.values.begin(), b.values.end())}});
  }
  json doc = {{"format", kModelFormat},
              {"version", kModelFormatVersion},
              {"granularity", std::string(to_string(model.granularity))},
              {"feature_config", to_json(model.params.config)},
              {"hidden", model.params.hidden},
              {"embedding_rows", kEmbeddingRows},
              {"arrays", arrays}};
  write_text_atomically(path, doc.dump() + "\n");
}

ModelFile load_model(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": not a model file: " + e.what());
  }
  const std::string where = path.string() + ": ";
  try {
    if (doc.at("format").get<std::string>() != kModelFormat) throw ValidationError(where + "wrong format tag");
    if (doc.at("version").get<int>() != kModelFormatVersion) {
      throw ValidationError(where + "unsupported model version");
    }
    if (doc.at("embedding_rows").get<int>() != kEmbeddingRows) {
      throw ValidationError(where + "embedding_rows mismatch");
    }
    ModelFile model;
    model.granularity = parse_granularity(doc.at("granularity").get<std::string>());
    model.params = ModelParams::zeros(feature_config_from_json(doc.at("feature_config")),
                                      doc.at("hidden").get<int>());
    const json& arrays = doc.at("arrays");
    auto blocks = model.params.blocks();
    if (arrays.size() != blocks.size()) throw ValidationError(where + "array count mismatch");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const json& a = arrays[i];
      const auto name = a.at("name").get<std::string>();
      const auto shape = a.at("shape").get<std::vector<int>>();
      if (name != blocks[i].name || shape.size() != 2 || shape[0] != blocks[i].rows ||
          shape[1] != blocks[i].cols) {
        throw ValidationError(where + "array '" + name + "' does not match the feature config");
      }
      const json& data = a.at("data");
      if (data.size() != blocks[i].values.size()) throw ValidationError(where + "array '" + name + "' size");
      for (std::size_t k = 0; k < data.size(); ++k) blocks[i].values[k] = data[k].get<double>();
    }
    if (!model.params.all_finite()) throw ValidationError(where + "non-finite parameter");
    return model;
  } catch (const json::exception& e) {
    throw ValidationError(where + "malformed model file: " + e.what());
  }
}

}  // namespace selcal
