#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "selcal/features.hpp"
#include "selcal/linalg.hpp"

namespace selcal {

inline constexpr int kEmbeddingRows = 4096;
inline constexpr int kHiddenWidth = 128;

struct PoolingParams {
  Matrix w_score;  // d_acoustic x n_mel
  Vector b_score;  // d_acoustic
  Vector v;        // d_acoustic
  Matrix w_proj;   // d_acoustic x n_mel
  Vector b_proj;   // d_acoustic
};

// relu(W1 f + b1) -> w2 . h + b2
struct MlpHead {
  Matrix w1;  // hidden x feature dimension
  Vector b1;
  Vector w2;
  double b2 = 0.0;
};

enum class ParamGroup { Shared, Classifier, Temperature };

struct ParamBlock {
  std::string name;
  ParamGroup group;
  std::span<double> values;
  int rows = 0;
  int cols = 0;
};

struct ConstParamBlock {
  std::string name;
  ParamGroup group;
  std::span<const double> values;
  int rows = 0;
  int cols = 0;
};

// Every learnable array of the model. Also used as the gradient container.
struct ModelParams {
  FeatureConfig config;
  int hidden = kHiddenWidth;
  Matrix token_emb;  // kEmbeddingRows x d_token_emb
  PoolingParams pooling;
  MlpHead classifier;
  MlpHead temperature;

  static ModelParams zeros(const FeatureConfig& cfg, int hidden = kHiddenWidth);
  // Glorot-uniform weights, zero biases, embedding rows ~ N(0, 0.02^2).
  static ModelParams initialize(const FeatureConfig& cfg, std::uint64_t seed,
                                int hidden = kHiddenWidth);

  std::vector<ParamBlock> blocks();
  std::vector<ConstParamBlock> blocks() const;
  std::size_t parameter_count() const;
  void set_zero();
  void check_shapes() const;
  bool all_finite() const;
};

// Hash-folds a vocabulary id into the embedding table.
int embedding_row(int token_id);

inline constexpr int kModelFormatVersion = 1;

enum class TemperatureGranularity { Token, Utterance };

std::string_view to_string(TemperatureGranularity g);
TemperatureGranularity parse_granularity(std::string_view s);

struct ModelFile {
  ModelParams params;
  TemperatureGranularity granularity = TemperatureGranularity::Token;
};

void save_model(const ModelFile& model, const std::filesystem::path& path);
ModelFile load_model(const std::filesystem::path& path);

}  // namespace selcal
