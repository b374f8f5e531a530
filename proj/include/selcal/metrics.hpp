#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace selcal {

inline constexpr double kProbabilityClamp = 1e-7;

struct ScoredToken {
  double confidence = 0.0;
  int y = 0;
  std::optional<double> snr_db;
};

// Bin m (0-based) covers [m/M, (m+1)/M); the last bin also holds 1.0.
struct ReliabilityBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  std::optional<double> mean_confidence;  // absent when count == 0
  std::optional<double> accuracy;
};

struct ReliabilityBins {
  int m = 0;
  std::vector<ReliabilityBin> bins;
};

int confidence_bin(double confidence, int m);

ReliabilityBins reliability_bins(std::span<const ScoredToken> tokens, int m = 10);
double ece(std::span<const ScoredToken> tokens, int m = 10);
// Normalized cross entropy; throws when all tokens share one label.
double nce(std::span<const ScoredToken> tokens);
// Mean per-token binary negative log-likelihood.
double nll(std::span<const ScoredToken> tokens);
double eer(std::span<const ScoredToken> tokens);
double overconfidence_mass(std::span<const ScoredToken> tokens, double threshold = 0.7);

// An SNR interval with explicit endpoint closure, e.g. "(5,10]" or "[-18,-15]".
struct SnrBand {
  double lo = 0.0;
  double hi = 0.0;
  bool lo_closed = true;
  bool hi_closed = true;

  bool contains(double snr) const;
  std::string label() const;
  static SnrBand parse(const std::string& text);
};

std::vector<SnrBand> default_snr_bands();

inline constexpr std::size_t kMinBandTokens = 50;

struct BandMetrics {
  SnrBand band;
  std::size_t count = 0;
  std::optional<double> ece;
  std::optional<double> nce;
  std::optional<double> overconfidence_mass;
  bool low_count = false;  // fewer than kMinBandTokens tokens
};

struct CalibrationReport {
  std::vector<BandMetrics> bands;
};

CalibrationReport snr_stratified_report(std::span<const ScoredToken> tokens,
                                        std::span<const SnrBand> bands, int m = 10);

struct HeatmapCell {
  std::size_t count = 0;
  std::optional<double> accuracy;
};

// rows: bands, columns: confidence bins
using Heatmap = std::vector<std::vector<HeatmapCell>>;

Heatmap confidence_accuracy_heatmap(std::span<const ScoredToken> tokens, int m,
                                    std::span<const SnrBand> bands);

}  // namespace selcal
