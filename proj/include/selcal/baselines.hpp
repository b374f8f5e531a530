#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "selcal/calibrator.hpp"
#include "selcal/dataset.hpp"

namespace selcal {

// Fitted temperature per integer SNR level.
struct SnrTemperatureTable {
  std::map<int, double> temperature;
  std::set<int> low_count;  // levels with too few tokens; they keep T = 1
};

inline constexpr std::size_t kMinLevelTokens = 20;

// 1.0, 1.1, ..., 5.0
std::vector<double> default_temperature_grid();

// Nearest integer dB.
int snr_level(double snr_db);

// Per level, the grid temperature minimizing ECE after uniform scaling; ties
// go to the smaller temperature.
SnrTemperatureTable snr_grid_search(const Dataset& data, std::span<const double> grid, int bins = 10);
SnrTemperatureTable snr_grid_search(const Dataset& data);

// Calibrated confidence per record of `data`.
std::vector<double> apply_snr_baseline(const Dataset& data, const SnrTemperatureTable& table);

// "snr_db,T" text table, one level per line.
void save_snr_table(const SnrTemperatureTable& table, const std::filesystem::path& path);
SnrTemperatureTable load_snr_table(const std::filesystem::path& path);

// One temperature per utterance from mean uncertainty statistics plus the
// acoustic embedding; flags come from the frozen token-level `selector`.
TrainResult train_utterance_level(const Dataset& train_data, const Dataset* validation, const ModelParams& init,
                                  const TrainConfig& cfg, const ModelParams& selector);

}  // namespace selcal
