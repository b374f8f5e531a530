#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "selcal/calibrator.hpp"
#include "selcal/dataset.hpp"
#include "selcal/metrics.hpp"

namespace selcal {

// band,method,ECE,NCE,overconf_mass,n; absent metrics are empty cells.
std::string metrics_csv(std::span<const std::pair<std::string, CalibrationReport>> methods);

// bin_lo,bin_hi,count,mean_conf,accuracy; occupied bins only.
std::string reliability_csv(const ReliabilityBins& bins);

// snr_band,conf_bin,accuracy,count; conf_bin is the 1-based bin index.
// Empty cells are kept with an empty accuracy.
std::string heatmap_csv(const Heatmap& heatmap, std::span<const SnrBand> bands);

// Token-record lines with three extra fields: flagged, temperature and
// calibrated_confidence. The original fields are copied unchanged.
void save_calibrated(std::span<const TokenRecord> records, std::span<const CalibratedToken> calibrated,
                     const std::filesystem::path& path);

// calibrated_confidence per record of `data`, matched on (utt_id, token_index).
std::vector<double> load_calibrated_confidences(const std::filesystem::path& path, const Dataset& data);

}  // namespace selcal
