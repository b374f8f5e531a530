#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "selcal/calibrator.hpp"
#include "selcal/features.hpp"

namespace selcal {

// Everything a training run needs, as one flat document. Keys are the
// TrainConfig and FeatureConfig field names plus the run keys below.
struct RunConfig {
  TrainConfig train;
  FeatureConfig features;
  std::string corpus;    // path to corpus.json
  std::string out;       // model output path
  std::string selector;  // frozen token-level model, utterance granularity only
  TemperatureGranularity granularity = TemperatureGranularity::Token;
  double snr_lo = -18.0;
  double snr_hi = -5.0;
  double validation_fraction = 0.1;
  std::uint64_t init_seed = 7;

  void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
// Applies the keys of `j` on top of `base`; unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path);

// Applies one "key=value" override. The value is parsed as JSON when
// possible and taken as a string otherwise.
void apply_override(RunConfig& cfg, const std::string& assignment);

}  // namespace selcal
