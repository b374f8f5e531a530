#include "selcal/config.hpp"

#include <set>

#include "selcal/error.hpp"
#include "selcal/fileio.hpp"

namespace selcal {

using nlohmann::json;

void RunConfig::validate() const {
  train.validate();
  features.validate();
  if (!(snr_lo <= snr_hi)) throw ValidationError("snr_lo must not exceed snr_hi");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ValidationError("validation_fraction must be in [0,1)");
  }
  if (granularity == TemperatureGranularity::Utterance && selector.empty()) {
    throw ValidationError("utterance granularity needs a selector model");
  }
}

json to_json(const RunConfig& c) {
  json j = to_json(c.train);
  const json features = to_json(c.features);
  for (const auto& [k, v] : features.items()) j[k] = v;
  j["corpus"] = c.corpus;
  j["out"] = c.out;
  j["selector"] = c.selector;
  j["granularity"] = std::string(to_string(c.granularity));
  j["snr_lo"] = c.snr_lo;
  j["snr_hi"] = c.snr_hi;
  j["validation_fraction"] = c.validation_fraction;
  j["init_seed"] = c.init_seed;
  return j;
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
  if (!j.is_object()) throw ValidationError("run config must be an object");
  static const std::set<std::string> train_keys = [] {
    std::set<std::string> keys;
    const json defaults = to_json(TrainConfig{});
    for (const auto& [k, v] : defaults.items()) keys.insert(k);
    return keys;
  }();
  static const std::set<std::string> feature_keys = [] {
    std::set<std::string> keys;
    const json defaults = to_json(FeatureConfig{});
    for (const auto& [k, v] : defaults.items()) keys.insert(k);
    return keys;
  }();
  json train_part = to_json(c.train);
  json feature_part = to_json(c.features);
  for (const auto& [key, v] : j.items()) {
    try {
      if (train_keys.contains(key)) train_part[key] = v;
      else if (feature_keys.contains(key)) feature_part[key] = v;
      else if (key == "corpus") c.corpus = v.get<std::string>();
      else if (key == "out") c.out = v.get<std::string>();
      else if (key == "selector") c.selector = v.get<std::string>();
      else if (key == "granularity") c.granularity = parse_granularity(v.get<std::string>());
      else if (key == "snr_lo") c.snr_lo = v.get<double>();
      else if (key == "snr_hi") c.snr_hi = v.get<double>();
      else if (key == "validation_fraction") c.validation_fraction = v.get<double>();
      else if (key == "init_seed") c.init_seed = v.get<std::uint64_t>();
      else throw ValidationError("unknown config key '" + key + "'");
    } catch (const json::exception&) {
      throw ValidationError("config key '" + key + "' has wrong type");
    }
  }
  c.train = train_config_from_json(train_part);
  c.features = feature_config_from_json(feature_part);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  cfg = run_config_from_json(json{{key, value}}, cfg);
}

}  // namespace selcal
