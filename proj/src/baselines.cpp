#include "selcal/baselines.hpp"

#include <cmath>
#include <sstream>

#include "selcal/error.hpp"
#include "selcal/fileio.hpp"
#include "selcal/metrics.hpp"

namespace selcal {

std::vector<double> default_temperature_grid() {
  std::vector<double> grid;
  for (int i = 10; i <= 50; ++i) grid.push_back(i / 10.0);
  return grid;
}

int snr_level(double snr_db) { return static_cast<int>(std::lround(snr_db)); }

namespace {

double scaled_or_stored(const TokenRecord& r, double t) {
  return t == 1.0 ? r.confidence : capped_scaled_confidence(r, t).value;
}

}  // namespace

SnrTemperatureTable snr_grid_search(const Dataset& data, std::span<const double> grid, int bins) {
  if (grid.empty()) throw ValidationError("snr_grid_search: empty temperature grid");
  for (double t : grid) {
    if (!(t >= 1.0)) throw ValidationError("snr_grid_search: grid temperatures must be >= 1");
  }
  std::map<int, std::vector<std::size_t>> levels;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const auto& snr = data.utterances[data.utterance_of(i)].snr_db;
    if (!snr) throw ValidationError("snr_grid_search: utterance without snr_db");
    if (!data.records[i].y) throw ValidationError("snr_grid_search: record without y");
    levels[snr_level(*snr)].push_back(i);
  }
  SnrTemperatureTable table;
  std::vector<ScoredToken> scored;
  for (const auto& [level, idx] : levels) {
    if (idx.size() < kMinLevelTokens) {
      table.temperature[level] = 1.0;
      table.low_count.insert(level);
      continue;
    }
    double best_t = grid.front();
    double best = std::numeric_limits<double>::infinity();
    for (double t : grid) {
      scored.clear();
      for (std::size_t i : idx) scored.push_back({scaled_or_stored(data.records[i], t), *data.records[i].y, {}});
      const double e = ece(scored, bins);
      if (e < best || (e == best && t < best_t)) {
        best = e;
        best_t = t;
      }
    }
    table.temperature[level] = best_t;
  }
  return table;
}

SnrTemperatureTable snr_grid_search(const Dataset& data) {
  const auto grid = default_temperature_grid();
  return snr_grid_search(data, grid);
}

std::vector<double> apply_snr_baseline(const Dataset& data, const SnrTemperatureTable& table) {
  std::vector<double> out(data.records.size());
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const auto& snr = data.utterances[data.utterance_of(i)].snr_db;
    if (!snr) throw ValidationError("apply_snr_baseline: utterance without snr_db");
    const auto it = table.temperature.find(snr_level(*snr));
    if (it == table.temperature.end()) {
      throw ValidationError("apply_snr_baseline: no temperature for SNR level " + std::to_string(snr_level(*snr)) +
                            " dB");
    }
    out[i] = scaled_or_stored(data.records[i], it->second);
  }
  return out;
}

void save_snr_table(const SnrTemperatureTable& table, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "snr_db,T\n";
  for (const auto& [level, t] : table.temperature) out << level << ',' << format_double(t) << '\n';
  write_text_atomically(path, out.str());
}

SnrTemperatureTable load_snr_table(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  SnrTemperatureTable table;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || (line_no == 1 && line.rfind("snr_db", 0) == 0)) continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("missing comma");
      const int level = std::stoi(line.substr(0, comma));
      const double t = std::stod(line.substr(comma + 1));
      if (!(t >= 1.0)) throw ValidationError(path.string() + ": line " + std::to_string(line_no) + ": T must be >= 1");
      table.temperature[level] = t;
    } catch (const std::logic_error&) {
      throw ValidationError(path.string() + ": line " + std::to_string(line_no) + ": expected 'snr_db,T'");
    }
  }
  return table;
}

TrainResult train_utterance_level(const Dataset& train_data, const Dataset* validation, const ModelParams& init,
                                  const TrainConfig& cfg, const ModelParams& selector) {
  TrainOptions opts;
  opts.granularity = TemperatureGranularity::Utterance;
  opts.selector = &selector;
  return train(train_data, validation, init, cfg, opts);
}

}  // namespace selcal
