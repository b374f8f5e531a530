#include "selcal/report_io.hpp"

#include <map>
#include <sstream>

#include "selcal/error.hpp"
#include "selcal/fileio.hpp"

namespace selcal {

using nlohmann::json;

namespace {

std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

// Band labels contain commas.
std::string quoted(const std::string& s) { return "\"" + s + "\""; }

}  // namespace

std::string metrics_csv(std::span<const std::pair<std::string, CalibrationReport>> methods) {
  std::ostringstream out;
  out << "band,method,ECE,NCE,overconf_mass,n\n";
  for (const auto& [method, report] : methods) {
    for (const auto& b : report.bands) {
      out << quoted(b.band.label()) << ',' << method << ',' << cell(b.ece) << ',' << cell(b.nce) << ','
          << cell(b.overconfidence_mass) << ',' << b.count << '\n';
    }
  }
  return out.str();
}

std::string reliability_csv(const ReliabilityBins& bins) {
  std::ostringstream out;
  out << "bin_lo,bin_hi,count,mean_conf,accuracy\n";
  for (const auto& b : bins.bins) {
    if (b.count == 0) continue;
    out << format_double(b.lo) << ',' << format_double(b.hi) << ',' << b.count << ',' << cell(b.mean_confidence)
        << ',' << cell(b.accuracy) << '\n';
  }
  return out.str();
}

std::string heatmap_csv(const Heatmap& heatmap, std::span<const SnrBand> bands) {
  if (heatmap.size() != bands.size()) throw ValidationError("heatmap rows do not match bands");
  std::ostringstream out;
  out << "snr_band,conf_bin,accuracy,count\n";
  for (std::size_t b = 0; b < bands.size(); ++b) {
    for (std::size_t m = 0; m < heatmap[b].size(); ++m) {
      out << quoted(bands[b].label()) << ',' << (m + 1) << ',' << cell(heatmap[b][m].accuracy) << ','
          << heatmap[b][m].count << '\n';
    }
  }
  return out.str();
}

void save_calibrated(std::span<const TokenRecord> records, std::span<const CalibratedToken> calibrated,
                     const std::filesystem::path& path) {
  if (records.size() != calibrated.size()) throw ValidationError("calibrated count != record count");
  write_atomically(path, [&](std::ostream& out) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      json j = to_json(records[i]);
      j["flagged"] = calibrated[i].flagged;
      j["temperature"] = calibrated[i].temperature;
      j["calibrated_confidence"] = calibrated[i].confidence;
      out << j.dump() << '\n';
    }
  });
}

std::vector<double> load_calibrated_confidences(const std::filesystem::path& path, const Dataset& data) {
  std::map<std::pair<std::string, int>, std::size_t> index;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    index[{data.records[i].utt_id, data.records[i].token_index}] = i;
  }
  std::vector<double> conf(data.records.size());
  std::vector<char> seen(data.records.size(), 0);
  std::istringstream in(read_text_file(path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.string() + ": line " + std::to_string(line_no) + ": ";
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ValidationError(where + "not a JSON object");
    try {
      const auto key = std::make_pair(j.at("utt_id").get<std::string>(), j.at("token_index").get<int>());
      const auto it = index.find(key);
      if (it == index.end()) throw ValidationError(where + "record not in corpus");
      const double c = j.at("calibrated_confidence").get<double>();
      if (!(c > 0.0 && c <= 1.0)) throw ValidationError(where + "calibrated_confidence out of range");
      conf[it->second] = c;
      seen[it->second] = 1;
    } catch (const json::exception&) {
      throw ValidationError(where + "missing utt_id, token_index or calibrated_confidence");
    }
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) {
      throw ValidationError(path.string() + ": no calibrated value for " + data.records[i].utt_id + "#" +
                            std::to_string(data.records[i].token_index));
    }
  }
  return conf;
}

}  // namespace selcal
