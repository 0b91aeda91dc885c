#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "neuroenc/common.hpp"

namespace neuroenc {

/// Round-trip decimal formatting; identical inputs yield identical text,
/// which the byte-identical-output contract relies on.
inline std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

struct CsvStamp {
  std::string config_hash;
  std::uint64_t seed = 0;
};

/// CSV with an optional leading stamp comment tying the artifact to the
/// producing configuration.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const CsvStamp* stamp = nullptr) {
    const auto dir = path.parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);
    os_.open(path);
    if (!os_) throw IoError("cannot open CSV for writing: " + path.string());
    if (stamp)
      os_ << "# config_hash=" << stamp->config_hash << " seed=" << stamp->seed
          << "\n";
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) os_ << ",";
      os_ << cells[i];
    }
    os_ << "\n";
  }

 private:
  std::ofstream os_;
};

struct CsvTable {
  CsvStamp stamp;
  bool has_stamp = false;
  std::vector<std::vector<std::string>> rows;  // header included as rows[0]
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open CSV for reading: " + path.string());
  CsvTable t;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto hpos = line.find("config_hash=");
      auto spos = line.find("seed=");
      if (hpos != std::string::npos) {
        auto end = line.find(' ', hpos);
        t.stamp.config_hash = line.substr(hpos + 12, end - (hpos + 12));
        t.has_stamp = true;
      }
      if (spos != std::string::npos)
        t.stamp.seed = std::stoull(line.substr(spos + 5));
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    t.rows.push_back(std::move(cells));
  }
  return t;
}

}  // namespace neuroenc
