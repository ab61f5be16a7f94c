#pragma once

#include <charconv>
#include <cstddef>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "villa/array.hpp"

namespace villa {

class IoError : public Error {
 public:
  using Error::Error;
};

/// One row of the metrics log. Rows are ordered by (stage, epoch, step);
/// evaluation rows take the step ids following the epoch's last train step.
struct MetricsRecord {
  std::string stage;  // pretrain | finetune
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::string split;  // train | val | train_eval
  std::string task;   // mlm | itm | answer
  double l_std = 0.0;
  double r_at = 0.0;
  double r_kl = 0.0;
  double total = 0.0;
  double accuracy = 0.0;
  double delta_norm_img = 0.0;
  double delta_norm_txt = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

inline constexpr std::string_view kMetricsHeader =
    "stage,epoch,step,split,task,l_std,r_at,r_kl,total,accuracy,delta_norm_img,delta_norm_txt,grad_norm,wall_ms";

/// 17 significant digits: enough to round-trip any float64.
inline std::string format_double(double v) {
  char buf[40];
  const int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf, static_cast<std::size_t>(n));
}

inline std::string to_csv(const std::vector<MetricsRecord>& records) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const MetricsRecord& r : records) {
    out += r.stage + ',' + std::to_string(r.epoch) + ',' + std::to_string(r.step) + ',' + r.split + ',' + r.task;
    for (double v : {r.l_std, r.r_at, r.r_kl, r.total, r.accuracy, r.delta_norm_img, r.delta_norm_txt, r.grad_norm,
                     r.wall_ms}) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

/// Writes to a temporary sibling and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  const std::filesystem::path parent = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  if (!std::filesystem::is_directory(parent)) throw IoError("missing directory " + parent.string());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename to " + path.string() + " failed: " + ec.message());
}

inline void write_metrics(const std::vector<MetricsRecord>& records, const std::filesystem::path& path) {
  write_file_atomic(path, to_csv(records));
}

inline std::vector<MetricsRecord> parse_metrics(std::string_view text) {
  std::vector<MetricsRecord> out;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw IoError("metrics: bad header");
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = line.find(',', start);
      f.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (f.size() != 14) throw IoError("metrics: expected 14 fields, got " + std::to_string(f.size()));
    // strtod keeps subnormals that std::stod rejects as out of range.
    auto num = [](const std::string& s) {
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (s.empty() || end != s.c_str() + s.size()) throw IoError("metrics: bad number '" + s + "'");
      return v;
    };
    auto count = [](const std::string& s) {
      std::size_t v = 0;
      const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || ptr != s.data() + s.size()) throw IoError("metrics: bad integer '" + s + "'");
      return v;
    };
    MetricsRecord r;
    r.stage = f[0];
    r.epoch = count(f[1]);
    r.step = count(f[2]);
    r.split = f[3];
    r.task = f[4];
    r.l_std = num(f[5]);
    r.r_at = num(f[6]);
    r.r_kl = num(f[7]);
    r.total = num(f[8]);
    r.accuracy = num(f[9]);
    r.delta_norm_img = num(f[10]);
    r.delta_norm_txt = num(f[11]);
    r.grad_norm = num(f[12]);
    r.wall_ms = num(f[13]);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_metrics(ss.str());
}

}  // namespace villa
