#pragma once

// Line-delimited JSON dump of samples: one object per line with fields
// img_feats, boxes, tokens and labels. Doubles are written in shortest
// round-trip form, so reading a dump back is bit-exact.

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "villa/metrics.hpp"
#include "villa/synth.hpp"

namespace villa {

namespace detail {

inline nlohmann::json array_to_json(const Array& a) {
  return nlohmann::json{{"shape", a.shape()}, {"values", a.values()}};
}

inline Array array_from_json(const nlohmann::json& j) {
  return Array(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
}

}  // namespace detail

inline std::string sample_to_json_line(const Sample& s) {
  nlohmann::json labels = nlohmann::json::object();
  if (!s.mlm_targets.empty()) labels["mlm_targets"] = s.mlm_targets;
  if (s.itm_label) labels["itm_label"] = *s.itm_label;
  if (s.answer_label) labels["answer_label"] = *s.answer_label;
  const nlohmann::json j{{"img_feats", detail::array_to_json(s.img_feats)},
                         {"boxes", detail::array_to_json(s.boxes)},
                         {"tokens", s.tokens},
                         {"labels", labels}};
  return j.dump();
}

inline Sample sample_from_json_line(std::string_view line) {
  try {
    const nlohmann::json j = nlohmann::json::parse(line);
    Sample s;
    s.img_feats = detail::array_from_json(j.at("img_feats"));
    s.boxes = detail::array_from_json(j.at("boxes"));
    s.tokens = j.at("tokens").get<std::vector<std::size_t>>();
    const nlohmann::json& labels = j.at("labels");
    if (labels.contains("mlm_targets")) s.mlm_targets = labels["mlm_targets"].get<std::vector<int>>();
    if (labels.contains("itm_label")) s.itm_label = labels["itm_label"].get<int>();
    if (labels.contains("answer_label")) s.answer_label = labels["answer_label"].get<int>();
    if (s.img_feats.rank() != 2 || s.boxes.shape() != Shape{s.img_feats.dim(0), 4}) {
      throw IoError("dataset: inconsistent region shapes");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("dataset: malformed record: ") + e.what());
  }
}

inline std::string dump_samples(const std::vector<Sample>& samples) {
  std::string out;
  for (const Sample& s : samples) {
    out += sample_to_json_line(s);
    out += '\n';
  }
  return out;
}

inline std::vector<Sample> parse_samples(std::string_view text) {
  std::vector<Sample> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(sample_from_json_line(line));
  }
  return out;
}

inline void write_samples(const std::vector<Sample>& samples, const std::filesystem::path& path) {
  write_file_atomic(path, dump_samples(samples));
}

inline std::vector<Sample> read_samples(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_samples(ss.str());
}

}  // namespace villa
