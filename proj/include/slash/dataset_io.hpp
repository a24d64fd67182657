// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "slash/png_io.hpp"
#include "slash/scene.hpp"
#include "slash/text.hpp"

// Dataset directory layout (format version 1):
//
//   manifest.txt          key=value header, then one `sample=` line per record;
//                         kind= is the background difficulty
//   images/NNNNN.png      8-bit RGB
//   labels/NNNNN.txt      segmentation (run-length encoded), points, flags
//
// Numbers are written in shortest round-trip form, so load(save(d)) == d.

namespace slash {

inline constexpr int kDatasetVersion = 1;

namespace detail {

inline std::string encode_rle(const std::vector<int>& labels) {
  std::ostringstream os;
  std::size_t i = 0;
  bool first = true;
  while (i < labels.size()) {
    std::size_t j = i;
    while (j < labels.size() && labels[j] == labels[i]) ++j;
    if (!first) os << ' ';
    os << labels[i] << ':' << (j - i);
    first = false;
    i = j;
  }
  return os.str();
}

inline std::vector<int> decode_rle(std::string_view s, std::size_t expected, const std::string& where) {
  std::vector<int> out;
  out.reserve(expected);
  for (auto tok : text::tokens(s)) {
    auto parts = text::split(tok, ':');
    if (parts.size() != 2) throw DataError(where + ": malformed run '" + std::string(tok) + "'");
    const auto label = text::parse_uint(parts[0], where);
    const auto len = text::parse_uint(parts[1], where);
    out.insert(out.end(), len, static_cast<int>(label));
  }
  if (out.size() != expected) throw DataError(where + ": segmentation has wrong pixel count");
  return out;
}

inline void write_label_file(const std::filesystem::path& path, const RenderedSample& s) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << "slash-label " << kDatasetVersion << '\n';
  f << "size " << s.height << ' ' << s.width << '\n';
  f << "objects " << s.num_objects() << '\n';
  f << "dropped " << s.dropped_objects << '\n';
  for (std::size_t i = 0; i < s.gt_points.size(); ++i) {
    f << "point " << (i + 1) << ' ' << text::format_double(s.gt_points[i][0]) << ' '
      << text::format_double(s.gt_points[i][1]) << '\n';
  }
  f << "annotated " << (s.annotated ? 1 : 0) << '\n';
  f << "annotated_objects";
  for (auto id : s.annotated_objects) f << ' ' << id;
  f << '\n';
  f << "rle " << encode_rle(s.gt.labels) << '\n';
}

inline void read_label_file(const std::filesystem::path& path, RenderedSample& s) {
  std::ifstream f(path);
  const std::string where = path.string();
  if (!f) throw DataError("missing label file " + where);
  std::string line;
  std::map<std::string, std::string> fields;
  std::vector<Point2> points;
  while (std::getline(f, line)) {
    const auto sp = line.find(' ');
    const std::string key = line.substr(0, sp);
    const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
    if (key == "point") {
      auto t = text::tokens(rest);
      if (t.size() != 3) throw DataError(where + ": malformed point line");
      if (text::parse_uint(t[0], where) != points.size() + 1) throw DataError(where + ": points out of order");
      points.push_back(Point2{text::parse_double(t[1], where), text::parse_double(t[2], where)});
    } else if (!key.empty()) {
      fields[key] = rest;
    }
  }
  if (fields["slash-label"] != std::to_string(kDatasetVersion)) {
    throw VersionError(where + ": unsupported label version '" + fields["slash-label"] + "'");
  }
  for (const char* k : {"size", "objects", "dropped", "annotated", "annotated_objects", "rle"}) {
    if (!fields.count(k)) throw DataError(where + ": missing field '" + k + "'");
  }
  auto size = text::tokens(fields["size"]);
  if (size.size() != 2) throw DataError(where + ": malformed size");
  s.height = text::parse_uint(size[0], where);
  s.width = text::parse_uint(size[1], where);
  if (text::parse_uint(fields["objects"], where) != points.size()) throw DataError(where + ": object count mismatch");
  s.gt_points = std::move(points);
  s.dropped_objects = text::parse_uint(fields["dropped"], where);
  s.annotated = fields["annotated"] == "1";
  s.annotated_objects.clear();
  for (auto t : text::tokens(fields["annotated_objects"])) s.annotated_objects.push_back(text::parse_uint(t, where));
  if (s.annotated != !s.annotated_objects.empty()) throw DataError(where + ": inconsistent annotation flags");
  s.gt = Segmentation(s.height, s.width, decode_rle(fields["rle"], s.height * s.width, where));
}

}  // namespace detail

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  std::ofstream m(dir / "manifest.txt");
  if (!m) throw DataError("cannot write manifest in " + dir.string());
  m << "format=slash-dataset\n";
  m << "version=" << kDatasetVersion << '\n';
  m << "seed=" << d.seed << '\n';
  m << "size=" << d.samples.size() << '\n';
  m << "kind=" << to_string(d.difficulty) << '\n';
  m << "height=" << d.height << '\n';
  m << "width=" << d.width << '\n';
  m << "policy.applied=" << (d.policy_applied ? 1 : 0) << '\n';
  m << "policy.image_fraction=" << text::format_double(d.policy.image_fraction) << '\n';
  m << "policy.object_fraction=" << text::format_double(d.policy.object_fraction) << '\n';
  m << "policy.seed=" << d.policy.seed << '\n';
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const std::string id = text::zero_pad(i, 5);
    const auto& s = d.samples[i];
    write_png((dir / "images" / (id + ".png")).string(), Image8{s.width, s.height, s.rgb});
    detail::write_label_file(dir / "labels" / (id + ".txt"), s);
    m << "sample=" << id << " images/" << id << ".png labels/" << id << ".txt\n";
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.txt");
  if (!m) throw DataError("missing manifest in " + dir.string());
  std::map<std::string, std::string> header;
  std::vector<std::string> records;
  std::string line;
  while (std::getline(m, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("manifest: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "sample") {
      records.push_back(value);
    } else {
      header[key] = value;
    }
  }
  if (header["format"] != "slash-dataset") throw DataError("manifest: not a slash dataset");
  if (header["version"] != std::to_string(kDatasetVersion)) {
    throw VersionError("manifest: dataset version '" + header["version"] + "' is incompatible with " +
                       std::to_string(kDatasetVersion));
  }
  Dataset d;
  try {
    d.seed = text::parse_uint(header.at("seed"), "seed");
    d.difficulty = parse_difficulty(header.at("kind"));
    d.height = text::parse_uint(header.at("height"), "height");
    d.width = text::parse_uint(header.at("width"), "width");
    d.policy_applied = header.at("policy.applied") == "1";
    d.policy.image_fraction = text::parse_double(header.at("policy.image_fraction"), "policy.image_fraction");
    d.policy.object_fraction = text::parse_double(header.at("policy.object_fraction"), "policy.object_fraction");
    d.policy.seed = text::parse_uint(header.at("policy.seed"), "policy.seed");
  } catch (const std::out_of_range&) {
    throw DataError("manifest: missing header field");
  } catch (const ConfigError& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  if (text::parse_uint(header["size"], "size") != records.size()) {
    throw DataError("manifest: size field does not match the number of sample records");
  }
  for (const auto& rec : records) {
    auto t = text::tokens(rec);
    if (t.size() != 3) throw DataError("manifest: malformed sample record '" + rec + "'");
    const auto img_path = dir / std::string(t[1]);
    const auto lbl_path = dir / std::string(t[2]);
    if (!std::filesystem::exists(img_path) || !std::filesystem::exists(lbl_path)) {
      throw DataError("manifest: sample record '" + std::string(t[0]) + "' references a missing file");
    }
    RenderedSample s;
    detail::read_label_file(lbl_path, s);
    Image8 img = read_png(img_path.string());
    if (img.width != s.width || img.height != s.height) {
      throw DataError("manifest: sample record '" + std::string(t[0]) + "' image size disagrees with labels");
    }
    s.rgb = std::move(img.rgb);
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace slash
