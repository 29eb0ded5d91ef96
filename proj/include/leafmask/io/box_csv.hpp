#pragma once

// Box lists as CSV: header `x1,y1,x2,y2,score`, one row per instance.

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "leafmask/assembly.hpp"
#include "leafmask/errors.hpp"

namespace leafmask::io {

inline constexpr const char* kBoxCsvHeader = "x1,y1,x2,y2,score";

inline std::string format_decimal(double v) {
  char buf[512];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
  if (res.ec != std::errc()) throw FormatError("cannot format value");
  return std::string(buf, res.ptr);
}

inline std::string encode_boxes(const std::vector<Box>& boxes) {
  std::string out = std::string(kBoxCsvHeader) + "\n";
  for (const auto& b : boxes)
    out += format_decimal(b.x1) + "," + format_decimal(b.y1) + "," + format_decimal(b.x2) + "," +
           format_decimal(b.y2) + "," + format_decimal(b.score) + "\n";
  return out;
}

inline std::vector<Box> decode_boxes(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
    return s;
  };
  if (!std::getline(in, line) || trim(line) != kBoxCsvHeader)
    throw FormatError("boxes: expected header '" + std::string(kBoxCsvHeader) + "'");
  ++line_no;
  std::vector<Box> boxes;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    double v[5];
    std::size_t field = 0;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    while (field < 5) {
      auto res = std::from_chars(p, end, v[field]);
      if (res.ec != std::errc())
        throw FormatError("boxes: line " + std::to_string(line_no) + ": bad number in field " +
                          std::to_string(field + 1));
      p = res.ptr;
      ++field;
      if (field < 5) {
        if (p == end || *p != ',')
          throw FormatError("boxes: line " + std::to_string(line_no) + ": expected 5 fields");
        ++p;
      }
    }
    if (p != end) throw FormatError("boxes: line " + std::to_string(line_no) + ": trailing data");
    Box b{v[0], v[1], v[2], v[3], v[4]};
    if (!(b.x2 > b.x1) || !(b.y2 > b.y1))
      throw FormatError("boxes: line " + std::to_string(line_no) + ": need x2 > x1 and y2 > y1");
    if (!(b.score >= 0.0 && b.score <= 1.0))
      throw FormatError("boxes: line " + std::to_string(line_no) + ": score outside [0,1]");
    boxes.push_back(b);
  }
  return boxes;
}

inline std::vector<Box> read_boxes(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return decode_boxes(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void write_boxes(const std::string& path, const std::vector<Box>& boxes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << encode_boxes(boxes);
}

}  // namespace leafmask::io
