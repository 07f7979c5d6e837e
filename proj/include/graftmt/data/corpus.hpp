// Plain-text corpora: UTF-8, one sentence per line, parallel sides aligned by
// line number.
#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "graftmt/data/synthetic.hpp"
#include "graftmt/errors.hpp"

namespace graftmt {

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus '" + path + "'");
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write corpus '" + path + "'");
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::vector<TextPair> read_parallel(const std::string& src_path, const std::string& tgt_path) {
  const auto src = read_lines(src_path);
  const auto tgt = read_lines(tgt_path);
  if (src.size() != tgt.size()) {
    throw IoError("parallel corpus misaligned: '" + src_path + "' has " + std::to_string(src.size()) +
                  " lines, '" + tgt_path + "' has " + std::to_string(tgt.size()));
  }
  std::vector<TextPair> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = {src[i], tgt[i]};
  return out;
}

inline void write_parallel(const std::string& src_path, const std::string& tgt_path,
                           const std::vector<TextPair>& pairs) {
  std::vector<std::string> src, tgt;
  src.reserve(pairs.size());
  tgt.reserve(pairs.size());
  for (const auto& p : pairs) {
    src.push_back(p.src);
    tgt.push_back(p.tgt);
  }
  write_lines(src_path, src);
  write_lines(tgt_path, tgt);
}

}  // namespace graftmt
