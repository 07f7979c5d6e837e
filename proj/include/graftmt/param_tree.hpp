// Named parameter hierarchy addressed by slash-separated paths, plus the
// shape-only manifest used for accounting without materialising weights.
#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "graftmt/errors.hpp"
#include "graftmt/tensor.hpp"

namespace graftmt {

inline std::vector<std::string_view> split_path(std::string_view path) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (start <= path.size()) {
    const std::size_t slash = path.find('/', start);
    const std::size_t end = slash == std::string_view::npos ? path.size() : slash;
    parts.push_back(path.substr(start, end - start));
    if (slash == std::string_view::npos) break;
    start = slash + 1;
  }
  return parts;
}

namespace detail {

// '*' inside a segment matches any run of characters.
inline bool match_segment(std::string_view pattern, std::string_view text) {
  std::size_t p = 0, t = 0, star = std::string_view::npos, mark = 0;
  while (t < text.size()) {
    if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = t;
    } else if (p < pattern.size() && pattern[p] == text[t]) {
      ++p;
      ++t;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      t = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

inline bool match_parts(const std::vector<std::string_view>& pat, std::size_t pi,
                        const std::vector<std::string_view>& txt, std::size_t ti) {
  if (pi == pat.size()) return ti == txt.size();
  if (pat[pi] == "**") {
    for (std::size_t k = ti; k <= txt.size(); ++k) {
      if (match_parts(pat, pi + 1, txt, k)) return true;
    }
    return false;
  }
  if (ti == txt.size()) return false;
  return match_segment(pat[pi], txt[ti]) && match_parts(pat, pi + 1, txt, ti + 1);
}

}  // namespace detail

// Path glob: `*` matches within one segment, a `**` segment matches any number
// of segments (including none).
inline bool path_matches(std::string_view pattern, std::string_view path) {
  return detail::match_parts(split_path(pattern), 0, split_path(path), 0);
}

inline void validate_pattern(std::string_view pattern) {
  if (pattern.empty()) throw ConfigError("empty path pattern");
  for (auto seg : split_path(pattern)) {
    if (seg.empty()) throw ConfigError("path pattern '" + std::string(pattern) + "' has an empty segment");
    if (seg.find("**") != std::string_view::npos && seg != "**") {
      throw ConfigError("path pattern '" + std::string(pattern) + "': '**' must be a whole segment");
    }
  }
}

struct ParamEntry {
  std::string path;
  Shape shape;
  bool trainable = true;

  [[nodiscard]] std::size_t numel() const { return shape_numel(shape); }
  [[nodiscard]] std::string_view leaf_name() const {
    const auto slash = path.rfind('/');
    return slash == std::string::npos ? std::string_view(path) : std::string_view(path).substr(slash + 1);
  }
  // Projection and embedding matrices; excludes biases and norm scale/shift.
  [[nodiscard]] bool is_matrix() const { return shape.size() == 2; }
};

// Sorted by path, so iteration order is stable.
using ParamManifest = std::vector<ParamEntry>;

template <typename T>
class ParamTree {
 public:
  void add(const std::string& path, Tensor<T> tensor) {
    if (path.empty() || path.front() == '/' || path.back() == '/') {
      throw ConfigError("invalid parameter path '" + path + "'");
    }
    if (!entries_.emplace(path, std::move(tensor)).second) {
      throw StateError("duplicate parameter path '" + path + "'");
    }
  }

  [[nodiscard]] bool contains(const std::string& path) const { return entries_.count(path) != 0; }

  [[nodiscard]] Tensor<T>& at(const std::string& path) {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw IndexError("no parameter at path '" + path + "'");
    return it->second;
  }
  [[nodiscard]] const Tensor<T>& at(const std::string& path) const {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw IndexError("no parameter at path '" + path + "'");
    return it->second;
  }

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  [[nodiscard]] ParamManifest manifest() const {
    ParamManifest out;
    out.reserve(entries_.size());
    for (const auto& [path, t] : entries_) out.push_back({path, t.shape(), t.requires_grad()});
    return out;
  }

  void zero_grad() {
    for (auto& [path, t] : entries_) t.zero_grad();
  }

  [[nodiscard]] std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& [path, t] : entries_) n += t.numel();
    return n;
  }

 private:
  std::map<std::string, Tensor<T>> entries_;
};

}  // namespace graftmt
