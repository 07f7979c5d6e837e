// Checkpoint files: one line of UTF-8 JSON (layout, format version and a
// parameter manifest with byte offsets), then raw little-endian float32 data
// in manifest order.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "graftmt/config.hpp"
#include "graftmt/model.hpp"
#include "graftmt/optimizer.hpp"

namespace graftmt {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void write_f32(std::ostream& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                        static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline float read_f32(const unsigned char* b) {
  const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                             (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return std::bit_cast<float>(bits);
}

struct RawFile {
  json header;
  std::vector<unsigned char> data;
};

inline RawFile read_raw(const std::string& path, const std::string& format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw IoError("'" + path + "': missing header line");
  RawFile f;
  try {
    f.header = json::parse(line);
  } catch (const json::exception& e) {
    throw IoError("'" + path + "': malformed header: " + e.what());
  }
  if (f.header.value("format", "") != format) throw IoError("'" + path + "' is not a " + format + " file");
  if (f.header.value("version", 0) != kCheckpointVersion) {
    throw IoError("'" + path + "': unsupported version " + std::to_string(f.header.value("version", 0)));
  }
  const auto bytes = f.header.at("data_bytes").get<std::size_t>();
  f.data.resize(bytes);
  in.read(reinterpret_cast<char*>(f.data.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes) throw IoError("'" + path + "': truncated data section");
  return f;
}

template <typename T>
void read_block(const RawFile& f, std::size_t offset, std::span<T> out, const std::string& path) {
  if (offset + out.size() * 4 > f.data.size()) throw IoError("checkpoint entry '" + path + "' past end of data");
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(read_f32(f.data.data() + offset + 4 * i));
}

}  // namespace detail

template <typename T>
void save_checkpoint(const Seq2SeqModel<T>& model, const std::string& path, const json& extra = json::object()) {
  json header;
  header["format"] = "graftmt-checkpoint";
  header["version"] = kCheckpointVersion;
  header["norm_order"] = "post";
  header["layout"] = model.layout();
  header["extra"] = extra;
  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& [p, t] : model.params()) {
    manifest.push_back({{"path", p}, {"shape", t.shape()}, {"offset", offset}, {"trainable", t.requires_grad()}});
    offset += t.numel() * 4;
  }
  header["params"] = std::move(manifest);
  header["data_bytes"] = offset;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out << header.dump() << '\n';
  for (const auto& [p, t] : model.params())
    for (T v : t.data()) detail::write_f32(out, static_cast<float>(v));
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

template <typename T = float>
Seq2SeqModel<T> load_checkpoint(const std::string& path, json* extra = nullptr) {
  const auto f = detail::read_raw(path, "graftmt-checkpoint");
  auto model = Seq2SeqModel<T>::build(f.header.at("layout").get<ModelLayout>(), 0);
  std::size_t seen = 0;
  for (const auto& e : f.header.at("params")) {
    const auto p = e.at("path").get<std::string>();
    auto& t = model.params().at(p);
    if (e.at("shape").get<Shape>() != t.shape()) throw IoError("checkpoint shape mismatch at '" + p + "'");
    detail::read_block<T>(f, e.at("offset").get<std::size_t>(), t.data(), p);
    t.set_requires_grad(e.value("trainable", true));
    ++seen;
  }
  if (seen != model.params().size()) throw IoError("checkpoint '" + path + "' does not cover every parameter");
  if (extra) *extra = f.header.value("extra", json::object());
  return model;
}

template <typename T>
void save_optimizer_state(const Adam<T>& opt, const std::string& path) {
  json header;
  header["format"] = "graftmt-optimizer";
  header["version"] = kCheckpointVersion;
  header["step"] = opt.step_count();
  json entries = json::array();
  std::size_t offset = 0;
  auto list = [&](const char* kind, const auto& moments) {
    for (const auto& [p, b] : moments) {
      entries.push_back({{"kind", kind}, {"path", p}, {"size", b.size()}, {"offset", offset}});
      offset += b.size() * 4;
    }
  };
  list("m", opt.first_moments());
  list("v", opt.second_moments());
  header["entries"] = std::move(entries);
  header["data_bytes"] = offset;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write optimizer state '" + path + "'");
  out << header.dump() << '\n';
  for (const auto* moments : {&opt.first_moments(), &opt.second_moments()})
    for (const auto& [p, b] : *moments)
      for (T v : b) detail::write_f32(out, static_cast<float>(v));
}

template <typename T>
void load_optimizer_state(Adam<T>& opt, const std::string& path) {
  const auto f = detail::read_raw(path, "graftmt-optimizer");
  std::map<std::string, std::vector<T>> m, v;
  for (const auto& e : f.header.at("entries")) {
    std::vector<T> buf(e.at("size").get<std::size_t>());
    const auto p = e.at("path").get<std::string>();
    detail::read_block<T>(f, e.at("offset").get<std::size_t>(), std::span<T>(buf), p);
    (e.at("kind").get<std::string>() == "m" ? m : v)[p] = std::move(buf);
  }
  opt.restore(f.header.at("step").get<std::size_t>(), std::move(m), std::move(v));
}

}  // namespace graftmt
