#include "sdopf/checkpoint.hpp"

#include <cstdint>
#include <fstream>
#include <map>

namespace sdopf {

namespace {

constexpr char kMagic[] = "SDOPF-CKPT";
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

void write_plane(std::ofstream& out, const ad::Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
}

void read_plane(std::ifstream& in, ad::Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      double v = 0;
      in.read(reinterpret_cast<char*>(&v), sizeof(v));
      m(i, j) = v;
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const NamedParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, sizeof(kMagic) - 1);
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, v] : params) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(v->rows()));
    write_u32(out, static_cast<std::uint32_t>(v->cols()));
    write_u32(out, v->is_complex() ? 1 : 0);
    write_plane(out, v->re);
    if (v->is_complex()) write_plane(out, v->im);
  }
  if (!out) throw CheckpointError("write failure on checkpoint: " + path);
}

void load_checkpoint(const std::string& path, NamedParams& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[sizeof(kMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::string(magic, sizeof(magic)) != kMagic)
    throw CheckpointError("bad checkpoint header: " + path);
  if (read_u32(in) != kVersion) throw CheckpointError("unsupported checkpoint version: " + path);

  std::map<std::string, ad::Value> by_name;
  for (auto& [name, v] : params) by_name[name] = v;

  const std::uint32_t count = read_u32(in);
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t len = read_u32(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const std::uint32_t rows = read_u32(in);
    const std::uint32_t cols = read_u32(in);
    const bool is_complex = read_u32(in) != 0;
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint has unknown tensor '" + name + "'");
    auto& v = it->second;
    if (v->rows() != static_cast<Eigen::Index>(rows) ||
        v->cols() != static_cast<Eigen::Index>(cols) || v->is_complex() != is_complex)
      throw CheckpointError("architecture mismatch for tensor '" + name + "'");
    read_plane(in, v->re);
    if (is_complex) read_plane(in, v->im);
  }
  if (!in) throw CheckpointError("truncated checkpoint: " + path);
}

}  // namespace sdopf
