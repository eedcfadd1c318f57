#pragma once

// Tensor container: a plain-text index followed by raw little-endian doubles.
//
//   AFFECTKIT-TENSORS 1
//   entries <count>
//   <name> <rank> <d0> ... <d(rank-1)>      (one line per entry)
//   data
//   <all entries' values, in index order, 8 bytes each, little endian>
//
// Names are non-empty and contain no whitespace. The byte layout does not
// depend on host endianness.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "affectkit/errors.hpp"
#include "affectkit/graph.hpp"
#include "affectkit/tensor.hpp"

namespace affectkit {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

inline constexpr const char* kContainerMagic = "AFFECTKIT-TENSORS 1";

inline void check_entry_name(const std::string& name) {
  if (name.empty()) throw ArgumentError("tensor container entry with empty name");
  for (unsigned char c : name) {
    if (c <= ' ' || c == 0x7f) throw ArgumentError("tensor container entry name has whitespace: '" + name + "'");
  }
}

inline void put_le64(std::string& out, double value) {
  auto bits = std::bit_cast<std::uint64_t>(value);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>(bits & 0xffu));
    bits >>= 8;
  }
}

inline double get_le64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

}  // namespace detail

/// Serializes entries in the given order.
inline std::string encode_tensors(const std::vector<NamedTensor>& entries) {
  std::string out = std::string(detail::kContainerMagic) + "\nentries " + std::to_string(entries.size()) + "\n";
  std::size_t total = 0;
  for (const auto& e : entries) {
    detail::check_entry_name(e.name);
    out += e.name + " " + std::to_string(e.tensor.rank());
    for (std::size_t d : e.tensor.shape()) out += " " + std::to_string(d);
    out += "\n";
    total += e.tensor.size();
  }
  out += "data\n";
  out.reserve(out.size() + total * 8);
  for (const auto& e : entries) {
    for (double v : e.tensor.values()) detail::put_le64(out, v);
  }
  return out;
}

/// Entry names and shapes, plus where the value bytes start.
struct ContainerIndex {
  std::vector<std::pair<std::string, Shape>> entries;
  std::size_t data_offset = 0;
};

inline ContainerIndex decode_index(const std::string& bytes, const std::string& origin = "container") {
  ContainerIndex index;
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw DataError(origin + ": truncated index");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (next_line() != detail::kContainerMagic) throw DataError(origin + ": not a tensor container");
  std::istringstream header(next_line());
  std::string word;
  std::size_t count = 0;
  if (!(header >> word >> count) || word != "entries") throw DataError(origin + ": malformed entry count");
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream line(next_line());
    std::string name;
    std::size_t rank = 0;
    if (!(line >> name >> rank)) throw DataError(origin + ": malformed index line " + std::to_string(i + 1));
    Shape shape(rank);
    for (auto& d : shape) {
      if (!(line >> d) || d == 0) throw DataError(origin + ": bad extent for entry '" + name + "'");
    }
    index.entries.emplace_back(std::move(name), std::move(shape));
  }
  if (next_line() != "data") throw DataError(origin + ": missing data marker");
  index.data_offset = pos;
  return index;
}

inline std::vector<NamedTensor> decode_tensors(const std::string& bytes, const std::string& origin = "container") {
  const ContainerIndex index = decode_index(bytes, origin);
  std::size_t total = 0;
  for (const auto& [name, shape] : index.entries) total += element_count(shape);
  if (bytes.size() != index.data_offset + total * 8) {
    throw DataError(origin + ": data section holds " + std::to_string(bytes.size() - index.data_offset) +
                    " bytes, index promises " + std::to_string(total * 8));
  }
  std::vector<NamedTensor> out;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + index.data_offset;
  for (const auto& [name, shape] : index.entries) {
    std::vector<double> values(element_count(shape));
    for (double& v : values) {
      v = detail::get_le64(p);
      p += 8;
    }
    out.push_back({name, Tensor(shape, std::move(values))});
  }
  return out;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

inline void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
  write_file_bytes(path, encode_tensors(entries));
}

inline std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  return decode_tensors(read_file_bytes(path), path.string());
}

/// Reads just the shapes of a container file.
inline ContainerIndex load_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string head;
  std::string line;
  std::size_t lines = 0;
  std::size_t expected = 3;
  while (std::getline(in, line)) {
    head += line + "\n";
    ++lines;
    if (lines == 2) {
      std::istringstream s(line);
      std::string word;
      std::size_t count = 0;
      if (!(s >> word >> count)) break;
      expected = count + 3;
    }
    if (lines >= expected) break;
  }
  return decode_index(head, path.string());
}

/// Parameter checkpoint: every value tensor, in name order.
inline void save_parameters(const std::filesystem::path& path, const ParameterSet& params) {
  std::vector<NamedTensor> entries;
  entries.reserve(params.size());
  for (const auto& [name, p] : params) entries.push_back({name, p.value});
  save_tensors(path, entries);
}

}  // namespace affectkit
