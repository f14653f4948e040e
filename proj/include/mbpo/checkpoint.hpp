// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Checkpoint container:
//
//   bytes [0, 8)      header length N, unsigned little-endian
//   bytes [8, 8+N)    UTF-8 JSON header
//   bytes [8+N, ...)  payload of little-endian IEEE-754 float64 values
//
// The header is {"dtype": "f64", "metadata": {...}, "tensors": [{"name",
// "shape", "offset", "nbytes"}, ...]} with offsets relative to the payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mbpo/tensor.hpp"

namespace mbpo {

class CheckpointError : public Error {
 public:
  using Error::Error;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
};

namespace detail {
inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}
inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}
}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["dtype"] = "f64";
  header["metadata"] = ckpt.metadata;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    const std::uint64_t nbytes = t.value.size() * 8;
    header["tensors"].push_back(
        {{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = header.dump();
  std::string out;
  out.reserve(8 + text.size() + offset);
  detail::put_u64_le(out, text.size());
  out += text;
  for (const auto& t : ckpt.tensors) {
    for (double v : t.value.data()) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8) throw CheckpointError("checkpoint: truncated before header length");
  const std::uint64_t header_len = detail::get_u64_le(p);
  if (header_len > bytes.size() - 8) {
    throw CheckpointError("checkpoint: header length " + std::to_string(header_len) + " exceeds file size " +
                          std::to_string(bytes.size()));
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (header.value("dtype", "") != "f64") throw CheckpointError("checkpoint: unsupported dtype");
  const std::uint64_t payload_begin = 8 + header_len;
  const std::uint64_t payload_size = bytes.size() - payload_begin;
  Checkpoint ckpt;
  ckpt.metadata = header.value("metadata", nlohmann::json::object());
  std::uint64_t expected_end = 0;
  try {
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (nbytes != numel(shape) * 8) {
        throw CheckpointError("checkpoint: tensor '" + name + "' byte count does not match shape " + to_string(shape));
      }
      if (offset > payload_size || nbytes > payload_size - offset) {
        throw CheckpointError("checkpoint: payload truncated inside tensor '" + name + "'");
      }
      std::vector<double> values(numel(shape));
      for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = std::bit_cast<double>(detail::get_u64_le(p + payload_begin + offset + 8 * i));
      }
      ckpt.tensors.push_back({name, Tensor(shape, std::move(values))});
      expected_end = std::max(expected_end, offset + nbytes);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed tensor table: ") + e.what());
  } catch (const ShapeError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  if (expected_end != payload_size) {
    throw CheckpointError("checkpoint: payload is " + std::to_string(payload_size) + " bytes, header describes " +
                          std::to_string(expected_end));
  }
  return ckpt;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed for '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file(path, encode_checkpoint(ckpt)); }

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace mbpo
