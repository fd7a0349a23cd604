#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "llbb/binary_io.hpp"
#include "llbb/errors.hpp"
#include "llbb/tensor.hpp"

namespace llbb {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Records: {u32 name length, name, u32 rank, u64 dims..., f32 data}.
inline void write_tensor_records(std::ostream& os, const ParamSet<float>& p) {
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.num_tensors()));
  for (const auto& t : p) {
    io::put_string(os, t.name);
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) io::put<std::uint64_t>(os, d);
    io::put_bytes(os, t.data.data(), t.data.size() * sizeof(float));
  }
}

inline ParamSet<float> read_tensor_records(std::istream& is) {
  ParamSet<float> p;
  const auto count = io::get<std::uint32_t>(is, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = io::get_string(is, "tensor name");
    const auto rank = io::get<std::uint32_t>(is, "tensor rank");
    if (rank > 8) throw CheckpointError("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = io::get<std::uint64_t>(is, "tensor dim");
    if (shape_size(shape) > (std::size_t{1} << 32)) throw CheckpointError("tensor '" + name + "' is implausibly large");
    const auto idx = p.add(name, shape);
    io::get_bytes(is, p[idx].data.data(), p[idx].data.size() * sizeof(float), "tensor data");
  }
  return p;
}

inline void write_params_section(std::ostream& os, const ParamSet<float>& p) {
  io::put_magic(os, "LLCK");
  io::put<std::uint16_t>(os, kCheckpointVersion);
  write_tensor_records(os, p);
}

inline ParamSet<float> read_params_section(std::istream& is) {
  try {
    io::expect_magic(is, "LLCK");
  } catch (const FormatError& e) {
    throw CheckpointError(std::string("parameter section: ") + e.what());
  }
  const auto version = io::get<std::uint16_t>(is, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  return read_tensor_records(is);
}

// Verifies that loaded tensors match an expected manifest exactly.
inline void check_manifest(const ParamSet<float>& loaded, const ParamSet<float>& expected) {
  if (loaded.num_tensors() != expected.num_tensors()) {
    throw CheckpointError("checkpoint has " + std::to_string(loaded.num_tensors()) + " tensors, model expects " +
                          std::to_string(expected.num_tensors()));
  }
  for (std::size_t i = 0; i < expected.num_tensors(); ++i) {
    if (loaded[i].name != expected[i].name || loaded[i].shape != expected[i].shape) {
      throw CheckpointError("tensor " + std::to_string(i) + ": checkpoint has '" + loaded[i].name + "' " +
                            shape_string(loaded[i].shape) + ", model expects '" + expected[i].name + "' " +
                            shape_string(expected[i].shape));
    }
  }
}

}  // namespace llbb
