#pragma once

// Versioned binary array container. Layout:
//   "CHAINCKPT1"
//   repeated until EOF:
//     u64 name length, name bytes, u64 rank, rank x u64 extents, prod(extents) x f64
// Integers and doubles are little-endian.

#include "chainflow/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace chainflow {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[] = "CHAINCKPT1";

struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<double> data;

  static NamedArray from_matrix(std::string name, const Matrix& m, int rank = 2);
  static NamedArray scalar(std::string name, double v);
  Matrix to_matrix() const;
  double as_scalar() const;
};

class ArrayBundle {
 public:
  void put(NamedArray a);
  void put(const std::string& name, const Matrix& m, int rank = 2) { put(NamedArray::from_matrix(name, m, rank)); }
  void put_scalar(const std::string& name, double v) { put(NamedArray::scalar(name, v)); }

  bool contains(const std::string& name) const;
  const NamedArray& get(const std::string& name) const;
  Matrix matrix(const std::string& name) const { return get(name).to_matrix(); }
  double scalar(const std::string& name) const { return get(name).as_scalar(); }

  const std::vector<NamedArray>& arrays() const { return arrays_; }

 private:
  std::vector<NamedArray> arrays_;
};

void save_checkpoint(const std::filesystem::path& path, const ArrayBundle& bundle);
ArrayBundle load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const ArrayBundle& bundle);
ArrayBundle decode_checkpoint(const std::string& bytes);

}  // namespace chainflow
