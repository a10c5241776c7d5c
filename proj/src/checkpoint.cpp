#include "chainflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace chainflow {

namespace {

constexpr std::size_t kMagicLen = sizeof(kCheckpointMagic) - 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

class Reader {
 public:
  explicit Reader(const std::string& b) : bytes_(b) {}
  bool done() const { return pos_ == bytes_.size(); }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::uint64_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

 private:
  void need(std::uint64_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

NamedArray NamedArray::from_matrix(std::string name, const Matrix& m, int rank) {
  NamedArray a;
  a.name = std::move(name);
  if (rank == 1) {
    a.shape = {static_cast<std::uint64_t>(m.size())};
  } else {
    a.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  }
  a.data.assign(m.data(), m.data() + m.size());
  return a;
}

NamedArray NamedArray::scalar(std::string name, double v) {
  return NamedArray{std::move(name), {1}, {v}};
}

Matrix NamedArray::to_matrix() const {
  Index rows = 1, cols = 1;
  if (shape.size() == 1) {
    cols = static_cast<Index>(shape[0]);
  } else if (shape.size() == 2) {
    rows = static_cast<Index>(shape[0]);
    cols = static_cast<Index>(shape[1]);
  } else {
    throw CheckpointError("array '" + name + "' has rank " + std::to_string(shape.size()) + "; expected 1 or 2");
  }
  return Eigen::Map<const Matrix>(data.data(), rows, cols);
}

double NamedArray::as_scalar() const {
  if (data.size() != 1) throw CheckpointError("array '" + name + "' is not a scalar");
  return data[0];
}

void ArrayBundle::put(NamedArray a) {
  for (auto& existing : arrays_) {
    if (existing.name == a.name) {
      existing = std::move(a);
      return;
    }
  }
  arrays_.push_back(std::move(a));
}

bool ArrayBundle::contains(const std::string& name) const {
  for (const auto& a : arrays_)
    if (a.name == name) return true;
  return false;
}

const NamedArray& ArrayBundle::get(const std::string& name) const {
  for (const auto& a : arrays_)
    if (a.name == name) return a;
  throw CheckpointError("checkpoint has no array '" + name + "'");
}

std::string encode_checkpoint(const ArrayBundle& bundle) {
  std::string out(kCheckpointMagic, kMagicLen);
  for (const auto& a : bundle.arrays()) {
    std::uint64_t n = 1;
    for (auto e : a.shape) n *= e;
    if (n != a.data.size()) throw CheckpointError("array '" + a.name + "' data length does not match its shape");
    put_u64(out, a.name.size());
    out += a.name;
    put_u64(out, a.shape.size());
    for (auto e : a.shape) put_u64(out, e);
    for (double d : a.data) put_f64(out, d);
  }
  return out;
}

ArrayBundle decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagicLen || bytes.compare(0, kMagicLen, kCheckpointMagic) != 0)
    throw CheckpointError("not a checkpoint: unknown magic");
  Reader r(bytes);
  r.skip(kMagicLen);
  ArrayBundle bundle;
  while (!r.done()) {
    NamedArray a;
    a.name = r.str(r.u64());
    const std::uint64_t rank = r.u64();
    if (rank > 8) throw CheckpointError("array '" + a.name + "' has implausible rank " + std::to_string(rank));
    std::uint64_t n = 1;
    for (std::uint64_t i = 0; i < rank; ++i) {
      a.shape.push_back(r.u64());
      n *= a.shape.back();
    }
    if (n > bytes.size() / 8) throw CheckpointError("array '" + a.name + "' is larger than the file");
    a.data.resize(n);
    for (auto& d : a.data) d = r.f64();
    bundle.put(std::move(a));
  }
  return bundle;
}

void save_checkpoint(const std::filesystem::path& path, const ArrayBundle& bundle) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  const std::string bytes = encode_checkpoint(bundle);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

ArrayBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace chainflow
