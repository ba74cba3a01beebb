#include "deqnca/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace deqnca::model {

namespace {

constexpr std::size_t kMagicSize = sizeof(kCheckpointMagic) - 1;

class Writer {
 public:
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(const char* s, std::size_t n) { bytes_.insert(bytes_.end(), s, s + n); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("corrupt checkpoint: truncated at byte " + std::to_string(pos_));
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{bytes_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t narrow(std::size_t v) {
  if (v > UINT32_MAX) throw CheckpointError("dimension does not fit the checkpoint format");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  Writer w;
  w.raw(kCheckpointMagic, kMagicSize);
  const Widths& widths = ckpt.params.widths;
  w.u32(narrow(widths.encoder));
  w.u32(narrow(widths.state));
  w.u32(narrow(widths.mlp));
  w.u32(ckpt.epoch);
  w.u64(ckpt.seed);
  w.f64(ckpt.accuracy);
  for (const Tensor* t : ckpt.params.tensors()) {
    w.u32(narrow(t->rank()));
    for (std::size_t d : t->shape()) w.u32(narrow(d));
    for (double v : t->values()) w.f64(v);
  }
  return w.take();
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::uint8_t* magic = r.take(kMagicSize);
  if (std::memcmp(magic, kCheckpointMagic, kMagicSize - 2) != 0) throw CheckpointError("not a checkpoint file");
  if (std::memcmp(magic, kCheckpointMagic, kMagicSize) != 0) {
    throw CheckpointError("unsupported checkpoint version '" +
                          std::string(reinterpret_cast<const char*>(magic) + kMagicSize - 2, 2) + "'");
  }
  Widths widths;
  widths.encoder = r.u32();
  widths.state = r.u32();
  widths.mlp = r.u32();
  if (widths.encoder == 0 || widths.state == 0 || widths.mlp == 0) throw CheckpointError("corrupt checkpoint: zero width");
  Checkpoint ckpt{ModelParams::zeros(widths), r.u32(), r.u64(), r.f64()};
  for (Tensor* t : ckpt.params.tensors()) {
    const std::uint32_t rank = r.u32();
    if (rank != t->rank()) {
      throw CheckpointError("checkpoint tensor has rank " + std::to_string(rank) + ", expected " +
                            std::to_string(t->rank()));
    }
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    if (shape != t->shape()) {
      throw CheckpointError("checkpoint tensor has shape " + to_string(shape) + ", widths imply " +
                            to_string(t->shape()));
    }
    for (double& v : t->values()) v = r.f64();
  }
  if (!r.at_end()) throw CheckpointError("corrupt checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::vector<std::uint8_t> bytes = serialize(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("cannot write " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize(bytes);
}

}  // namespace deqnca::model
