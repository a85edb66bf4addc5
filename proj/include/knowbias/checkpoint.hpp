#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "knowbias/error.hpp"
#include "knowbias/hash.hpp"
#include "knowbias/model.hpp"

namespace knowbias {

// Binary layout (all integers little-endian):
//   "KNOWBIAS" | u32 version | config: 7 x u64 |
//   u32 tensor count | per tensor: u32 name length, name, u8 dtype (1 = f64),
//   u32 rank, rank x u64 dims, u64 byte offset into the data section |
//   data section (f64 values) | 32-byte SHA-256 of everything before it.
namespace ckpt {

inline constexpr char kMagic[8] = {'K', 'N', 'O', 'W', 'B', 'I', 'A', 'S'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <class T> void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : p_(data), size_(size) {}
  template <class T> T le(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(p_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) {
    require(p <= size_, ErrorCode::parse, "checkpoint: offset beyond end of file");
    pos_ = p;
  }

 private:
  void need(std::size_t n, const char* what) {
    require(pos_ + n <= size_, ErrorCode::parse, std::string("checkpoint: truncated while reading ") + what);
  }
  const std::uint8_t* p_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

// Appends the trailing SHA-256 over the current contents.
inline void seal(std::vector<std::uint8_t>& body) {
  const Digest d = sha256(body);
  body.insert(body.end(), d.begin(), d.end());
}

}  // namespace ckpt

inline std::vector<std::uint8_t> serialize_checkpoint(const Parameters& params) {
  params.validate();
  ckpt::Writer w;
  w.bytes(ckpt::kMagic, sizeof ckpt::kMagic);
  w.le<std::uint32_t>(ckpt::kVersion);
  const ModelConfig& c = params.config;
  for (std::uint64_t v : {c.n_layers, c.d_model, c.d_ffn, c.n_heads, c.vocab_size,
                          static_cast<std::size_t>(c.ffn_kind), c.max_seq_len})
    w.le<std::uint64_t>(v);

  std::vector<std::pair<std::string, const Tensor*>> tensors;
  params.for_each_tensor([&](const std::string& n, const Tensor& t) { tensors.emplace_back(n, &t); });
  w.le<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le<std::uint8_t>(ckpt::kDtypeF64);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape()) w.le<std::uint64_t>(d);
    w.le<std::uint64_t>(offset);
    offset += t->numel() * sizeof(double);
  }
  for (const auto& [name, t] : tensors)
    for (double v : t->data()) w.f64(v);
  ckpt::seal(w.buffer());
  return std::move(w.buffer());
}

inline Parameters parse_checkpoint(const std::vector<std::uint8_t>& file) {
  require(file.size() >= sizeof ckpt::kMagic + 32, ErrorCode::checksum,
          "checkpoint: file too short (" + std::to_string(file.size()) + " bytes)");
  const std::size_t body = file.size() - 32;
  const Digest d = sha256(std::span<const std::uint8_t>(file.data(), body));
  require(std::equal(d.begin(), d.end(), file.begin() + static_cast<std::ptrdiff_t>(body)),
          ErrorCode::checksum, "checkpoint: checksum mismatch (corrupt or truncated file)");

  ckpt::Reader r(file.data(), body);
  require(r.str(8, "magic") == std::string(ckpt::kMagic, 8), ErrorCode::parse,
          "checkpoint: bad magic");
  const auto version = r.le<std::uint32_t>("version");
  require(version == ckpt::kVersion, ErrorCode::version,
          "checkpoint: format version " + std::to_string(version) + ", expected " +
              std::to_string(ckpt::kVersion));
  ModelConfig c;
  c.n_layers = r.le<std::uint64_t>("config");
  c.d_model = r.le<std::uint64_t>("config");
  c.d_ffn = r.le<std::uint64_t>("config");
  c.n_heads = r.le<std::uint64_t>("config");
  c.vocab_size = r.le<std::uint64_t>("config");
  const auto kind = r.le<std::uint64_t>("config");
  require(kind <= 1, ErrorCode::config_mismatch, "checkpoint: unknown ffn kind " + std::to_string(kind));
  c.ffn_kind = static_cast<FfnKind>(kind);
  c.max_seq_len = r.le<std::uint64_t>("config");
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorCode::config_mismatch, std::string("checkpoint: invalid config: ") + e.what());
  }

  const auto expected = Parameters::expected_shapes(c);
  const auto count = r.le<std::uint32_t>("tensor count");
  require(count == expected.size(), ErrorCode::config_mismatch,
          "checkpoint: " + std::to_string(count) + " tensors, config implies " +
              std::to_string(expected.size()));
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> dir;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str(r.le<std::uint32_t>("name length"), "tensor name");
    require(r.le<std::uint8_t>("dtype") == ckpt::kDtypeF64, ErrorCode::parse,
            "checkpoint: tensor " + e.name + " has unsupported dtype");
    const auto rank = r.le<std::uint32_t>("rank");
    require(rank <= 2, ErrorCode::parse, "checkpoint: tensor " + e.name + " has rank " + std::to_string(rank));
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.le<std::uint64_t>("dims"));
    e.offset = r.le<std::uint64_t>("offset");
    require(e.name == expected[i].first && e.shape == expected[i].second, ErrorCode::config_mismatch,
            "checkpoint: tensor " + e.name + " " + shape_str(e.shape) + " does not match config (expected " +
                expected[i].first + " " + shape_str(expected[i].second) + ")");
    dir.push_back(std::move(e));
  }

  Parameters p = Parameters::zeros(c);
  const std::size_t data_start = r.pos();
  std::size_t k = 0;
  p.for_each_tensor([&](const std::string&, Tensor& t) {
    r.seek(data_start + dir[k].offset);
    for (auto& v : t.storage()) v = r.f64("tensor data");
    ++k;
  });
  return p;
}

inline void save_checkpoint(const Parameters& params, const std::string& path) {
  const auto bytes = serialize_checkpoint(params);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::io, "cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorCode::io, "write failed for checkpoint " + path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::io, "cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline Parameters load_checkpoint(const std::string& path) {
  return parse_checkpoint(read_file_bytes(path));
}

// Hex SHA-256 of the serialized parameters; identifies a model in provenance records.
inline std::string model_checksum(const Parameters& params) {
  const auto bytes = serialize_checkpoint(params);
  return to_hex(std::span<const std::uint8_t>(bytes).last(32));
}

}  // namespace knowbias
