#include "vla3d/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace vla3d::nn {
namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  bool done() const { return pos_ == b_.size(); }
  std::size_t pos() const { return pos_; }

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) throw format_error(std::string("truncated tensor file while reading ") + what, pos_);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_tensor_records(const TensorRecords& records) {
  std::vector<std::uint8_t> out(std::begin(kTensorMagic), std::end(kTensorMagic));
  put_u32(out, kTensorFormatVersion);
  for (const auto& [name, t] : records) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.storage()) put_f64(out, v);
  }
  return out;
}

TensorRecords decode_tensor_records(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::string magic = r.bytes(sizeof(kTensorMagic), "magic");
  if (std::memcmp(magic.data(), kTensorMagic, sizeof(kTensorMagic)) != 0) throw format_error("bad tensor file magic", 0);
  const std::size_t vpos = r.pos();
  const std::uint32_t version = r.u32("version");
  if (version != kTensorFormatVersion) {
    throw format_error("unsupported tensor file version " + std::to_string(version), vpos);
  }
  TensorRecords out;
  while (!r.done()) {
    const std::uint32_t len = r.u32("name length");
    std::string name = r.bytes(len, "name");
    const std::size_t rpos = r.pos();
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw format_error("implausible tensor rank " + std::to_string(rank), rpos);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32("dims"));
    const std::size_t n = shape_numel(shape);
    r.need(n * 8, "payload");
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64("payload");
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

void write_tensor_file(const std::filesystem::path& path, const TensorRecords& records) {
  const auto bytes = encode_tensor_records(records);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

TensorRecords read_tensor_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensor_records(bytes);
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store) {
  TensorRecords recs;
  for (const auto& [name, p] : store.all()) recs.emplace_back(name, p.value);
  write_tensor_file(path, recs);
}

void load_checkpoint(const std::filesystem::path& path, ParamStore& store) {
  std::map<std::string, Tensor> loaded;
  for (auto& [name, t] : read_tensor_file(path)) {
    if (!loaded.emplace(name, std::move(t)).second) throw format_error("duplicate parameter '" + name + "' in checkpoint");
  }
  for (const auto& [name, t] : loaded) {
    if (!store.contains(name)) throw format_error("checkpoint has unexpected parameter '" + name + "'");
    if (store.value(name).shape() != t.shape()) {
      throw format_error("checkpoint parameter '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                         shape_str(store.value(name).shape()));
    }
  }
  for (auto& [name, p] : store.all()) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw format_error("checkpoint is missing parameter '" + name + "'");
    p.value = it->second;
  }
}

}  // namespace vla3d::nn
