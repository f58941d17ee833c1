#include "groundling/checkpoint.hpp"

#include <cstring>

#include "groundling/dataset_io.hpp"
#include "groundling/errors.hpp"

namespace groundling {
namespace {

constexpr char kMagic[8] = {'G', 'N', 'D', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_str(std::string& out, const std::string& s) {
  put_u32(out, uint32_t(s.size()));
  out.append(s);
}
void put_f32(std::string& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  const std::string& what;

  void need(size_t n) const {
    if (pos + n > buf.size())
      throw FormatError(what + ": truncated checkpoint");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= uint32_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= uint64_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
    pos += 8;
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  float f32() {
    uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::string out;
  out.append(kMagic, 8);
  put_str(out, c.stage);
  put_u32(out, uint32_t(c.params.tensors.size()));
  for (const auto& [name, t] : c.params.tensors) {
    put_str(out, name);
    put_u32(out, uint32_t(t.rank()));
    for (int d : t.shape) put_u32(out, uint32_t(d));
    for (int64_t i = 0; i < t.numel(); ++i) put_f32(out, t.data[i]);
  }
  put_str(out, c.config_text);
  put_u32(out, uint32_t(c.rng_states.size()));
  for (const auto& [name, state] : c.rng_states) {
    put_str(out, name);
    put_u64(out, state);
  }
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::string buf = read_file(path);
  if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 8) != 0)
    throw BadMagic(path + ": not a checkpoint file");
  Reader r{buf, 8, path};
  Checkpoint c;
  c.stage = r.str();
  uint32_t n_tensors = r.u32();
  for (uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    uint32_t rank = r.u32();
    if (rank > 4) throw FormatError(path + ": tensor " + name + " has rank " +
                                    std::to_string(rank));
    std::vector<int> shape;
    for (uint32_t d = 0; d < rank; ++d) shape.push_back(int(r.u32()));
    Tensor<float> t = Tensor<float>::zeros(shape);
    for (int64_t k = 0; k < t.numel(); ++k) t.data[k] = r.f32();
    c.params.tensors.emplace(std::move(name), std::move(t));
  }
  c.config_text = r.str();
  uint32_t n_rng = r.u32();
  for (uint32_t i = 0; i < n_rng; ++i) {
    std::string name = r.str();
    c.rng_states[name] = r.u64();
  }
  if (r.pos != buf.size())
    throw FormatError(path + ": trailing bytes after checkpoint payload");
  return c;
}

}  // namespace groundling
