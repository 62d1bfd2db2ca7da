#include "tlab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include "tlab/error.hpp"

namespace tlab {

namespace {

constexpr char kMagic[] = "TLABCKPT1\n";
constexpr size_t kMagicLen = sizeof(kMagic) - 1;

void write_u64(std::ostream& os, uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, 8);
}

uint64_t read_u64(std::istream& is) {
  char buf[8];
  is.read(buf, 8);
  if (!is) throw InputError("checkpoint: truncated file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  const uint64_t n = read_u64(is);
  if (n > (1ull << 32)) throw InputError("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw InputError("checkpoint: truncated string");
  return s;
}

}  // namespace

const std::vector<double>* Checkpoint::find_array(
    const std::string& name) const {
  for (const auto& [n, data] : arrays)
    if (n == name) return &data;
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InputError("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, static_cast<std::streamsize>(kMagicLen));
  write_string(os, ckpt.config.serialize());
  write_u64(os, ckpt.vocab_words.size());
  for (const auto& w : ckpt.vocab_words) write_string(os, w);
  write_u64(os, ckpt.state.size());
  for (const auto& [k, v] : ckpt.state) {
    write_string(os, k);
    write_string(os, v);
  }
  write_u64(os, ckpt.arrays.size());
  for (const auto& [name, data] : ckpt.arrays) {
    write_string(os, name);
    write_u64(os, data.size());
    for (double x : data) write_u64(os, std::bit_cast<uint64_t>(x));
  }
  os.flush();
  if (!os) throw InputError("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("checkpoint: cannot open: " + path);
  char magic[kMagicLen];
  is.read(magic, static_cast<std::streamsize>(kMagicLen));
  if (!is || std::string(magic, kMagicLen) != kMagic)
    throw InputError("checkpoint: bad magic: " + path);
  Checkpoint ckpt;
  ckpt.config = ModelConfig::deserialize(read_string(is));
  const uint64_t vocab_count = read_u64(is);
  ckpt.vocab_words.reserve(vocab_count);
  for (uint64_t i = 0; i < vocab_count; ++i)
    ckpt.vocab_words.push_back(read_string(is));
  const uint64_t state_count = read_u64(is);
  for (uint64_t i = 0; i < state_count; ++i) {
    std::string k = read_string(is);
    ckpt.state[k] = read_string(is);
  }
  const uint64_t array_count = read_u64(is);
  ckpt.arrays.reserve(array_count);
  for (uint64_t i = 0; i < array_count; ++i) {
    std::string name = read_string(is);
    const uint64_t n = read_u64(is);
    std::vector<double> data(n);
    for (auto& x : data) x = std::bit_cast<double>(read_u64(is));
    ckpt.arrays.emplace_back(std::move(name), std::move(data));
  }
  return ckpt;
}

void store_params(Checkpoint& ckpt, const ParamStore& params) {
  for (const auto& e : params.entries())
    ckpt.arrays.emplace_back(
        e.name, std::vector<double>(e.tensor.data().begin(),
                                    e.tensor.data().end()));
}

void restore_params(Encoder& enc, const Checkpoint& ckpt) {
  for (auto& e : enc.params().entries()) {
    const std::vector<double>* src = ckpt.find_array(e.name);
    if (!src) throw InputError("checkpoint: missing parameter " + e.name);
    if (src->size() != e.tensor.size())
      throw InputError("checkpoint: size mismatch for " + e.name);
    auto dst = e.tensor.mutable_data();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = (*src)[i];
    e.tensor.zero_grad();
  }
}

}  // namespace tlab
