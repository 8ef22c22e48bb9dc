#include "vallex/nn/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "vallex/common.hpp"

namespace vallex::nn {

namespace {

constexpr char kMagic[4] = {'V', 'L', 'X', 'C'};
constexpr uint32_t kVersion = 1;

template <typename U>
void put(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(static_cast<uint64_t>(v) >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get(std::istream& in) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) throw FormatError("truncated checkpoint");
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= uint64_t(b[i]) << (8 * i);
  return static_cast<U>(v);
}

void put_string(std::ostream& out, const std::string& s) {
  put<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const uint32_t n = get<uint32_t>(in);
  if (n > (1u << 26)) throw FormatError("implausible string length in checkpoint");
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n)) throw FormatError("truncated checkpoint");
  return s;
}

}  // namespace

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kMagic, 4);
  put<uint32_t>(out, kVersion);
  put_string(out, kind);
  put_string(out, config);
  put<uint64_t>(out, step);
  put_string(out, rng_state);
  put<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    put_string(out, name);
    put<uint32_t>(out, static_cast<uint32_t>(m.rows()));
    put<uint32_t>(out, static_cast<uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      uint32_t bits;
      std::memcpy(&bits, m.data() + i, 4);
      put<uint32_t>(out, bits);
    }
  }
  if (!out) throw Error("write failed: " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint: " + path.string());
  const uint32_t version = get<uint32_t>(in);
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.kind = get_string(in);
  c.config = get_string(in);
  c.step = get<uint64_t>(in);
  c.rng_state = get_string(in);
  const uint32_t count = get<uint32_t>(in);
  for (uint32_t t = 0; t < count; ++t) {
    std::string name = get_string(in);
    const uint32_t rows = get<uint32_t>(in), cols = get<uint32_t>(in);
    if (uint64_t(rows) * cols > (1ull << 28)) throw FormatError("implausible tensor size in checkpoint");
    MatrixF m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const uint32_t bits = get<uint32_t>(in);
      std::memcpy(m.data() + i, &bits, 4);
    }
    c.tensors.emplace_back(std::move(name), std::move(m));
  }
  return c;
}

Checkpoint make_checkpoint(const std::string& kind, const std::string& config, const ParamList<float>& params,
                           uint64_t step, const std::string& rng_state) {
  Checkpoint c;
  c.kind = kind;
  c.config = config;
  c.step = step;
  c.rng_state = rng_state;
  for (const auto& [name, p] : params) c.tensors.emplace_back(name, p->value());
  return c;
}

void restore_parameters(const Checkpoint& ckpt, const ParamList<float>& params) {
  if (ckpt.tensors.size() != params.size())
    throw FormatError("checkpoint has " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, m] = ckpt.tensors[i];
    Parameter<float>& p = *params[i].second;
    if (name != params[i].first || m.rows() != p.rows() || m.cols() != p.cols())
      throw FormatError("checkpoint tensor mismatch at " + params[i].first);
    p.value() = m;
  }
}

}  // namespace vallex::nn
