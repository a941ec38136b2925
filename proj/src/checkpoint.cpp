#include "cguard/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace cguard {

namespace {

constexpr char kMagic[4] = {'P', 'M', 'D', 'N'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_f64(std::ostream& out, double v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
double read_f64(std::istream& in) {
  double v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

std::uint64_t mdn_seen_batches(Layer& layer) {
  if (auto* mdn = dynamic_cast<MdnLayer*>(&layer)) return mdn->state().seen_batches;
  return 0;
}

}  // namespace

void save_checkpoint(Network& net, NormMode norm_mode, bool with_intercept,
                     const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::IoError, "cannot write checkpoint " + path);

  out.write(kMagic, 4);
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(net.layer_count()));
  write_u32(out, static_cast<std::uint32_t>(net.meta_cols()));
  write_u32(out, static_cast<std::uint32_t>(norm_mode));
  write_u32(out, with_intercept ? 1u : 0u);
  write_u64(out, net.seed());
  write_u64(out, net.feature_probe() == SIZE_MAX ? UINT64_MAX : net.feature_probe());
  write_u32(out, static_cast<std::uint32_t>(net.input_shape().size()));
  for (std::size_t d : net.input_shape()) write_u64(out, d);

  // Layer specs as tag-length-value records.
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    const LayerSpec spec = net.layer(i).spec();
    const std::uint8_t tag = static_cast<std::uint8_t>(spec.kind);
    out.write(reinterpret_cast<const char*>(&tag), 1);
    const std::uint32_t len = 3 * sizeof(std::uint64_t) + sizeof(double);
    write_u32(out, len);
    write_u64(out, spec.a);
    write_u64(out, spec.b);
    write_f64(out, spec.momentum);
    write_u64(out, mdn_seen_batches(net.layer(i)));
  }

  // Little-endian float32 blobs, layer order, each prefixed by count.
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    for (Tensor* t : net.layer(i).state_tensors()) {
      write_u64(out, t->size());
      std::vector<float> blob(t->size());
      for (std::size_t j = 0; j < t->size(); ++j) blob[j] = static_cast<float>((*t)[j]);
      out.write(reinterpret_cast<const char*>(blob.data()),
                static_cast<std::streamsize>(blob.size() * sizeof(float)));
    }
  }
  require(out.good(), ErrorCode::IoError, "short write on checkpoint " + path);
}

ModelBundle load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::IoError, "cannot read checkpoint " + path);

  char magic[4];
  in.read(magic, 4);
  require(in.good() && std::memcmp(magic, kMagic, 4) == 0, ErrorCode::ParseError,
          "not a PMDN checkpoint: " + path);
  const std::uint32_t version = read_u32(in);
  require(version == kVersion, ErrorCode::ParseError,
          "unsupported checkpoint version " + std::to_string(version));

  const std::uint32_t layer_count = read_u32(in);
  const std::uint32_t meta_cols = read_u32(in);
  const auto norm_mode = static_cast<NormMode>(read_u32(in));
  const bool with_intercept = read_u32(in) != 0;
  const std::uint64_t seed = read_u64(in);
  const std::uint64_t probe = read_u64(in);
  const std::uint32_t rank = read_u32(in);
  std::vector<std::size_t> input_shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) input_shape[i] = read_u64(in);

  std::vector<LayerSpec> specs;
  std::vector<std::uint64_t> seen(layer_count, 0);
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    std::uint8_t tag = 0;
    in.read(reinterpret_cast<char*>(&tag), 1);
    const std::uint32_t len = read_u32(in);
    require(len == 3 * sizeof(std::uint64_t) + sizeof(double), ErrorCode::ParseError,
            "unexpected layer record length");
    LayerSpec spec{static_cast<LayerKind>(tag), 0, 0, 0.0};
    spec.a = read_u64(in);
    spec.b = read_u64(in);
    spec.momentum = read_f64(in);
    seen[i] = read_u64(in);
    specs.push_back(spec);
  }
  require(in.good(), ErrorCode::ParseError, "truncated checkpoint header");

  ModelBundle bundle{Network(specs, input_shape, meta_cols, seed), norm_mode, with_intercept};
  if (probe != UINT64_MAX) bundle.net.set_feature_probe(probe);

  for (std::uint32_t i = 0; i < layer_count; ++i) {
    for (Tensor* t : bundle.net.layer(i).state_tensors()) {
      const std::uint64_t count = read_u64(in);
      require(count == t->size(), ErrorCode::ParseError,
              "checkpoint blob size mismatch in layer " + std::to_string(i));
      std::vector<float> blob(count);
      in.read(reinterpret_cast<char*>(blob.data()),
              static_cast<std::streamsize>(count * sizeof(float)));
      require(in.good(), ErrorCode::ParseError, "truncated checkpoint blob");
      for (std::size_t j = 0; j < count; ++j) (*t)[j] = static_cast<double>(blob[j]);
    }
    if (auto* mdn = dynamic_cast<MdnLayer*>(&bundle.net.layer(i))) {
      mdn->state().seen_batches = seen[i];
    }
  }
  return bundle;
}

}  // namespace cguard
