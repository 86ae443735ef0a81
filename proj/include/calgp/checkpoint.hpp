#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "calgp/errors.hpp"
#include "calgp/model.hpp"
#include "calgp/tensor.hpp"

namespace calgp {

// Checkpoint layout (all integers little-endian u64, reals little-endian
// IEEE f64):
//   magic "CALGP001"
//   config_len, config text (the resolved experiment config)
//   n_entries, then per entry: name_len, name, ndim, dims..., data
// Round-trips are bit-exact.

struct Checkpoint {
  std::string config_text;
  std::vector<std::pair<std::string, Tensor>> entries;
};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& in, const std::string& path) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw io_error("checkpoint: truncated file " + path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

inline void put_f64(std::ostream& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(out, v);
}

inline double get_f64(std::istream& in, const std::string& path) {
  const std::uint64_t v = get_u64(in, path);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "CALGP001";

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("checkpoint: cannot write " + path);
  out.write(kCheckpointMagic, 8);
  detail::put_u64(out, ckpt.config_text.size());
  out.write(ckpt.config_text.data(), std::streamsize(ckpt.config_text.size()));
  detail::put_u64(out, ckpt.entries.size());
  for (const auto& [name, tensor] : ckpt.entries) {
    detail::put_u64(out, name.size());
    out.write(name.data(), std::streamsize(name.size()));
    detail::put_u64(out, tensor.rank());
    for (std::size_t d : tensor.shape()) detail::put_u64(out, d);
    for (double v : tensor.values()) detail::put_f64(out, v);
  }
  if (!out) throw io_error("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw io_error("checkpoint: bad magic in " + path + ", expected CALGP001");
  Checkpoint ckpt;
  const auto clen = detail::get_u64(in, path);
  ckpt.config_text.resize(clen);
  in.read(ckpt.config_text.data(), std::streamsize(clen));
  if (!in) throw io_error("checkpoint: truncated file " + path);
  const auto n = detail::get_u64(in, path);
  for (std::uint64_t e = 0; e < n; ++e) {
    const auto nlen = detail::get_u64(in, path);
    std::string name(nlen, '\0');
    in.read(name.data(), std::streamsize(nlen));
    if (!in) throw io_error("checkpoint: truncated file " + path);
    const auto ndim = detail::get_u64(in, path);
    std::vector<std::size_t> dims(ndim);
    std::size_t count = 1;
    for (auto& d : dims) {
      d = detail::get_u64(in, path);
      count *= d;
    }
    std::vector<double> data(count);
    for (auto& v : data) v = detail::get_f64(in, path);
    ckpt.entries.emplace_back(std::move(name), Tensor(std::move(dims), std::move(data)));
  }
  return ckpt;
}

// Full serializable state: trainable parameters plus the frozen spectral
// state (draws, sign diagonals) and covariance parameters per GP layer.
inline std::vector<std::pair<std::string, Tensor>> model_state(CnnGpModel& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& p : model.parameters()) out.emplace_back(p.name, *p.value);
  for (std::size_t l = 0; l < model.gp_layers.size(); ++l) {
    auto& gl = model.gp_layers[l];
    const std::string base = "gp." + std::to_string(l) + ".";
    out.emplace_back(base + "kernel.sigma", Tensor({1}, {gl.fmap.params.sigma}));
    out.emplace_back(base + "kernel.lengthscale_sq",
                     Tensor({gl.fmap.params.lengthscale_sq.size()},
                            gl.fmap.params.lengthscale_sq));
    if (gl.fmap.spectral.mode == SpectralMode::explicit_draw) {
      out.emplace_back(base + "spectral.epsilon", gl.fmap.spectral.epsilon);
      if (!model.learn_omega)
        out.emplace_back(base + "spectral.omega", gl.fmap.spectral.omega);
    } else {
      for (std::size_t b = 0; b < gl.fmap.spectral.blocks.size(); ++b) {
        const auto& blk = gl.fmap.spectral.blocks[b];
        const std::string bb = base + "sorf.block" + std::to_string(b) + ".";
        const std::size_t d = blk.d1.size();
        out.emplace_back(bb + "d1", Tensor({d}, blk.d1));
        out.emplace_back(bb + "d2", Tensor({d}, blk.d2));
        out.emplace_back(bb + "d3", Tensor({d}, blk.d3));
      }
    }
  }
  return out;
}

// Restores state captured by model_state into a model with identical
// architecture. Every entry must match a slot and every slot must be filled.
inline void load_model_state(CnnGpModel& model,
                             const std::vector<std::pair<std::string, Tensor>>& entries) {
  auto take = [&](const std::string& name) -> const Tensor& {
    for (const auto& [n, t] : entries)
      if (n == name) return t;
    throw io_error("checkpoint: missing tensor " + name);
  };
  std::size_t used = 0;
  for (auto& p : model.parameters()) {
    const Tensor& t = take(p.name);
    require(t.shape() == p.value->shape(),
            "checkpoint: shape mismatch for " + p.name + ": stored " +
                shape_to_string(t.shape()) + ", model " +
                shape_to_string(p.value->shape()));
    *p.value = t;
    ++used;
  }
  for (std::size_t l = 0; l < model.gp_layers.size(); ++l) {
    auto& gl = model.gp_layers[l];
    const std::string base = "gp." + std::to_string(l) + ".";
    gl.fmap.params.sigma = take(base + "kernel.sigma")[0];
    const Tensor& ls = take(base + "kernel.lengthscale_sq");
    require(ls.size() == gl.fmap.params.lengthscale_sq.size(),
            "checkpoint: length-scale count mismatch in layer " + std::to_string(l));
    for (std::size_t k = 0; k < ls.size(); ++k)
      gl.fmap.params.lengthscale_sq[k] = ls[k];
    used += 2;
    if (gl.fmap.spectral.mode == SpectralMode::explicit_draw) {
      gl.fmap.spectral.epsilon = take(base + "spectral.epsilon");
      ++used;
      if (!model.learn_omega) {
        gl.fmap.spectral.omega = take(base + "spectral.omega");
        ++used;
      }
    } else {
      double ell = 0.0;
      gl.fmap.params.isotropic_lengthscale(&ell);
      gl.fmap.spectral.inv_lengthscale = 1.0 / ell;
      for (std::size_t b = 0; b < gl.fmap.spectral.blocks.size(); ++b) {
        auto& blk = gl.fmap.spectral.blocks[b];
        const std::string bb = base + "sorf.block" + std::to_string(b) + ".";
        const Tensor& d1 = take(bb + "d1");
        const Tensor& d2 = take(bb + "d2");
        const Tensor& d3 = take(bb + "d3");
        blk.d1.assign(d1.values().begin(), d1.values().end());
        blk.d2.assign(d2.values().begin(), d2.values().end());
        blk.d3.assign(d3.values().begin(), d3.values().end());
        used += 3;
      }
    }
  }
  require(used == entries.size(),
          "checkpoint: " + std::to_string(entries.size() - used) +
              " unused tensors, architecture mismatch");
}

}  // namespace calgp
