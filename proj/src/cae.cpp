#include "cowlab/cae.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "cowlab/rng.hpp"

namespace cowlab {

using nlohmann::json;

namespace {

inline int vox(int x, int y, int z, int side) { return x + side * (y + side * z); }

template <class T>
CaeMat<T> im2col(const CaeMat<T>& in, int side) {
  const auto c_in = in.rows();
  const int s3 = side * side * side;
  CaeMat<T> col = CaeMat<T>::Zero(c_in * 27, s3);
  for (int z = 0; z < side; ++z)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const int v = vox(x, y, z, side);
        T* dst = col.col(v).data();
        int o = 0;
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx, ++o) {
              const int xx = x + dx, yy = y + dy, zz = z + dz;
              if (xx < 0 || yy < 0 || zz < 0 || xx >= side || yy >= side || zz >= side) continue;
              const T* src = in.col(vox(xx, yy, zz, side)).data();
              for (Eigen::Index c = 0; c < c_in; ++c) dst[c * 27 + o] = src[c];
            }
      }
  return col;
}

template <class T>
CaeMat<T> col2im(const CaeMat<T>& col, int c_in, int side) {
  const int s3 = side * side * side;
  CaeMat<T> out = CaeMat<T>::Zero(c_in, s3);
  for (int z = 0; z < side; ++z)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const T* src = col.col(vox(x, y, z, side)).data();
        int o = 0;
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx, ++o) {
              const int xx = x + dx, yy = y + dy, zz = z + dz;
              if (xx < 0 || yy < 0 || zz < 0 || xx >= side || yy >= side || zz >= side) continue;
              T* dst = out.col(vox(xx, yy, zz, side)).data();
              for (int c = 0; c < c_in; ++c) dst[c] += src[c * 27 + o];
            }
      }
  return out;
}

template <class T>
CaeMat<T> upsample2_backward(const CaeMat<T>& g, int out_side) {
  const int in_side = out_side / 2;
  CaeMat<T> down = CaeMat<T>::Zero(g.rows(), in_side * in_side * in_side);
  for (int z = 0; z < out_side; ++z)
    for (int y = 0; y < out_side; ++y)
      for (int x = 0; x < out_side; ++x) down.col(vox(x / 2, y / 2, z / 2, in_side)) += g.col(vox(x, y, z, out_side));
  return down;
}

template <class T>
T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

// Flat-vector slot indices: 2 per encoder conv, 2 dense, 2 dense, 2 per decoder conv.
struct SlotIndex {
  std::size_t levels;
  std::size_t enc_w(std::size_t l) const { return 2 * l; }
  std::size_t enc_dense() const { return 2 * levels; }
  std::size_t dec_dense() const { return 2 * levels + 2; }
  std::size_t dec_w(std::size_t l) const { return 2 * levels + 4 + 2 * l; }
};

void write_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    const int c = is.get();
    if (c == EOF) throw DataError("truncated CAE weight file");
    v |= static_cast<std::uint32_t>(c & 0xff) << (8 * i);
  }
  return v;
}

constexpr const char* kCaeMagic = "COWLAB-CAE\n";

}  // namespace

// ---- Architecture -------------------------------------------------------------

void CaeArchitecture::validate() const {
  if (input_side < 1) throw ConfigError("CAE input side must be positive");
  if (latent_dim < 1) throw ConfigError("CAE latent_dim must be positive");
  for (int c : channels)
    if (c < 1) throw ConfigError("CAE channel counts must be positive");
  if (input_side % (1 << channels.size()) != 0)
    throw ConfigError("CAE input side must be divisible by 2^levels");
}

int CaeArchitecture::bottleneck_side() const { return input_side >> channels.size(); }

int CaeArchitecture::flat_size() const {
  const int b = bottleneck_side();
  return channels.empty() ? input_side * input_side * input_side : channels.back() * b * b * b;
}

json CaeArchitecture::to_json() const {
  return {{"input_side", input_side},
          {"channels", channels},
          {"latent_dim", latent_dim},
          {"output", output == OutputActivation::sigmoid ? "sigmoid" : "identity"}};
}

CaeArchitecture CaeArchitecture::from_json(const json& j) {
  CaeArchitecture a;
  try {
    if (j.contains("input_side")) a.input_side = j.at("input_side").get<int>();
    if (j.contains("channels")) a.channels = j.at("channels").get<std::vector<int>>();
    if (j.contains("latent_dim")) a.latent_dim = j.at("latent_dim").get<int>();
    if (j.contains("output")) {
      const auto s = j.at("output").get<std::string>();
      if (s == "sigmoid") a.output = OutputActivation::sigmoid;
      else if (s == "identity") a.output = OutputActivation::identity;
      else throw ConfigError("unknown CAE output activation: " + s);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad CAE architecture: ") + e.what());
  }
  a.validate();
  return a;
}

// ---- Operators ----------------------------------------------------------------

template <class T>
CaeMat<T> conv3d(const CaeMat<T>& in, int side, const CaeMat<T>& w, const CaeVec<T>& b) {
  if (w.cols() != in.rows() * 27 || b.size() != w.rows()) throw DataError("conv3d weight shape mismatch");
  CaeMat<T> out = w * im2col(in, side);
  out.colwise() += b;
  return out;
}

template <class T>
CaeMat<T> maxpool2(const CaeMat<T>& in, int side, std::vector<int>* argmax) {
  const int half = side / 2;
  const auto c_n = in.rows();
  CaeMat<T> out(c_n, half * half * half);
  if (argmax) argmax->assign(static_cast<std::size_t>(out.size()), 0);
  for (int z = 0; z < half; ++z)
    for (int y = 0; y < half; ++y)
      for (int x = 0; x < half; ++x) {
        const int o = vox(x, y, z, half);
        for (Eigen::Index c = 0; c < c_n; ++c) {
          int best = vox(2 * x, 2 * y, 2 * z, side);
          for (int k = 1; k < 8; ++k) {
            const int v = vox(2 * x + (k & 1), 2 * y + ((k >> 1) & 1), 2 * z + (k >> 2), side);
            if (in(c, v) > in(c, best)) best = v;
          }
          out(c, o) = in(c, best);
          if (argmax) (*argmax)[static_cast<std::size_t>(c + c_n * o)] = best;
        }
      }
  return out;
}

template <class T>
CaeMat<T> maxpool2_backward(const CaeMat<T>& grad_out, int in_side, const std::vector<int>& argmax) {
  const auto c_n = grad_out.rows();
  CaeMat<T> g = CaeMat<T>::Zero(c_n, in_side * in_side * in_side);
  for (Eigen::Index o = 0; o < grad_out.cols(); ++o)
    for (Eigen::Index c = 0; c < c_n; ++c) g(c, argmax[static_cast<std::size_t>(c + c_n * o)]) += grad_out(c, o);
  return g;
}

template <class T>
CaeMat<T> upsample2(const CaeMat<T>& in, int side) {
  const int out_side = side * 2;
  CaeMat<T> out(in.rows(), out_side * out_side * out_side);
  for (int z = 0; z < out_side; ++z)
    for (int y = 0; y < out_side; ++y)
      for (int x = 0; x < out_side; ++x) out.col(vox(x, y, z, out_side)) = in.col(vox(x / 2, y / 2, z / 2, side));
  return out;
}

// ---- Network ------------------------------------------------------------------

template <class T>
CaeNet<T>::CaeNet(const CaeArchitecture& a) : arch(a) {
  arch.validate();
  Eigen::Index off = 0;
  auto add = [&](Eigen::Index r, Eigen::Index c) {
    slots.push_back({off, r, c});
    off += r * c;
  };
  int c_prev = 1;
  for (int c : arch.channels) {
    add(c, c_prev * 27);
    add(c, 1);
    c_prev = c;
  }
  add(arch.latent_dim, arch.flat_size());
  add(arch.latent_dim, 1);
  add(arch.flat_size(), arch.latent_dim);
  add(arch.flat_size(), 1);
  const auto levels = arch.channels.size();
  for (std::size_t l = 0; l < levels; ++l) {
    const int c_in = arch.channels[levels - 1 - l];
    const int c_out = l + 1 < levels ? arch.channels[levels - 2 - l] : 1;
    add(c_out, c_in * 27);
    add(c_out, 1);
  }
  params = CaeVec<T>::Zero(off);
}

template <class T>
CaeVec<T> CaeNet<T>::encode(const CaeVec<T>& input) const {
  const int s = arch.input_side;
  if (input.size() != static_cast<Eigen::Index>(s) * s * s) throw DataError("CAE input shape mismatch");
  const SlotIndex si{arch.channels.size()};
  CaeMat<T> a = input.transpose();
  int side = s;
  for (std::size_t l = 0; l < si.levels; ++l) {
    const CaeMat<T> pre = conv3d<T>(a, side, tensor(si.enc_w(l)), tensor(si.enc_w(l) + 1));
    a = maxpool2<T>(pre.cwiseMax(T(0)), side, nullptr);
    side /= 2;
  }
  const Eigen::Map<const CaeVec<T>> flat(a.data(), a.size());
  return tensor(si.enc_dense()) * flat + CaeVec<T>(tensor(si.enc_dense() + 1));
}

template <class T>
CaeVec<T> CaeNet<T>::decode(const CaeVec<T>& latent) const {
  if (latent.size() != arch.latent_dim) throw DataError("CAE latent length mismatch");
  ++decoder_evaluations;
  const SlotIndex si{arch.channels.size()};
  CaeVec<T> h = tensor(si.dec_dense()) * latent + CaeVec<T>(tensor(si.dec_dense() + 1));
  auto finish = [&](auto&& v) {
    if (arch.output == OutputActivation::sigmoid) return CaeVec<T>(v.unaryExpr([](T t) { return sigmoid(t); }));
    return CaeVec<T>(v);
  };
  if (si.levels == 0) return finish(h);
  h = h.cwiseMax(T(0));
  int side = arch.bottleneck_side();
  CaeMat<T> a = Eigen::Map<const CaeMat<T>>(h.data(), arch.channels.back(), side * side * side);
  for (std::size_t l = 0; l < si.levels; ++l) {
    const CaeMat<T> u = upsample2<T>(a, side);
    side *= 2;
    a = conv3d<T>(u, side, tensor(si.dec_w(l)), tensor(si.dec_w(l) + 1));
    if (l + 1 < si.levels) a = a.cwiseMax(T(0));
  }
  return finish(Eigen::Map<const CaeVec<T>>(a.data(), a.size()));
}

template <class T>
T CaeNet<T>::loss_and_gradient(const CaeVec<T>& input, CaeVec<T>* grad) const {
  const int s = arch.input_side;
  const Eigen::Index n_vox = static_cast<Eigen::Index>(s) * s * s;
  if (input.size() != n_vox) throw DataError("CAE input shape mismatch");
  const SlotIndex si{arch.channels.size()};
  const std::size_t levels = si.levels;

  // Encoder forward with caches.
  std::vector<CaeMat<T>> enc_col(levels), enc_pre(levels);
  std::vector<std::vector<int>> enc_arg(levels);
  CaeMat<T> a = input.transpose();
  int side = s;
  for (std::size_t l = 0; l < levels; ++l) {
    enc_col[l] = im2col(a, side);
    enc_pre[l] = tensor(si.enc_w(l)) * enc_col[l];
    enc_pre[l].colwise() += CaeVec<T>(tensor(si.enc_w(l) + 1));
    a = maxpool2<T>(enc_pre[l].cwiseMax(T(0)), side, &enc_arg[l]);
    side /= 2;
  }
  const CaeVec<T> flat = Eigen::Map<const CaeVec<T>>(a.data(), a.size());
  const CaeVec<T> z = tensor(si.enc_dense()) * flat + CaeVec<T>(tensor(si.enc_dense() + 1));

  // Decoder forward.
  ++decoder_evaluations;
  const CaeVec<T> h_pre = tensor(si.dec_dense()) * z + CaeVec<T>(tensor(si.dec_dense() + 1));
  std::vector<CaeMat<T>> dec_col(levels), dec_pre(levels);
  CaeVec<T> out;
  int bside = arch.bottleneck_side();
  if (levels == 0) {
    out = h_pre;
  } else {
    const CaeVec<T> h = h_pre.cwiseMax(T(0));
    CaeMat<T> d = Eigen::Map<const CaeMat<T>>(h.data(), arch.channels.back(), bside * bside * bside);
    int dside = bside;
    for (std::size_t l = 0; l < levels; ++l) {
      const CaeMat<T> u = upsample2<T>(d, dside);
      dside *= 2;
      dec_col[l] = im2col(u, dside);
      dec_pre[l] = tensor(si.dec_w(l)) * dec_col[l];
      dec_pre[l].colwise() += CaeVec<T>(tensor(si.dec_w(l) + 1));
      d = l + 1 < levels ? CaeMat<T>(dec_pre[l].cwiseMax(T(0))) : dec_pre[l];
    }
    out = Eigen::Map<const CaeVec<T>>(d.data(), d.size());
  }
  if (arch.output == OutputActivation::sigmoid) out = out.unaryExpr([](T t) { return sigmoid(t); });
  const CaeVec<T> diff = out - input;
  const T loss = diff.squaredNorm() / static_cast<T>(n_vox);
  if (!grad) return loss;

  if (grad->size() != params.size()) *grad = CaeVec<T>::Zero(params.size());
  auto g_tensor = [&](std::size_t i) {
    return Eigen::Map<CaeMat<T>>(grad->data() + slots[i].offset, slots[i].rows, slots[i].cols);
  };

  CaeVec<T> g_out = diff * (T(2) / static_cast<T>(n_vox));
  if (arch.output == OutputActivation::sigmoid) g_out = g_out.cwiseProduct(out.cwiseProduct(CaeVec<T>::Ones(out.size()) - out));

  // Decoder backward.
  CaeVec<T> g_h;
  if (levels == 0) {
    g_h = g_out;
  } else {
    int dside = s;
    CaeMat<T> g = Eigen::Map<const CaeMat<T>>(g_out.data(), 1, n_vox);
    for (std::size_t li = levels; li-- > 0;) {
      if (li + 1 < levels) g = g.cwiseProduct(CaeMat<T>((dec_pre[li].array() > T(0)).template cast<T>()));
      g_tensor(si.dec_w(li)).noalias() += g * dec_col[li].transpose();
      g_tensor(si.dec_w(li) + 1) += g.rowwise().sum();
      const CaeMat<T> g_col = tensor(si.dec_w(li)).transpose() * g;
      const int c_in = static_cast<int>(tensor(si.dec_w(li)).cols() / 27);
      g = upsample2_backward<T>(col2im<T>(g_col, c_in, dside), dside);
      dside /= 2;
    }
    g_h = Eigen::Map<const CaeVec<T>>(g.data(), g.size());
    g_h = g_h.cwiseProduct(CaeVec<T>((h_pre.array() > T(0)).template cast<T>()));
  }
  g_tensor(si.dec_dense()).noalias() += g_h * z.transpose();
  g_tensor(si.dec_dense() + 1) += g_h;
  const CaeVec<T> g_z = tensor(si.dec_dense()).transpose() * g_h;

  // Encoder backward.
  g_tensor(si.enc_dense()).noalias() += g_z * flat.transpose();
  g_tensor(si.enc_dense() + 1) += g_z;
  if (levels > 0) {
    const CaeVec<T> g_flat = tensor(si.enc_dense()).transpose() * g_z;
    CaeMat<T> g = Eigen::Map<const CaeMat<T>>(g_flat.data(), arch.channels.back(), bside * bside * bside);
    int eside = bside;
    for (std::size_t li = levels; li-- > 0;) {
      eside *= 2;
      g = maxpool2_backward<T>(g, eside, enc_arg[li]);
      g = g.cwiseProduct(CaeMat<T>((enc_pre[li].array() > T(0)).template cast<T>()));
      g_tensor(si.enc_w(li)).noalias() += g * enc_col[li].transpose();
      g_tensor(si.enc_w(li) + 1) += g.rowwise().sum();
      if (li > 0) {
        const CaeMat<T> g_col = tensor(si.enc_w(li)).transpose() * g;
        g = col2im<T>(g_col, arch.channels[li - 1], eside);
      }
    }
  }
  return loss;
}

template <class T>
CaeNet<T> cae_init(const CaeArchitecture& arch, std::uint64_t seed) {
  CaeNet<T> net(arch);
  std::mt19937_64 rng(seed);
  // Weights are the even slots; biases stay zero.
  for (std::size_t i = 0; i < net.slots.size(); i += 2) {
    const auto& s = net.slots[i];
    const double lim = std::sqrt(6.0 / static_cast<double>(s.cols));
    for (Eigen::Index k = 0; k < s.rows * s.cols; ++k) net.params(s.offset + k) = static_cast<T>(uniform(rng, -lim, lim));
  }
  return net;
}

template CaeMat<float> conv3d<float>(const CaeMat<float>&, int, const CaeMat<float>&, const CaeVec<float>&);
template CaeMat<double> conv3d<double>(const CaeMat<double>&, int, const CaeMat<double>&, const CaeVec<double>&);
template CaeMat<float> maxpool2<float>(const CaeMat<float>&, int, std::vector<int>*);
template CaeMat<double> maxpool2<double>(const CaeMat<double>&, int, std::vector<int>*);
template CaeMat<float> maxpool2_backward<float>(const CaeMat<float>&, int, const std::vector<int>&);
template CaeMat<double> maxpool2_backward<double>(const CaeMat<double>&, int, const std::vector<int>&);
template CaeMat<float> upsample2<float>(const CaeMat<float>&, int);
template CaeMat<double> upsample2<double>(const CaeMat<double>&, int);
template struct CaeNet<float>;
template struct CaeNet<double>;
template CaeNet<float> cae_init<float>(const CaeArchitecture&, std::uint64_t);
template CaeNet<double> cae_init<double>(const CaeArchitecture&, std::uint64_t);

// ---- Training and inference ---------------------------------------------------

namespace {

CaeVec<float> patch_vector(const Patch3D& p, int side) {
  if (p.side != side || p.data.size() != static_cast<std::size_t>(side) * side * side)
    throw DataError("patch shape does not match the CAE input");
  return Eigen::Map<const CaeVec<float>>(p.data.data(), static_cast<Eigen::Index>(p.data.size()));
}

}  // namespace

CaeModel train_cae(const CaeArchitecture& arch, const std::vector<Patch3D>& patches, const CaeTrainConfig& cfg,
                   const std::function<void(int, double)>& on_epoch) {
  if (patches.empty()) throw DataError("CAE training needs at least one patch");
  if (cfg.batch < 1 || cfg.epochs < 1 || !(cfg.learning_rate > 0.0)) throw ConfigError("invalid CAE training config");
  CaeModel m{cae_init<float>(arch, derive_seed(cfg.seed, 0)), {}, cfg.seed};
  std::vector<CaeVec<float>> inputs;
  inputs.reserve(patches.size());
  for (const auto& p : patches) inputs.push_back(patch_vector(p, arch.input_side));

  const Eigen::Index np = m.net.params.size();
  CaeVec<float> mom = CaeVec<float>::Zero(np), vel = CaeVec<float>::Zero(np), grad(np);
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long long t = 0;
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(cfg.seed, 1));
  const auto batch = static_cast<std::size_t>(cfg.batch);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    double total = 0.0;
    for (std::size_t s = 0; s < order.size(); s += batch) {
      const std::size_t e = std::min(s + batch, order.size());
      grad.setZero();
      for (std::size_t q = s; q < e; ++q) total += m.net.loss_and_gradient(inputs[order[q]], &grad);
      grad /= static_cast<float>(e - s);
      ++t;
      mom = static_cast<float>(b1) * mom + static_cast<float>(1.0 - b1) * grad;
      vel = static_cast<float>(b2) * vel + static_cast<float>(1.0 - b2) * grad.cwiseProduct(grad);
      const auto c1 = static_cast<float>(1.0 - std::pow(b1, static_cast<double>(t)));
      const auto c2 = static_cast<float>(1.0 - std::pow(b2, static_cast<double>(t)));
      m.net.params.array() -= static_cast<float>(cfg.learning_rate) * (mom.array() / c1) /
                              ((vel.array() / c2).sqrt() + static_cast<float>(eps));
    }
    const double mse = total / static_cast<double>(inputs.size());
    if (!std::isfinite(mse) || !m.net.params.allFinite())
      throw NumericError("CAE training diverged at epoch " + std::to_string(epoch));
    m.loss_log.push_back(mse);
    if (on_epoch) on_epoch(epoch, mse);
  }
  return m;
}

std::string patch_id(const Patch3D& p) {
  return p.source_volume_id + "@" + std::to_string(p.center_voxel[0]) + "," + std::to_string(p.center_voxel[1]) +
         "," + std::to_string(p.center_voxel[2]);
}

LatentCode forward_encode(const CaeModel& m, const Patch3D& p) {
  const CaeVec<float> z = m.net.encode(patch_vector(p, m.net.arch.input_side));
  return {std::vector<float>(z.data(), z.data() + z.size()), patch_id(p), p.label};
}

std::vector<float> forward_decode(const CaeModel& m, const LatentCode& z) {
  const CaeVec<float> out =
      m.net.decode(Eigen::Map<const CaeVec<float>>(z.values.data(), static_cast<Eigen::Index>(z.values.size())));
  return {out.data(), out.data() + out.size()};
}

LabeledDataset encode_dataset(const CaeModel& m, const std::vector<Patch3D>& patches) {
  LabeledDataset ds;
  ds.provenance = FeatureProvenance::latent;
  ds.x.resize(static_cast<Eigen::Index>(patches.size()), m.net.arch.latent_dim);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const LatentCode z = forward_encode(m, patches[i]);
    for (std::size_t k = 0; k < z.values.size(); ++k)
      ds.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = z.values[k];
    ds.y.push_back(patches[i].label);
  }
  return ds;
}

double cae_gradient_check(const CaeNet<double>& net, const std::vector<CaeVec<double>>& inputs, double eps) {
  if (inputs.empty()) return 0.0;
  auto mean_loss = [&](const CaeNet<double>& n, CaeVec<double>* g) {
    double total = 0.0;
    for (const auto& x : inputs) total += n.loss_and_gradient(x, g);
    if (g) *g /= static_cast<double>(inputs.size());
    return total / static_cast<double>(inputs.size());
  };
  CaeVec<double> analytic = CaeVec<double>::Zero(net.params.size());
  mean_loss(net, &analytic);
  CaeNet<double> probe = net;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < net.params.size(); ++i) {
    probe.params(i) = net.params(i) + eps;
    const double up = mean_loss(probe, nullptr);
    probe.params(i) = net.params(i) - eps;
    const double down = mean_loss(probe, nullptr);
    probe.params(i) = net.params(i);
    const double numeric = (up - down) / (2.0 * eps);
    const double scale = std::max({std::abs(numeric), std::abs(analytic(i)), 1e-7});
    worst = std::max(worst, std::abs(numeric - analytic(i)) / scale);
  }
  return worst;
}

// ---- Serialization --------------------------------------------------------------

void write_cae(const CaeModel& m, const std::filesystem::path& path) {
  json shapes = json::array();
  for (const auto& s : m.net.slots) shapes.push_back({s.rows, s.cols});
  const json header{{"format_version", 1},
                    {"architecture", m.net.arch.to_json()},
                    {"seed", m.seed},
                    {"n_params", m.net.params.size()},
                    {"tensors", shapes},
                    {"loss_log", m.loss_log}};
  const std::string h = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write CAE weights to " + path.string());
  os << kCaeMagic;
  write_u32(os, static_cast<std::uint32_t>(h.size()));
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (Eigen::Index i = 0; i < m.net.params.size(); ++i) write_u32(os, std::bit_cast<std::uint32_t>(m.net.params(i)));
  if (!os) throw DataError("failed writing CAE weights to " + path.string());
}

CaeModel read_cae(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open CAE weights " + path.string());
  std::string magic(std::char_traits<char>::length(kCaeMagic), '\0');
  is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (magic != kCaeMagic) throw DataError("not a CAE weight file: " + path.string());
  const std::uint32_t len = read_u32(is);
  std::string h(len, '\0');
  is.read(h.data(), static_cast<std::streamsize>(len));
  if (!is) throw DataError("truncated CAE header");
  json header;
  try {
    header = json::parse(h);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed CAE header: ") + e.what());
  }
  CaeModel m{CaeNet<float>(CaeArchitecture::from_json(header.at("architecture"))), {}, 0};
  m.seed = header.value("seed", std::uint64_t{0});
  m.loss_log = header.value("loss_log", std::vector<double>{});
  if (header.at("n_params").get<Eigen::Index>() != m.net.params.size())
    throw DataError("CAE parameter count does not match its architecture");
  for (Eigen::Index i = 0; i < m.net.params.size(); ++i) m.net.params(i) = std::bit_cast<float>(read_u32(is));
  if (!m.net.params.allFinite()) throw DataError("CAE weights contain non-finite values");
  return m;
}

void write_loss_log(const CaeModel& m, const std::filesystem::path& csv) {
  std::ofstream os(csv);
  if (!os) throw DataError("cannot write " + csv.string());
  os << "epoch,mse\n";
  char buf[64];
  for (std::size_t e = 0; e < m.loss_log.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", e + 1, m.loss_log[e]);
    os << buf;
  }
}

}  // namespace cowlab
