#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "cowlab/classify.hpp"
#include "cowlab/volume.hpp"

namespace cowlab {

enum class OutputActivation { sigmoid, identity };

/// Encoder: per entry of `channels`, conv 3^3 (pad 1) + ReLU + max-pool 2.
/// Then flatten and a linear dense layer to the latent. The decoder mirrors
/// it: dense + ReLU, then per level nearest-neighbour x2 upsampling + conv,
/// ReLU between levels and `output` after the last one. With no conv levels
/// both dense layers are linear and the decoder dense maps straight to voxels.
struct CaeArchitecture {
  int input_side = kPatchSide;
  std::vector<int> channels{8, 16, 32};
  int latent_dim = 128;
  OutputActivation output = OutputActivation::sigmoid;

  void validate() const;
  int bottleneck_side() const;
  int flat_size() const;
  nlohmann::json to_json() const;
  static CaeArchitecture from_json(const nlohmann::json& j);
};

/// Activations are (channels x voxels), voxels x-fastest.
template <class T>
using CaeMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using CaeVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// 3^3 convolution with zero padding 1. `w` is (c_out x c_in*27), columns
/// ordered (c_in, dz, dy, dx) with dx fastest.
template <class T>
CaeMat<T> conv3d(const CaeMat<T>& in, int side, const CaeMat<T>& w, const CaeVec<T>& b);

/// 2x2x2 max-pool. `argmax` receives the input voxel chosen for each output.
template <class T>
CaeMat<T> maxpool2(const CaeMat<T>& in, int side, std::vector<int>* argmax);
/// Routes each pooled gradient to its recorded input voxel.
template <class T>
CaeMat<T> maxpool2_backward(const CaeMat<T>& grad_out, int in_side, const std::vector<int>& argmax);

template <class T>
CaeMat<T> upsample2(const CaeMat<T>& in, int side);

/// All weights live in one flat vector in declaration order: encoder convs
/// (w, b), encoder dense (w, b), decoder dense (w, b), decoder convs (w, b).
template <class T>
struct CaeNet {
  CaeArchitecture arch;
  CaeVec<T> params;

  struct Slot {
    Eigen::Index offset;
    Eigen::Index rows;
    Eigen::Index cols;
  };
  std::vector<Slot> slots;

  explicit CaeNet(const CaeArchitecture& a = {});
  Eigen::Map<const CaeMat<T>> tensor(std::size_t i) const {
    return {params.data() + slots[i].offset, slots[i].rows, slots[i].cols};
  }
  Eigen::Map<CaeMat<T>> tensor(std::size_t i) {
    return {params.data() + slots[i].offset, slots[i].rows, slots[i].cols};
  }

  CaeVec<T> encode(const CaeVec<T>& input) const;
  CaeVec<T> decode(const CaeVec<T>& latent) const;
  /// MSE of one reconstruction; adds its gradient into `grad` when non-null.
  T loss_and_gradient(const CaeVec<T>& input, CaeVec<T>* grad) const;

  /// Counts decode() calls and the decoder half of loss_and_gradient().
  mutable std::atomic<long long> decoder_evaluations{0};

  CaeNet(const CaeNet& o) : arch(o.arch), params(o.params), slots(o.slots) {}
  CaeNet& operator=(const CaeNet& o) {
    arch = o.arch;
    params = o.params;
    slots = o.slots;
    return *this;
  }
};

/// He-uniform conv and dense weights, zero biases.
template <class T>
CaeNet<T> cae_init(const CaeArchitecture& arch, std::uint64_t seed);

struct CaeTrainConfig {
  double learning_rate = 1e-3;
  int batch = 8;
  int epochs = 10;
  std::uint64_t seed = 0;
};

struct CaeModel {
  CaeNet<float> net;
  std::vector<double> loss_log;  // per-epoch mean reconstruction MSE
  std::uint64_t seed = 0;
};

struct LatentCode {
  std::vector<float> values;
  std::string patch_id;
  ClassTag label = ClassTag::BN;
};

CaeModel train_cae(const CaeArchitecture& arch, const std::vector<Patch3D>& patches, const CaeTrainConfig& cfg,
                   const std::function<void(int, double)>& on_epoch = {});

LatentCode forward_encode(const CaeModel& m, const Patch3D& p);
std::vector<float> forward_decode(const CaeModel& m, const LatentCode& z);
LabeledDataset encode_dataset(const CaeModel& m, const std::vector<Patch3D>& patches);

/// Max relative error between the analytic gradient of the mean loss over
/// `inputs` and central differences with step `eps`.
double cae_gradient_check(const CaeNet<double>& net, const std::vector<CaeVec<double>>& inputs, double eps = 1e-4);

std::string patch_id(const Patch3D& p);

/// Binary: magic line, u32 header length, architecture JSON, LE float32 params.
void write_cae(const CaeModel& m, const std::filesystem::path& path);
CaeModel read_cae(const std::filesystem::path& path);
void write_loss_log(const CaeModel& m, const std::filesystem::path& csv);

}  // namespace cowlab
