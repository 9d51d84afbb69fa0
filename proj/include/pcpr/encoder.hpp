#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "pcpr/types.hpp"

namespace pcpr {

/// Shape and init seed of the descriptor network: a shared per-point MLP
/// (rectified-linear), channel-wise max pooling over points, and a final
/// affine map to the descriptor space. Descriptors are NOT length-normalized
/// — retrieval and the losses operate on raw L2 distances.
struct EncoderConfig {
  int in_dim = 3;
  std::vector<int> hidden_dims{32, 64};
  int descriptor_dim = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (in_dim < 1) throw InvalidSpec("encoder config: in_dim must be >= 1");
    if (hidden_dims.empty()) throw InvalidSpec("encoder config: need at least one hidden layer");
    for (int w : hidden_dims) {
      if (w < 1) throw InvalidSpec("encoder config: hidden widths must be >= 1");
    }
    if (descriptor_dim < 2) throw InvalidSpec("encoder config: descriptor_dim must be >= 2");
  }

  /// Layer widths including input and output: in_dim, hidden..., descriptor_dim.
  std::vector<int> layer_widths() const {
    std::vector<int> w;
    w.reserve(hidden_dims.size() + 2);
    w.push_back(in_dim);
    w.insert(w.end(), hidden_dims.begin(), hidden_dims.end());
    w.push_back(descriptor_dim);
    return w;
  }

  bool operator==(const EncoderConfig&) const = default;
};

/// True when two configs describe the same parameter shapes (seed ignored).
inline bool same_shape(const EncoderConfig& a, const EncoderConfig& b) {
  return a.in_dim == b.in_dim && a.hidden_dims == b.hidden_dims &&
         a.descriptor_dim == b.descriptor_dim;
}

/// Weights and biases of all layers, float64. weights[l] is (out x in) for
/// layer l; the last layer is the pooled-feature -> descriptor affine map.
/// Also used to carry parameter gradients (same shapes).
struct EncoderParams {
  EncoderConfig config;
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;

  Eigen::Index param_count() const;
  /// Row-major weights then bias, layer by layer. Round-trips exactly.
  Eigen::VectorXd flatten() const;
  static EncoderParams unflatten(const EncoderConfig& config,
                                 const Eigen::Ref<const Eigen::VectorXd>& flat);
  /// All-zero parameters of the same shape (gradient accumulators).
  static EncoderParams zeros_like(const EncoderParams& p);

  bool same_values(const EncoderParams& other) const;
};

/// Deterministic init: weights uniform in ±1/sqrt(fan_in), biases zero.
EncoderParams init_params(const EncoderConfig& config);

/// Descriptors for one batch, row per input cloud, with provenance.
struct DescriptorBatch {
  Eigen::MatrixXd descriptors;          // B x descriptor_dim
  std::vector<std::int64_t> sample_ids;  // empty when the caller passed none
};

/// Cached forward state needed by backward: per-cloud hidden activations,
/// pooled features, and the winning point index per pooled channel.
struct ForwardTrace {
  std::vector<PointCloud> clouds;                     // inputs, copied for staleness checks
  std::vector<std::vector<Eigen::MatrixXd>> hidden;   // [cloud][layer] N x width, post-relu
  std::vector<Eigen::VectorXd> pooled;                // [cloud] last hidden width
  std::vector<std::vector<Eigen::Index>> pool_argmax;  // [cloud][channel] winning row
};

/// Pure function of (params, clouds); permutation of a cloud's points leaves
/// its descriptor bit-identical. Throws NonFiniteActivation if any
/// intermediate value is non-finite.
DescriptorBatch forward(const EncoderParams& params, const std::vector<PointCloud>& clouds,
                        std::vector<std::int64_t> sample_ids = {});

/// forward() that also fills the cache consumed by backward().
DescriptorBatch forward_traced(const EncoderParams& params, const std::vector<PointCloud>& clouds,
                               ForwardTrace& trace, std::vector<std::int64_t> sample_ids = {});

/// Exact reverse-mode gradients of a scalar loss w.r.t. all parameters, given
/// d(loss)/d(descriptors). Max pooling routes gradient to the argmax point
/// per channel; ties were already broken toward the lowest point index in the
/// forward pass. Throws StaleCache when clouds differ from the traced batch.
EncoderParams backward(const EncoderParams& params, const std::vector<PointCloud>& clouds,
                       const ForwardTrace& trace,
                       const Eigen::Ref<const Eigen::MatrixXd>& upstream);

/// Frozen deep copy of a parameter state; later student updates cannot touch
/// it. Used as the distillation reference model.
class TeacherSnapshot {
 public:
  explicit TeacherSnapshot(const EncoderParams& params) : params_(params) {}
  const EncoderParams& params() const { return params_; }

 private:
  EncoderParams params_;
};

inline TeacherSnapshot snapshot(const EncoderParams& params) { return TeacherSnapshot(params); }

/// Parameter file: magic "PCPRW", u32 version=1, u32 config-JSON length +
/// bytes, then flatten() as float64 little-endian. Bit-exact round trip.
void save_params(const EncoderParams& params, const std::filesystem::path& path);

/// Loads a parameter file. When `expected` is given, throws ConfigMismatch
/// unless the stored config has the same shape (seed is not compared).
EncoderParams load_params(const std::filesystem::path& path,
                          const EncoderConfig* expected = nullptr);

}  // namespace pcpr
