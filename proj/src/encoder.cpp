#include "pcpr/encoder.hpp"

#include <json.hpp>

#include "pcpr/binio.hpp"
#include "pcpr/parallel.hpp"
#include "pcpr/rng.hpp"

namespace pcpr {

using json = nlohmann::json;

Eigen::Index EncoderParams::param_count() const {
  Eigen::Index n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

Eigen::VectorXd EncoderParams::flatten() const {
  Eigen::VectorXd flat(param_count());
  Eigen::Index at = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    const Eigen::MatrixXd& w = weights[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      flat.segment(at, w.cols()) = w.row(r).transpose();
      at += w.cols();
    }
    flat.segment(at, biases[l].size()) = biases[l];
    at += biases[l].size();
  }
  return flat;
}

EncoderParams EncoderParams::unflatten(const EncoderConfig& config,
                                       const Eigen::Ref<const Eigen::VectorXd>& flat) {
  config.validate();
  EncoderParams p;
  p.config = config;
  const std::vector<int> widths = config.layer_widths();
  Eigen::Index at = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const Eigen::Index in = widths[l], out = widths[l + 1];
    if (at + in * out + out > flat.size()) {
      throw ConfigMismatch("unflatten: parameter vector shorter than the config requires");
    }
    Eigen::MatrixXd w(out, in);
    for (Eigen::Index r = 0; r < out; ++r) {
      w.row(r) = flat.segment(at, in).transpose();
      at += in;
    }
    p.weights.push_back(std::move(w));
    p.biases.emplace_back(flat.segment(at, out));
    at += out;
  }
  if (at != flat.size()) {
    throw ConfigMismatch("unflatten: parameter vector longer than the config requires");
  }
  return p;
}

EncoderParams EncoderParams::zeros_like(const EncoderParams& p) {
  EncoderParams z;
  z.config = p.config;
  z.weights.reserve(p.weights.size());
  z.biases.reserve(p.biases.size());
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    z.weights.push_back(Eigen::MatrixXd::Zero(p.weights[l].rows(), p.weights[l].cols()));
    z.biases.push_back(Eigen::VectorXd::Zero(p.biases[l].size()));
  }
  return z;
}

bool EncoderParams::same_values(const EncoderParams& other) const {
  if (!same_shape(config, other.config)) return false;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l] != other.weights[l] || biases[l] != other.biases[l]) return false;
  }
  return true;
}

EncoderParams init_params(const EncoderConfig& config) {
  config.validate();
  EncoderParams p;
  p.config = config;
  const std::vector<int> widths = config.layer_widths();
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int in = widths[l], out = widths[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Rng rng = make_rng(derive_seed(config.seed, "encoder-init", l));
    Eigen::MatrixXd w(out, in);
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) w(r, c) = uniform_real(rng, -bound, bound);
    }
    p.weights.push_back(std::move(w));
    p.biases.push_back(Eigen::VectorXd::Zero(out));
  }
  return p;
}

namespace {

void check_finite(const Eigen::Ref<const Eigen::MatrixXd>& m, const char* where) {
  if (!m.allFinite()) {
    throw NonFiniteActivation(std::string("encoder forward: non-finite values at ") + where);
  }
}

/// Runs the per-point MLP + pooling + head on one cloud. Trace slots are
/// optional; when given they receive the state backward() needs.
Eigen::VectorXd forward_one(const EncoderParams& params, const PointCloud& cloud,
                            std::vector<Eigen::MatrixXd>* hidden_out,
                            Eigen::VectorXd* pooled_out,
                            std::vector<Eigen::Index>* argmax_out) {
  const std::size_t num_hidden = params.weights.size() - 1;
  if (params.config.in_dim != cloud.cols()) {
    throw ConfigMismatch("encoder: parameters expect " +
                         std::to_string(params.config.in_dim) +
                         "-dimensional points, clouds have " + std::to_string(cloud.cols()));
  }
  check_finite(cloud, "input");
  Eigen::MatrixXd x = cloud;
  if (hidden_out) hidden_out->clear();
  for (std::size_t l = 0; l < num_hidden; ++l) {
    x = ((x * params.weights[l].transpose()).rowwise() + params.biases[l].transpose())
            .cwiseMax(0.0);
    check_finite(x, "hidden layer");
    if (hidden_out) hidden_out->push_back(x);
  }

  // Channel-wise max over points; first (lowest-index) row wins ties so the
  // backward routing is deterministic.
  const Eigen::Index n = x.rows(), width = x.cols();
  Eigen::VectorXd pooled(width);
  std::vector<Eigen::Index> argmax(width);
  for (Eigen::Index c = 0; c < width; ++c) {
    Eigen::Index best = 0;
    double best_v = x(0, c);
    for (Eigen::Index r = 1; r < n; ++r) {
      if (x(r, c) > best_v) {
        best_v = x(r, c);
        best = r;
      }
    }
    pooled(c) = best_v;
    argmax[c] = best;
  }
  if (pooled_out) *pooled_out = pooled;
  if (argmax_out) *argmax_out = std::move(argmax);

  Eigen::VectorXd v = params.weights.back() * pooled + params.biases.back();
  check_finite(v, "descriptor head");
  return v;
}

}  // namespace

DescriptorBatch forward(const EncoderParams& params, const std::vector<PointCloud>& clouds,
                        std::vector<std::int64_t> sample_ids) {
  DescriptorBatch batch;
  batch.sample_ids = std::move(sample_ids);
  batch.descriptors.resize(static_cast<Eigen::Index>(clouds.size()), params.config.descriptor_dim);
  parallel_for(clouds.size(), [&](std::size_t i) {
    batch.descriptors.row(static_cast<Eigen::Index>(i)) =
        forward_one(params, clouds[i], nullptr, nullptr, nullptr).transpose();
  });
  return batch;
}

DescriptorBatch forward_traced(const EncoderParams& params, const std::vector<PointCloud>& clouds,
                               ForwardTrace& trace, std::vector<std::int64_t> sample_ids) {
  trace.clouds = clouds;
  trace.hidden.assign(clouds.size(), {});
  trace.pooled.assign(clouds.size(), {});
  trace.pool_argmax.assign(clouds.size(), {});
  DescriptorBatch batch;
  batch.sample_ids = std::move(sample_ids);
  batch.descriptors.resize(static_cast<Eigen::Index>(clouds.size()), params.config.descriptor_dim);
  parallel_for(clouds.size(), [&](std::size_t i) {
    batch.descriptors.row(static_cast<Eigen::Index>(i)) =
        forward_one(params, clouds[i], &trace.hidden[i], &trace.pooled[i], &trace.pool_argmax[i])
            .transpose();
  });
  return batch;
}

EncoderParams backward(const EncoderParams& params, const std::vector<PointCloud>& clouds,
                       const ForwardTrace& trace,
                       const Eigen::Ref<const Eigen::MatrixXd>& upstream) {
  if (trace.clouds.size() != clouds.size()) {
    throw StaleCache("encoder backward: cached batch size differs from the given batch");
  }
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    if (trace.clouds[i].rows() != clouds[i].rows() || trace.clouds[i] != clouds[i]) {
      throw StaleCache("encoder backward: cloud " + std::to_string(i) +
                       " differs from the traced forward batch");
    }
  }
  if (upstream.rows() != static_cast<Eigen::Index>(clouds.size()) ||
      upstream.cols() != params.config.descriptor_dim) {
    throw StaleCache("encoder backward: upstream gradient shape mismatch");
  }

  const std::size_t num_hidden = params.weights.size() - 1;
  EncoderParams grad = EncoderParams::zeros_like(params);
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    const Eigen::VectorXd dv = upstream.row(static_cast<Eigen::Index>(i)).transpose();

    // Descriptor head: v = W g + b.
    grad.weights.back() += dv * trace.pooled[i].transpose();
    grad.biases.back() += dv;
    const Eigen::VectorXd dpooled = params.weights.back().transpose() * dv;

    // Max pool: all gradient goes to the winning point of each channel.
    const Eigen::MatrixXd& last = trace.hidden[i].back();
    Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(last.rows(), last.cols());
    for (Eigen::Index c = 0; c < last.cols(); ++c) {
      dx(trace.pool_argmax[i][c], c) += dpooled(c);
    }

    // Hidden stack, in reverse. x_l = relu(x_{l-1} W_l^T + b_l); the stored
    // post-activation sign doubles as the relu mask (derivative 0 at 0).
    for (std::size_t l = num_hidden; l-- > 0;) {
      const Eigen::MatrixXd& act = trace.hidden[i][l];
      const Eigen::MatrixXd dz =
          (act.array() > 0.0).template cast<double>().matrix().cwiseProduct(dx);
      if (l == 0) {
        grad.weights[l] += dz.transpose() * clouds[i];
      } else {
        grad.weights[l] += dz.transpose() * trace.hidden[i][l - 1];
      }
      grad.biases[l] += dz.colwise().sum().transpose();
      dx = dz * params.weights[l];
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Parameter files
// ---------------------------------------------------------------------------

namespace {

constexpr char kParamMagic[] = "PCPRW";
constexpr std::uint32_t kParamVersion = 1;

json config_to_json(const EncoderConfig& c) {
  return json{{"in_dim", c.in_dim},
              {"hidden_dims", c.hidden_dims},
              {"descriptor_dim", c.descriptor_dim},
              {"seed", c.seed}};
}

EncoderConfig config_from_json(const json& j) {
  EncoderConfig c;
  c.in_dim = j.at("in_dim").get<int>();
  c.hidden_dims = j.at("hidden_dims").get<std::vector<int>>();
  c.descriptor_dim = j.at("descriptor_dim").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_params(const EncoderParams& params, const std::filesystem::path& path) {
  auto os = binio::open_output(path);
  binio::write_bytes(os, kParamMagic, 5);
  binio::write_u32(os, kParamVersion);
  const std::string blob = config_to_json(params.config).dump();
  binio::write_u32(os, static_cast<std::uint32_t>(blob.size()));
  binio::write_bytes(os, blob.data(), blob.size());
  const Eigen::VectorXd flat = params.flatten();
  for (Eigen::Index i = 0; i < flat.size(); ++i) binio::write_f64(os, flat(i));
  if (!os) throw FormatError(path.string() + ": write failed");
}

EncoderParams load_params(const std::filesystem::path& path, const EncoderConfig* expected) {
  auto is = binio::open_input(path);
  binio::Reader r(is, path.string());
  r.expect_magic(kParamMagic, 5);
  const std::uint32_t version = r.read_u32();
  if (version != kParamVersion) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  }
  const std::uint32_t blob_len = r.read_u32();
  std::string blob(blob_len, '\0');
  r.read_bytes(blob.data(), blob_len);
  EncoderConfig config;
  try {
    config = config_from_json(json::parse(blob));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": config blob: " + e.what());
  }
  config.validate();
  if (expected && !same_shape(config, *expected)) {
    throw ConfigMismatch(path.string() + ": stored encoder shape differs from the expected one");
  }

  Eigen::Index count = 0;
  const std::vector<int> widths = config.layer_widths();
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    count += widths[l] * widths[l + 1] + widths[l + 1];
  }
  Eigen::VectorXd flat(count);
  for (Eigen::Index i = 0; i < count; ++i) flat(i) = r.read_f64();
  if (!r.at_eof()) throw FormatError(path.string() + ": trailing bytes after parameters");
  return EncoderParams::unflatten(config, flat);
}

}  // namespace pcpr
