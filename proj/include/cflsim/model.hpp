#pragma once

// Client model: an MLP encoder/decoder trained to reconstruct the client's
// feature slice, plus an in-batch NT-Xent contrastive term on the latent
// codes of two randomly masked views of each row. Gradients are analytic.

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cflsim/errors.hpp"
#include "cflsim/random.hpp"

namespace cflsim {

struct AutoencoderShape {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims;
  std::size_t latent_dim = 1;

  /// hidden = [max(4, input)], latent = max(2, input / 2)
  static AutoencoderShape defaults_for(std::size_t input_dim) {
    return {input_dim, {std::max<std::size_t>(4, input_dim)}, std::max<std::size_t>(2, input_dim / 2)};
  }

  void validate() const {
    require(input_dim >= 1, "autoencoder: input_dim must be >= 1");
    require(latent_dim >= 1, "autoencoder: latent_dim must be >= 1");
    for (auto h : hidden_dims) require(h >= 1, "autoencoder: hidden widths must be >= 1");
  }

  std::vector<std::size_t> encoder_widths() const {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), hidden_dims.begin(), hidden_dims.end());
    w.push_back(latent_dim);
    return w;
  }

  std::vector<std::size_t> decoder_widths() const {
    std::vector<std::size_t> w{latent_dim};
    w.insert(w.end(), hidden_dims.rbegin(), hidden_dims.rend());
    w.push_back(input_dim);
    return w;
  }

  bool operator==(const AutoencoderShape&) const = default;
};

struct Segment {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;

  std::size_t size() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
  bool operator==(const Segment&) const = default;
};

struct IndexSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const IndexSpan&) const = default;
};

struct ParameterLayout {
  std::vector<Segment> segments;
  IndexSpan encoder;
  IndexSpan decoder;

  std::size_t total() const { return segments.empty() ? 0 : segments.back().offset + segments.back().size(); }
  bool operator==(const ParameterLayout&) const = default;

  /// Segments tile [0, total) in order and the two spans split it in two.
  bool tiles() const {
    std::size_t at = 0;
    for (const auto& s : segments) {
      if (s.offset != at) return false;
      at += s.size();
    }
    return encoder.begin == 0 && encoder.end == decoder.begin && decoder.end == at;
  }
};

/// Flat weight vector (encoder ++ decoder) with a shared, immutable layout.
struct ParameterVector {
  std::vector<double> values;
  std::shared_ptr<const ParameterLayout> layout;
  bool diverged = false;

  std::size_t size() const { return values.size(); }
  std::span<const double> encoder() const { return std::span(values).subspan(layout->encoder.begin, layout->encoder.size()); }
  std::span<const double> decoder() const { return std::span(values).subspan(layout->decoder.begin, layout->decoder.size()); }

  bool same_layout(const ParameterVector& other) const {
    return layout == other.layout || (layout && other.layout && *layout == *other.layout);
  }

  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }

  double norm() const {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
  }

  ParameterVector zeros_like() const { return {std::vector<double>(values.size(), 0.0), layout, false}; }
};

inline void require_same_layout(const ParameterVector& a, const ParameterVector& b, const char* who) {
  if (!a.same_layout(b) || a.size() != b.size()) throw ConfigError(std::string(who) + ": parameter layout mismatch");
}

namespace detail {

struct DenseLayer {
  std::size_t weight_offset;  // row-major out x in
  std::size_t bias_offset;
  std::size_t in;
  std::size_t out;
  bool tanh;
};

struct Network {
  std::vector<DenseLayer> encoder;
  std::vector<DenseLayer> decoder;
};

inline void append_stack(ParameterLayout& layout, std::vector<DenseLayer>& layers, const std::vector<std::size_t>& widths,
                         const std::string& prefix, std::size_t& at) {
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const std::size_t in = widths[i];
    const std::size_t out = widths[i + 1];
    const std::string base = prefix + "." + std::to_string(i);
    layout.segments.push_back({base + ".weight", {out, in}, at});
    const std::size_t w_at = at;
    at += in * out;
    layout.segments.push_back({base + ".bias", {out}, at});
    const std::size_t b_at = at;
    at += out;
    layers.push_back({w_at, b_at, in, out, i + 2 < widths.size()});
  }
}

inline Network network_of(const AutoencoderShape& shape, ParameterLayout* layout = nullptr) {
  ParameterLayout scratch;
  ParameterLayout& l = layout ? *layout : scratch;
  Network net;
  std::size_t at = 0;
  append_stack(l, net.encoder, shape.encoder_widths(), "encoder", at);
  l.encoder = {0, at};
  append_stack(l, net.decoder, shape.decoder_widths(), "decoder", at);
  l.decoder = {l.encoder.end, at};
  return net;
}

/// Recovers the network wiring from a layout built by network_of.
inline Network network_from_layout(const ParameterLayout& layout) {
  Network net;
  for (std::size_t i = 0; i + 1 < layout.segments.size(); i += 2) {
    const auto& w = layout.segments[i];
    const auto& b = layout.segments[i + 1];
    DenseLayer layer{w.offset, b.offset, w.shape.at(1), w.shape.at(0), false};
    (w.offset < layout.encoder.end ? net.encoder : net.decoder).push_back(layer);
  }
  for (auto* stack : {&net.encoder, &net.decoder}) {
    for (std::size_t i = 0; i + 1 < stack->size(); ++i) (*stack)[i].tanh = true;
  }
  return net;
}

using RowMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMapMut = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// activations[0] is the input; activations[i + 1] is the output of layer i.
inline std::vector<Eigen::MatrixXd> forward_stack(std::span<const double> params, const std::vector<DenseLayer>& layers,
                                                  const Eigen::MatrixXd& input) {
  std::vector<Eigen::MatrixXd> acts;
  acts.reserve(layers.size() + 1);
  acts.push_back(input);
  for (const auto& layer : layers) {
    const RowMap w(params.data() + layer.weight_offset, static_cast<Eigen::Index>(layer.out),
                   static_cast<Eigen::Index>(layer.in));
    const Eigen::Map<const Eigen::RowVectorXd> b(params.data() + layer.bias_offset, static_cast<Eigen::Index>(layer.out));
    Eigen::MatrixXd h = acts.back() * w.transpose();
    h.rowwise() += b;
    if (layer.tanh) h = h.array().tanh().matrix();
    acts.push_back(std::move(h));
  }
  return acts;
}

/// Accumulates parameter gradients into `grad` and returns d(loss)/d(input).
inline Eigen::MatrixXd backward_stack(std::span<const double> params, const std::vector<DenseLayer>& layers,
                                      const std::vector<Eigen::MatrixXd>& acts, Eigen::MatrixXd d_out,
                                      std::span<double> grad) {
  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& layer = layers[li];
    if (layer.tanh) d_out = (d_out.array() * (1.0 - acts[li + 1].array().square())).matrix();
    const RowMap w(params.data() + layer.weight_offset, static_cast<Eigen::Index>(layer.out),
                   static_cast<Eigen::Index>(layer.in));
    RowMapMut gw(grad.data() + layer.weight_offset, static_cast<Eigen::Index>(layer.out), static_cast<Eigen::Index>(layer.in));
    Eigen::Map<Eigen::RowVectorXd> gb(grad.data() + layer.bias_offset, static_cast<Eigen::Index>(layer.out));
    gw.noalias() += d_out.transpose() * acts[li];
    gb += d_out.colwise().sum();
    d_out = d_out * w;
  }
  return d_out;
}

}  // namespace detail

inline ParameterLayout layout_of(const AutoencoderShape& shape) {
  shape.validate();
  ParameterLayout layout;
  detail::network_of(shape, &layout);
  return layout;
}

/// Glorot-uniform weights, a = sqrt(6 / (fan_in + fan_out)) per layer; zero biases.
inline ParameterVector init_params(const AutoencoderShape& shape, std::uint64_t seed) {
  auto layout = std::make_shared<ParameterLayout>(layout_of(shape));
  ParameterVector p{std::vector<double>(layout->total(), 0.0), layout, false};
  const auto net = detail::network_from_layout(*layout);
  Rng rng(derive_seed(seed, "init"));
  for (const auto* stack : {&net.encoder, &net.decoder}) {
    for (const auto& layer : *stack) {
      const double a = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
      for (std::size_t i = 0; i < layer.in * layer.out; ++i) p.values[layer.weight_offset + i] = rng.uniform(-a, a);
    }
  }
  return p;
}

struct ForwardResult {
  Eigen::MatrixXd latent;          // B x latent_dim
  Eigen::MatrixXd reconstruction;  // B x input_dim
};

inline std::size_t input_dim_of(const ParameterLayout& layout) { return layout.segments.front().shape.at(1); }

inline ForwardResult forward(const ParameterVector& params, const Eigen::MatrixXd& batch) {
  const auto net = detail::network_from_layout(*params.layout);
  if (static_cast<std::size_t>(batch.cols()) != input_dim_of(*params.layout)) {
    throw ConfigError("forward: batch width " + std::to_string(batch.cols()) + " does not match input_dim " +
                      std::to_string(input_dim_of(*params.layout)));
  }
  auto enc = detail::forward_stack(params.values, net.encoder, batch);
  auto dec = detail::forward_stack(params.values, net.decoder, enc.back());
  return {std::move(enc.back()), std::move(dec.back())};
}

struct LossOptions {
  double lambda = 0.1;
  double temperature = 0.5;
  std::uint64_t mask_seed = 0;
};

struct LossReport {
  double reconstruction = 0.0;
  double contrastive = 0.0;
  double lambda = 0.0;
  double total = 0.0;
  bool diverged = false;
};

struct LossAndGrad {
  LossReport loss;
  ParameterVector grad;
};

namespace detail {

/// Two masked views per row; each view zeroes floor(d/2) features chosen
/// independently per row and per view.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> masked_views(const Eigen::MatrixXd& batch, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "views"));
  const auto d = static_cast<std::size_t>(batch.cols());
  const std::size_t masked = d / 2;
  Eigen::MatrixXd a = batch;
  Eigen::MatrixXd b = batch;
  for (Eigen::Index r = 0; r < batch.rows(); ++r) {
    for (auto* view : {&a, &b}) {
      for (auto c : rng.sample_without_replacement(d, masked)) (*view)(r, static_cast<Eigen::Index>(c)) = 0.0;
    }
  }
  return {std::move(a), std::move(b)};
}

constexpr double kNormEps = 1e-12;

/// NT-Xent over the 2B stacked latents (rows i and i+B are a positive pair).
/// Returns the mean loss and writes d(loss)/d(latents) into d_latents.
inline double nt_xent(const Eigen::MatrixXd& z, double temperature, Eigen::MatrixXd& d_latents) {
  const Eigen::Index n = z.rows();
  const Eigen::Index half = n / 2;
  const Eigen::VectorXd norms = (z.rowwise().squaredNorm().array() + kNormEps).sqrt();
  const Eigen::MatrixXd zhat = z.array().colwise() / norms.array();
  const Eigen::MatrixXd sim = zhat * zhat.transpose();

  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n);  // d(loss)/d(sim)
  double loss = 0.0;
  const double scale = 1.0 / (static_cast<double>(n) * temperature);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index pos = i < half ? i + half : i - half;
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) m = std::max(m, sim(i, j) / temperature);
    double denom = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) denom += std::exp(sim(i, j) / temperature - m);
    loss += m + std::log(denom) - sim(i, pos) / temperature;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double p = std::exp(sim(i, j) / temperature - m) / denom;
      g(i, j) = scale * (p - (j == pos ? 1.0 : 0.0));
    }
  }
  const Eigen::MatrixXd d_zhat = (g + g.transpose()) * zhat;
  d_latents.resize(n, z.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double ni = norms(i);
    d_latents.row(i) = d_zhat.row(i) / ni - z.row(i) * (z.row(i).dot(d_zhat.row(i)) / (ni * ni * ni));
  }
  return loss / static_cast<double>(n);
}

inline LossAndGrad diverged_result(const ParameterVector& params, double lambda) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  ParameterVector g{std::vector<double>(params.size(), nan), params.layout, true};
  return {{nan, nan, lambda, nan, true}, std::move(g)};
}

}  // namespace detail

/// total = MSE(reconstruction, batch) + lambda * NT-Xent(latents of two masked views).
inline LossAndGrad loss_and_grad(const ParameterVector& params, const Eigen::MatrixXd& batch, const LossOptions& opt) {
  require(opt.temperature > 0.0, "loss_and_grad: temperature must be > 0");
  require(opt.lambda >= 0.0, "loss_and_grad: lambda must be >= 0");
  const Eigen::Index rows = batch.rows();
  if (opt.lambda > 0.0 && rows < 2) throw ConfigError("loss_and_grad: contrastive term needs a batch of at least 2 rows");
  require(rows >= 1, "loss_and_grad: empty batch");
  const auto net = detail::network_from_layout(*params.layout);
  if (static_cast<std::size_t>(batch.cols()) != input_dim_of(*params.layout)) {
    throw ConfigError("loss_and_grad: batch width does not match input_dim");
  }
  if (params.diverged || !params.all_finite()) return detail::diverged_result(params, opt.lambda);

  ParameterVector grad = params.zeros_like();
  const auto enc = detail::forward_stack(params.values, net.encoder, batch);
  const auto dec = detail::forward_stack(params.values, net.decoder, enc.back());
  const Eigen::MatrixXd residual = dec.back() - batch;
  const double cells = static_cast<double>(batch.size());

  LossReport report;
  report.lambda = opt.lambda;
  report.reconstruction = residual.squaredNorm() / cells;
  const Eigen::MatrixXd d_latent = detail::backward_stack(params.values, net.decoder, dec, (2.0 / cells) * residual, grad.values);
  detail::backward_stack(params.values, net.encoder, enc, d_latent, grad.values);

  if (opt.lambda > 0.0) {
    const auto [view_a, view_b] = detail::masked_views(batch, opt.mask_seed);
    const auto enc_a = detail::forward_stack(params.values, net.encoder, view_a);
    const auto enc_b = detail::forward_stack(params.values, net.encoder, view_b);
    Eigen::MatrixXd z(2 * rows, enc_a.back().cols());
    z << enc_a.back(), enc_b.back();
    Eigen::MatrixXd dz;
    report.contrastive = detail::nt_xent(z, opt.temperature, dz);
    dz *= opt.lambda;
    detail::backward_stack(params.values, net.encoder, enc_a, dz.topRows(rows), grad.values);
    detail::backward_stack(params.values, net.encoder, enc_b, dz.bottomRows(rows), grad.values);
  }
  report.total = report.reconstruction + opt.lambda * report.contrastive;

  if (!std::isfinite(report.total) || !grad.all_finite()) {
    report.diverged = true;
    grad.diverged = true;
  }
  return {report, std::move(grad)};
}

/// out = params - eta * grad
inline ParameterVector sgd_step(const ParameterVector& params, const ParameterVector& grad, double eta) {
  require_same_layout(params, grad, "sgd_step");
  require(eta > 0.0, "sgd_step: learning rate must be > 0");
  ParameterVector out{params.values, params.layout, params.diverged || grad.diverged};
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] -= eta * grad.values[i];
  if (!out.all_finite()) out.diverged = true;
  return out;
}

// Checkpoint format (all integers and floats little-endian):
//   "CFLSIMPV"  u32 version  u32 flags(bit0 = diverged)
//   u64 encoder.begin  u64 encoder.end  u64 decoder.begin  u64 decoder.end
//   u32 segment_count, then per segment: u32 name_len, name, u32 rank, u64 dims[rank], u64 offset
//   u64 value_count, f64 values[value_count]
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::string_view in, std::size_t& at) {
  if (at + sizeof(T) > in.size()) throw DataError("checkpoint: truncated at byte " + std::to_string(at));
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, in.data() + at, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  at += sizeof(T);
  return v;
}

}  // namespace detail

inline std::string serialize(const ParameterVector& p) {
  std::string out = "CFLSIMPV";
  const auto& l = *p.layout;
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, p.diverged ? 1u : 0u);
  for (auto v : {l.encoder.begin, l.encoder.end, l.decoder.begin, l.decoder.end}) detail::put_le<std::uint64_t>(out, v);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.segments.size()));
  for (const auto& s : l.segments) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.name.size()));
    out += s.name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.shape.size()));
    for (auto d : s.shape) detail::put_le<std::uint64_t>(out, d);
    detail::put_le<std::uint64_t>(out, s.offset);
  }
  detail::put_le<std::uint64_t>(out, p.values.size());
  for (double v : p.values) detail::put_le<double>(out, v);
  return out;
}

inline ParameterVector deserialize(std::string_view in) {
  if (in.substr(0, 8) != "CFLSIMPV") throw DataError("checkpoint: bad magic");
  std::size_t at = 8;
  const auto version = detail::get_le<std::uint32_t>(in, at);
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto flags = detail::get_le<std::uint32_t>(in, at);
  auto layout = std::make_shared<ParameterLayout>();
  layout->encoder.begin = detail::get_le<std::uint64_t>(in, at);
  layout->encoder.end = detail::get_le<std::uint64_t>(in, at);
  layout->decoder.begin = detail::get_le<std::uint64_t>(in, at);
  layout->decoder.end = detail::get_le<std::uint64_t>(in, at);
  const auto count = detail::get_le<std::uint32_t>(in, at);
  for (std::uint32_t i = 0; i < count; ++i) {
    Segment s;
    const auto len = detail::get_le<std::uint32_t>(in, at);
    if (at + len > in.size()) throw DataError("checkpoint: truncated segment name");
    s.name = std::string(in.substr(at, len));
    at += len;
    const auto rank = detail::get_le<std::uint32_t>(in, at);
    for (std::uint32_t r = 0; r < rank; ++r) s.shape.push_back(detail::get_le<std::uint64_t>(in, at));
    s.offset = detail::get_le<std::uint64_t>(in, at);
    layout->segments.push_back(std::move(s));
  }
  const auto n = detail::get_le<std::uint64_t>(in, at);
  if (!layout->tiles() || layout->total() != n) throw DataError("checkpoint: segment table does not tile the values");
  ParameterVector p{std::vector<double>(n), layout, (flags & 1u) != 0};
  for (auto& v : p.values) v = detail::get_le<double>(in, at);
  if (at != in.size()) throw DataError("checkpoint: trailing bytes");
  return p;
}

}  // namespace cflsim
