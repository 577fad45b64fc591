#pragma once

// Gated-attention MIL aggregator (ABMIL).
//
//   h_i   = W_proj^T x_i + b_proj                       (projection to 128)
//   a_i   = w^T (tanh(V^T h_i + b_V) * sigmoid(U^T h_i + b_U)) + b_a
//   alpha = softmax of a over real rows (padding logits pinned to -1e30)
//   z     = sum_i alpha_i h_i
//   out   = W_cls^T z + b_cls -> logistic (1 output) or softmax (C outputs)
//
// Parameters live in one flat buffer in declaration order
// (W_proj, b_proj, V, b_V, U, b_U, w, b_a, W_cls, b_cls), matrices
// row-major with the input dimension as rows. That buffer is exactly the
// checkpoint payload and what the optimizer walks over.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "milbench/error.hpp"
#include "milbench/feature_store.hpp"
#include "milbench/rng.hpp"

namespace milbench {

inline constexpr std::size_t kEmbedDim = 128;
inline constexpr double kMaskedLogit = -1e30;
inline constexpr double kProbClamp = 1e-7;

constexpr std::size_t parameter_count(std::size_t d, std::size_t c_out, std::size_t h = kEmbedDim) {
  return (d * h + h) + 2 * (h * h + h) + (h + 1) + (h * c_out + c_out);
}

/// Offsets of each parameter block in the flat buffer.
struct AbmilShape {
  std::size_t d = 0;
  std::size_t c_out = 0;
  std::size_t h = kEmbedDim;

  std::size_t w_proj() const { return 0; }
  std::size_t b_proj() const { return d * h; }
  std::size_t v_gate() const { return b_proj() + h; }
  std::size_t b_v() const { return v_gate() + h * h; }
  std::size_t u_gate() const { return b_v() + h; }
  std::size_t b_u() const { return u_gate() + h * h; }
  std::size_t w_attn() const { return b_u() + h; }
  std::size_t b_attn() const { return w_attn() + h; }
  std::size_t w_cls() const { return b_attn() + 1; }
  std::size_t b_cls() const { return w_cls() + h * c_out; }
  std::size_t total() const { return b_cls() + c_out; }

  friend bool operator==(const AbmilShape&, const AbmilShape&) = default;
};

template <typename T>
class AbmilParameters {
 public:
  using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;
  using VectorMap = Eigen::Map<Vector>;
  using ConstVectorMap = Eigen::Map<const Vector>;

  AbmilParameters() = default;
  AbmilParameters(std::size_t d, std::size_t c_out, std::size_t h = kEmbedDim)
      : shape_{d, c_out, h}, values_(shape_.total(), T{0}) {
    if (d == 0 || c_out == 0 || h == 0) throw ValidationError("ABMIL dimensions must be positive");
  }

  const AbmilShape& shape() const { return shape_; }
  std::size_t input_dim() const { return shape_.d; }
  std::size_t output_dim() const { return shape_.c_out; }
  std::size_t embed_dim() const { return shape_.h; }
  std::size_t size() const { return values_.size(); }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }

  MatrixMap w_proj() { return mat(shape_.w_proj(), shape_.d, shape_.h); }
  VectorMap b_proj() { return vec(shape_.b_proj(), shape_.h); }
  MatrixMap v_gate() { return mat(shape_.v_gate(), shape_.h, shape_.h); }
  VectorMap b_v() { return vec(shape_.b_v(), shape_.h); }
  MatrixMap u_gate() { return mat(shape_.u_gate(), shape_.h, shape_.h); }
  VectorMap b_u() { return vec(shape_.b_u(), shape_.h); }
  VectorMap w_attn() { return vec(shape_.w_attn(), shape_.h); }
  T& b_attn() { return values_[shape_.b_attn()]; }
  MatrixMap w_cls() { return mat(shape_.w_cls(), shape_.h, shape_.c_out); }
  VectorMap b_cls() { return vec(shape_.b_cls(), shape_.c_out); }

  ConstMatrixMap w_proj() const { return mat(shape_.w_proj(), shape_.d, shape_.h); }
  ConstVectorMap b_proj() const { return vec(shape_.b_proj(), shape_.h); }
  ConstMatrixMap v_gate() const { return mat(shape_.v_gate(), shape_.h, shape_.h); }
  ConstVectorMap b_v() const { return vec(shape_.b_v(), shape_.h); }
  ConstMatrixMap u_gate() const { return mat(shape_.u_gate(), shape_.h, shape_.h); }
  ConstVectorMap b_u() const { return vec(shape_.b_u(), shape_.h); }
  ConstVectorMap w_attn() const { return vec(shape_.w_attn(), shape_.h); }
  T b_attn() const { return values_[shape_.b_attn()]; }
  ConstMatrixMap w_cls() const { return mat(shape_.w_cls(), shape_.h, shape_.c_out); }
  ConstVectorMap b_cls() const { return vec(shape_.b_cls(), shape_.c_out); }

  template <typename U>
  AbmilParameters<U> cast() const {
    AbmilParameters<U> out(shape_.d, shape_.c_out, shape_.h);
    std::transform(values_.begin(), values_.end(), out.values().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
  }

  void set_zero() { std::fill(values_.begin(), values_.end(), T{0}); }

  friend bool operator==(const AbmilParameters&, const AbmilParameters&) = default;

 private:
  MatrixMap mat(std::size_t off, std::size_t r, std::size_t c) {
    return MatrixMap(values_.data() + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }
  ConstMatrixMap mat(std::size_t off, std::size_t r, std::size_t c) const {
    return ConstMatrixMap(values_.data() + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }
  VectorMap vec(std::size_t off, std::size_t n) { return VectorMap(values_.data() + off, static_cast<Eigen::Index>(n)); }
  ConstVectorMap vec(std::size_t off, std::size_t n) const {
    return ConstVectorMap(values_.data() + off, static_cast<Eigen::Index>(n));
  }

  AbmilShape shape_;
  std::vector<T> values_;
};

/// Stored model (32-bit) and gradients / reference models (64-bit).
using AbmilModel = AbmilParameters<float>;
using AbmilGradient = AbmilParameters<double>;

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases. Each
/// weight block draws from its own stream keyed by (seed, block).
template <typename T = float>
AbmilParameters<T> init_abmil(std::size_t d, std::size_t c_out, std::uint64_t seed) {
  AbmilParameters<T> m(d, c_out);
  const auto& s = m.shape();
  auto fill = [&](std::size_t offset, std::size_t count, std::size_t fan_in, std::uint64_t block) {
    rng::Stream stream(rng::combine(seed, block));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < count; ++i) m.values()[offset + i] = static_cast<T>(stream.uniform(-bound, bound));
  };
  fill(s.w_proj(), s.d * s.h, s.d, 0);
  fill(s.v_gate(), s.h * s.h, s.h, 1);
  fill(s.u_gate(), s.h * s.h, s.h, 2);
  fill(s.w_attn(), s.h, s.h, 3);
  fill(s.w_cls(), s.h * s.c_out, s.h, 4);
  return m;
}

/// Intermediates of one forward pass, all 64-bit. Row-indexed members
/// cover the n_real real tiles only; `attention` and `attn_logits` cover
/// every row of the bag.
struct ForwardTrace {
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  std::size_t n_tiles = 0;
  std::size_t n_real = 0;
  RowMatrix x;
  RowMatrix embed;
  RowMatrix gate_tanh;
  RowMatrix gate_sigmoid;
  RowMatrix gated;  // gate_tanh * gate_sigmoid
  Eigen::VectorXd attn_logits;
  Eigen::VectorXd attention;
  Eigen::VectorXd pooled;
  Eigen::VectorXd logits;
  Eigen::VectorXd probs;

  std::vector<double> scores() const { return {probs.data(), probs.data() + probs.size()}; }
};

namespace detail {

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

template <typename T>
using DoubleMatrixArg = std::conditional_t<std::is_same_v<T, double>, typename AbmilParameters<double>::ConstMatrixMap,
                                           ForwardTrace::RowMatrix>;

}  // namespace detail

template <typename T>
ForwardTrace forward(const AbmilParameters<T>& model, const FeatureMatrix& bag) {
  if (bag.dim != model.input_dim())
    throw ValidationError("bag dim " + std::to_string(bag.dim) + " does not match model dim " +
                          std::to_string(model.input_dim()));
  if (bag.n_real == 0) throw ValidationError("bag has no real tiles (all padding)");
  using RowMatrix = ForwardTrace::RowMatrix;
  const auto n = static_cast<Eigen::Index>(bag.n_real);
  const auto d = static_cast<Eigen::Index>(bag.dim);

  // 64-bit views of the parameters; no copy when T is already double
  const detail::DoubleMatrixArg<T> w_proj = model.w_proj().template cast<double>();
  const detail::DoubleMatrixArg<T> v_gate = model.v_gate().template cast<double>();
  const detail::DoubleMatrixArg<T> u_gate = model.u_gate().template cast<double>();
  const detail::DoubleMatrixArg<T> w_cls = model.w_cls().template cast<double>();
  const Eigen::VectorXd b_proj = model.b_proj().template cast<double>();
  const Eigen::VectorXd b_v = model.b_v().template cast<double>();
  const Eigen::VectorXd b_u = model.b_u().template cast<double>();
  const Eigen::VectorXd w_attn = model.w_attn().template cast<double>();
  const Eigen::VectorXd b_cls = model.b_cls().template cast<double>();

  ForwardTrace t;
  t.n_tiles = bag.n_tiles;
  t.n_real = bag.n_real;
  t.x = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(bag.values.data(), n, d)
            .cast<double>();
  t.embed.noalias() = t.x * w_proj;
  t.embed.rowwise() += b_proj.transpose();

  RowMatrix pre_v(n, static_cast<Eigen::Index>(model.embed_dim()));
  pre_v.noalias() = t.embed * v_gate;
  pre_v.rowwise() += b_v.transpose();
  // tanh(v) = 1 - 2 / (exp(2v) + 1); Eigen vectorizes exp but not tanh for doubles
  t.gate_tanh = 1.0 - 2.0 / ((2.0 * pre_v.array()).exp() + 1.0);

  RowMatrix pre_u(n, static_cast<Eigen::Index>(model.embed_dim()));
  pre_u.noalias() = t.embed * u_gate;
  pre_u.rowwise() += b_u.transpose();
  t.gate_sigmoid = (1.0 + (-pre_u.array()).exp()).inverse();

  t.attn_logits = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(bag.n_tiles), kMaskedLogit);
  t.gated = t.gate_tanh.array() * t.gate_sigmoid.array();
  t.attn_logits.head(n).noalias() = t.gated * w_attn;
  t.attn_logits.head(n).array() += static_cast<double>(model.b_attn());

  // Eigen's vectorized exp flushes -1e30 to a denormal rather than 0, so
  // padding weights are set explicitly
  const double max_logit = t.attn_logits.head(n).maxCoeff();
  t.attention = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(bag.n_tiles));
  t.attention.head(n) = (t.attn_logits.head(n).array() - max_logit).exp();
  t.attention /= t.attention.sum();

  t.pooled.noalias() = t.embed.transpose() * t.attention.head(n);
  t.logits.noalias() = w_cls.transpose() * t.pooled;
  t.logits += b_cls;
  if (model.output_dim() == 1) {
    t.probs.resize(1);
    t.probs[0] = detail::sigmoid(t.logits[0]);
  } else {
    t.probs = (t.logits.array() - t.logits.maxCoeff()).exp();
    t.probs /= t.probs.sum();
  }
  return t;
}

/// Class probabilities (one entry for binary heads).
template <typename T>
std::vector<double> predict(const AbmilParameters<T>& model, const FeatureMatrix& bag) {
  return forward(model, bag).scores();
}

/// Negative log-likelihood with probabilities clamped to [1e-7, 1 - 1e-7].
/// One score means a binary head (probability of class 1).
inline double loss(std::span<const double> scores, int label) {
  if (scores.size() == 1) {
    const double p = std::clamp(scores[0], kProbClamp, 1.0 - kProbClamp);
    return label == 1 ? -std::log(p) : -std::log(1.0 - p);
  }
  if (label < 0 || static_cast<std::size_t>(label) >= scores.size())
    throw ValidationError("label " + std::to_string(label) + " outside the score vector");
  return -std::log(std::max(scores[static_cast<std::size_t>(label)], kProbClamp));
}

inline double loss(std::span<const double> scores, int label, const TaskSpec& spec) {
  if (scores.size() != spec.output_dim())
    throw ValidationError("score vector width does not match task " + spec.task_id);
  return loss(scores, label);
}

/// Adds scale * dLoss/dParameters to `grad`. Padding rows take no part.
template <typename T>
void accumulate_gradient(const AbmilParameters<T>& model, const ForwardTrace& t, int label, AbmilGradient& grad,
                         double scale = 1.0) {
  if (!(grad.shape() == model.shape())) throw ValidationError("gradient shape does not match model");
  using RowMatrix = ForwardTrace::RowMatrix;
  const auto n = static_cast<Eigen::Index>(t.n_real);

  // d loss / d logits, zero where the probability clamp is active
  Eigen::VectorXd dlogits(t.probs.size());
  if (model.output_dim() == 1) {
    const double p = t.probs[0];
    const double y = label == 1 ? 1.0 : 0.0;
    dlogits[0] = (p < kProbClamp || p > 1.0 - kProbClamp) ? 0.0 : p - y;
  } else {
    const auto y = static_cast<Eigen::Index>(label);
    if (t.probs[y] < kProbClamp) {
      dlogits.setZero();
    } else {
      dlogits = t.probs;
      dlogits[y] -= 1.0;
    }
  }
  dlogits *= scale;

  const detail::DoubleMatrixArg<T> v_gate = model.v_gate().template cast<double>();
  const detail::DoubleMatrixArg<T> u_gate = model.u_gate().template cast<double>();
  const detail::DoubleMatrixArg<T> w_cls = model.w_cls().template cast<double>();
  const Eigen::VectorXd w_attn = model.w_attn().template cast<double>();

  grad.w_cls().noalias() += t.pooled * dlogits.transpose();
  grad.b_cls() += dlogits;
  const Eigen::VectorXd dpooled = w_cls * dlogits;

  const Eigen::VectorXd alpha = t.attention.head(n);
  const Eigen::VectorXd dalpha = t.embed * dpooled;
  const double centre = alpha.dot(dalpha);
  const Eigen::VectorXd dlogit_attn = alpha.array() * (dalpha.array() - centre);

  RowMatrix dembed = alpha * dpooled.transpose();
  grad.b_attn() += dlogit_attn.sum();
  grad.w_attn().noalias() += t.gated.transpose() * dlogit_attn;

  // dG = dlogit_attn * w^T (rank one), pushed through both gate nonlinearities
  RowMatrix dpre_v(n, w_attn.size());
  RowMatrix dpre_u(n, w_attn.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto dgate = dlogit_attn[i] * w_attn.transpose().array();
    const auto th = t.gate_tanh.row(i).array();
    const auto sg = t.gate_sigmoid.row(i).array();
    dpre_v.row(i) = dgate * sg * (1.0 - th.square());
    dpre_u.row(i) = dgate * t.gated.row(i).array() * (1.0 - sg);
  }

  grad.v_gate().noalias() += t.embed.transpose() * dpre_v;
  grad.b_v() += dpre_v.colwise().sum().transpose();
  grad.u_gate().noalias() += t.embed.transpose() * dpre_u;
  grad.b_u() += dpre_u.colwise().sum().transpose();
  dembed.noalias() += dpre_v * v_gate.transpose();
  dembed.noalias() += dpre_u * u_gate.transpose();

  grad.w_proj().noalias() += t.x.transpose() * dembed;
  grad.b_proj() += dembed.colwise().sum().transpose();
}

/// Exact gradient of loss(forward(model, bag), label).
template <typename T>
AbmilGradient backward(const AbmilParameters<T>& model, const ForwardTrace& trace, int label) {
  AbmilGradient g(model.input_dim(), model.output_dim(), model.embed_dim());
  accumulate_gradient(model, trace, label, g);
  return g;
}

// Checkpoint: "ABM1" | u32 d | u32 C_out | parameters as float32, all
// little-endian, in declaration order.

inline constexpr char kCheckpointMagic[4] = {'A', 'B', 'M', '1'};

inline std::string encode_checkpoint(const AbmilModel& m) {
  if (m.embed_dim() != kEmbedDim) throw ValidationError("checkpoints require embedding dimension 128");
  std::string out;
  out.reserve(12 + 4 * m.size());
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, detail::checked_u32(m.input_dim(), "d"));
  detail::put_u32(out, detail::checked_u32(m.output_dim(), "C_out"));
  for (float v : m.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline AbmilModel decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 12) throw FormatError("truncated checkpoint header", bytes.size());
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError("bad magic, expected ABM1", 0);
  const std::size_t d = detail::get_u32(bytes, 4);
  const std::size_t c_out = detail::get_u32(bytes, 8);
  if (d == 0 || c_out == 0) throw FormatError("checkpoint dimensions must be positive", 4);
  const unsigned __int128 expected = 12 + static_cast<unsigned __int128>(parameter_count(d, c_out)) * 4;
  if (bytes.size() < expected) throw FormatError("truncated checkpoint payload", bytes.size());
  if (bytes.size() > expected) throw FormatError("trailing bytes after checkpoint", static_cast<std::size_t>(expected));
  AbmilModel m(d, c_out);
  std::size_t off = 12;
  for (auto& v : m.values()) {
    v = std::bit_cast<float>(detail::get_u32(bytes, off));
    off += 4;
  }
  return m;
}

inline void write_checkpoint(const AbmilModel& m, const std::filesystem::path& path) {
  detail::write_binary_file(path, encode_checkpoint(m));
}

inline AbmilModel read_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(detail::read_binary_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

}  // namespace milbench
