#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "portionnet/tensor.hpp"

namespace portionnet {

/// Optimizer parameter group. Encoders and heads train at different rates.
enum class ParamGroup { encoder, head };

/// Non-owning view of one named parameter array and its gradient buffer.
template <class T>
struct ParamRef {
  std::string name;
  Matrix<T>* value;
  Matrix<T>* grad;
  ParamGroup group;
};

template <class T>
using ParamList = std::vector<ParamRef<T>>;

template <class T>
void zero_grads(const ParamList<T>& params) {
  for (const auto& p : params) p.grad->setZero();
}

template <class T>
std::size_t parameter_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += static_cast<std::size_t>(p.value->size());
  return n;
}

// ---------------------------------------------------------------------------
// Elementwise functions

template <class T>
T softplus(T x) {
  using std::abs, std::exp, std::log1p, std::max;
  // Floored at the smallest normal so the result stays positive once exp underflows.
  return max(max(x, T(0)) + log1p(exp(-abs(x))), std::numeric_limits<T>::min());
}

template <class T>
T sigmoid(T x) {
  using std::exp;
  if (x >= T(0)) return T(1) / (T(1) + exp(-x));
  const T e = exp(x);
  return e / (T(1) + e);
}

/// x * sigmoid(x); the smooth rectifier used throughout the network.
template <class T>
T silu(T x) {
  return x * sigmoid(x);
}

template <class T>
T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T(1) + x * (T(1) - s));
}

template <class T>
Matrix<T> silu(const Matrix<T>& x) {
  return x.unaryExpr([](T v) { return silu(v); });
}

template <class T>
Matrix<T> silu_backward(const Matrix<T>& pre, const Matrix<T>& dy) {
  return dy.cwiseProduct(pre.unaryExpr([](T v) { return silu_grad(v); }));
}

// ---------------------------------------------------------------------------

/// Affine map y = x W^T + b over a batch of rows.
template <class T>
class Linear {
 public:
  Linear() = default;

  Linear(int in_dim, int out_dim, Rng& rng)
      : weight_(out_dim, in_dim), bias_(1, out_dim), weight_grad_(out_dim, in_dim), bias_grad_(1, out_dim) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (Eigen::Index i = 0; i < weight_.size(); ++i) weight_.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
    for (Eigen::Index i = 0; i < bias_.size(); ++i) bias_.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
    weight_grad_.setZero();
    bias_grad_.setZero();
  }

  int in_dim() const { return static_cast<int>(weight_.cols()); }
  int out_dim() const { return static_cast<int>(weight_.rows()); }

  Matrix<T> forward(const Matrix<T>& x) {
    input_ = x;
    return apply(x);
  }

  /// Forward pass without caching; safe on a const layer.
  Matrix<T> apply(const Matrix<T>& x) const {
    require(x.cols() == weight_.cols(), "Linear: expected input width " + std::to_string(weight_.cols()) +
                                            ", got " + std::to_string(x.cols()));
    Matrix<T> y = x * weight_.transpose();
    y.rowwise() += bias_.row(0);
    return y;
  }

  Matrix<T> backward(const Matrix<T>& dy) {
    weight_grad_.noalias() += dy.transpose() * input_;
    bias_grad_ += dy.colwise().sum();
    return dy * weight_;
  }

  void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) {
    out.push_back({prefix + ".weight", &weight_, &weight_grad_, group});
    out.push_back({prefix + ".bias", &bias_, &bias_grad_, group});
  }

  Matrix<T>& weight() { return weight_; }
  Matrix<T>& bias() { return bias_; }
  /// Input cached by the last forward().
  const Matrix<T>& last_input() const { return input_; }
  const Matrix<T>& weight() const { return weight_; }
  const Matrix<T>& bias() const { return bias_; }

 private:
  Matrix<T> weight_, bias_;
  Matrix<T> weight_grad_, bias_grad_;
  Matrix<T> input_;
};

/// Affine layers with SiLU between them (none after the last).
/// Layers are named layer1, layer2, ... under the given prefix.
template <class T>
class Mlp {
 public:
  Mlp() = default;

  Mlp(const std::vector<int>& dims, Rng& rng) {
    require(dims.size() >= 2, "Mlp: need at least input and output widths");
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) layers_.emplace_back(dims[i], dims[i + 1], rng);
    pre_.resize(layers_.size());
  }

  int in_dim() const { return layers_.front().in_dim(); }
  int out_dim() const { return layers_.back().out_dim(); }
  std::size_t depth() const { return layers_.size(); }

  Matrix<T> forward(const Matrix<T>& x) {
    Matrix<T> h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].forward(h);
      if (i + 1 < layers_.size()) {
        pre_[i] = h;
        h = silu(h);
      }
    }
    return h;
  }

  Matrix<T> apply(const Matrix<T>& x) const {
    Matrix<T> h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].apply(h);
      if (i + 1 < layers_.size()) h = silu(h);
    }
    return h;
  }

  Matrix<T> backward(const Matrix<T>& dy) {
    Matrix<T> g = dy;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      if (i + 1 < layers_.size()) g = silu_backward(pre_[i], g);
      g = layers_[i].backward(g);
    }
    return g;
  }

  void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].parameters(out, prefix + ".layer" + std::to_string(i + 1), group);
  }

  Linear<T>& layer(std::size_t i) { return layers_.at(i); }
  Linear<T>& last() { return layers_.back(); }

 private:
  std::vector<Linear<T>> layers_;
  std::vector<Matrix<T>> pre_;
};

/// Per-row layer normalization with learned gain and shift.
template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int dim, double eps = 1e-5)
      : gamma_(Matrix<T>::Ones(1, dim)), beta_(Matrix<T>::Zero(1, dim)),
        gamma_grad_(Matrix<T>::Zero(1, dim)), beta_grad_(Matrix<T>::Zero(1, dim)), eps_(eps) {}

  Matrix<T> forward(const Matrix<T>& x) {
    normalize(x, xhat_, inv_std_);
    return affine(xhat_);
  }

  Matrix<T> apply(const Matrix<T>& x) const {
    Matrix<T> xhat;
    Vector<T> inv_std;
    normalize(x, xhat, inv_std);
    return affine(xhat);
  }

  Matrix<T> backward(const Matrix<T>& dy) {
    gamma_grad_ += dy.cwiseProduct(xhat_).colwise().sum();
    beta_grad_ += dy.colwise().sum();
    const T d = static_cast<T>(dy.cols());
    Matrix<T> dxhat = dy.array().rowwise() * gamma_.row(0).array();
    Matrix<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const T mean_g = dxhat.row(r).sum() / d;
      const T mean_gx = dxhat.row(r).dot(xhat_.row(r)) / d;
      dx.row(r) = inv_std_(r) * (dxhat.row(r).array() - mean_g - xhat_.row(r).array() * mean_gx).matrix();
    }
    return dx;
  }

  void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) {
    out.push_back({prefix + ".gamma", &gamma_, &gamma_grad_, group});
    out.push_back({prefix + ".beta", &beta_, &beta_grad_, group});
  }

 private:
  void normalize(const Matrix<T>& x, Matrix<T>& xhat, Vector<T>& inv_std) const {
    xhat.resize(x.rows(), x.cols());
    inv_std.resize(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const T mean = x.row(r).mean();
      const T var = (x.row(r).array() - mean).square().mean();
      inv_std(r) = T(1) / std::sqrt(var + static_cast<T>(eps_));
      xhat.row(r) = (x.row(r).array() - mean) * inv_std(r);
    }
  }

  Matrix<T> affine(const Matrix<T>& xhat) const {
    Matrix<T> y = xhat.array().rowwise() * gamma_.row(0).array();
    y.rowwise() += beta_.row(0);
    return y;
  }

  Matrix<T> gamma_, beta_, gamma_grad_, beta_grad_;
  double eps_ = 1e-5;
  Matrix<T> xhat_;
  Vector<T> inv_std_;
};

}  // namespace portionnet
