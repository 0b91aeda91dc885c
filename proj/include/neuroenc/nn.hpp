#pragma once

#include <cmath>
#include <vector>

#include "neuroenc/common.hpp"
#include "neuroenc/rng.hpp"

// Minimal dense/conv layer kit with explicit backward passes. Activations are
// (batch x features) matrices; image features are laid out channel-major,
// index = c*H*W + y*W + x.

namespace neuroenc::nn {

template <typename T>
struct ParamRef {
  Mat<T>* value;
  Mat<T>* grad;
};

template <typename T>
void gaussian_init(Mat<T>& m, Rng& rng, double stddev) {
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i)
      m(i, j) = static_cast<T>(rng.normal() * stddev);
}

template <typename T>
void uniform_init(Mat<T>& m, Rng& rng, double bound) {
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i)
      m(i, j) = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(Index in_dim, Index out_dim, Rng& rng, bool with_bias = true)
      : with_bias_(with_bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    weight.resize(out_dim, in_dim);
    gaussian_init(weight, rng, bound);
    bias = Mat<T>::Zero(1, with_bias ? out_dim : 0);
    if (with_bias) uniform_init(bias, rng, bound);
    dweight = Mat<T>::Zero(out_dim, in_dim);
    dbias = Mat<T>::Zero(1, bias.cols());
  }

  Mat<T> forward(const Mat<T>& x) {
    input_ = x;
    Mat<T> y = x * weight.transpose();
    if (with_bias_) y.rowwise() += bias.row(0);
    return y;
  }

  /// Forward without caching; for inference paths.
  Mat<T> apply(const Mat<T>& x) const {
    Mat<T> y = x * weight.transpose();
    if (with_bias_) y.rowwise() += bias.row(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& dy, bool need_dx = true) {
    dweight.noalias() += dy.transpose() * input_;
    if (with_bias_) dbias.row(0) += dy.colwise().sum();
    if (!need_dx) return Mat<T>();
    return dy * weight;
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> p{{&weight, &dweight}};
    if (with_bias_) p.push_back({&bias, &dbias});
    return p;
  }

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }

  Mat<T> weight, bias, dweight, dbias;

 private:
  bool with_bias_ = true;
  Mat<T> input_;
};

template <typename T>
class ReLU {
 public:
  Mat<T> forward(const Mat<T>& x) {
    out_ = x.cwiseMax(T(0));
    return out_;
  }
  Mat<T> apply(const Mat<T>& x) const { return x.cwiseMax(T(0)); }
  Mat<T> backward(const Mat<T>& dy) const {
    return (out_.array() > T(0)).template cast<T>() * dy.array();
  }

 private:
  Mat<T> out_;
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  // 'same'-style padding k/2; odd kernels keep spatial dims at stride 1.
  Conv2d(Index in_ch, Index out_ch, Index kernel, Index stride, Index in_h,
         Index in_w, Rng& rng)
      : in_ch_(in_ch),
        out_ch_(out_ch),
        k_(kernel),
        stride_(stride),
        pad_(kernel / 2),
        in_h_(in_h),
        in_w_(in_w) {
    out_h_ = (in_h_ + 2 * pad_ - k_) / stride_ + 1;
    out_w_ = (in_w_ + 2 * pad_ - k_) / stride_ + 1;
    require(out_h_ >= 1 && out_w_ >= 1, "Conv2d: empty output plane");
    const double bound = 1.0 / std::sqrt(static_cast<double>(k_ * k_ * in_ch_));
    weight.resize(out_ch_, k_ * k_ * in_ch_);
    gaussian_init(weight, rng, bound);
    bias = Mat<T>::Zero(1, out_ch_);
    uniform_init(bias, rng, bound);
    dweight = Mat<T>::Zero(weight.rows(), weight.cols());
    dbias = Mat<T>::Zero(1, out_ch_);
  }

  Index out_h() const { return out_h_; }
  Index out_w() const { return out_w_; }
  Index out_dim() const { return out_ch_ * out_h_ * out_w_; }
  Index in_dim() const { return in_ch_ * in_h_ * in_w_; }

  Mat<T> forward(const Mat<T>& x, bool cache = true) {
    const Index batch = x.rows();
    const Index opix = out_h_ * out_w_;
    Mat<T> cols = im2col(x);
    Mat<T> yflat = cols * weight.transpose();  // (B*opix) x out_ch
    yflat.rowwise() += bias.row(0);
    if (cache) cols_ = std::move(cols);
    Mat<T> y(batch, out_dim());
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < out_ch_; ++c)
        for (Index p = 0; p < opix; ++p)
          y(b, c * opix + p) = yflat(b * opix + p, c);
    return y;
  }

  Mat<T> backward(const Mat<T>& dy, bool need_dx = true) {
    const Index batch = dy.rows();
    const Index opix = out_h_ * out_w_;
    Mat<T> dyflat(batch * opix, out_ch_);
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < out_ch_; ++c)
        for (Index p = 0; p < opix; ++p)
          dyflat(b * opix + p, c) = dy(b, c * opix + p);
    dweight.noalias() += dyflat.transpose() * cols_;
    dbias.row(0) += dyflat.colwise().sum();
    if (!need_dx) return Mat<T>();
    Mat<T> dcols = dyflat * weight;
    return col2im(dcols, batch);
  }

  std::vector<ParamRef<T>> params() {
    return {{&weight, &dweight}, {&bias, &dbias}};
  }

  Mat<T> weight, bias, dweight, dbias;

 private:
  Mat<T> im2col(const Mat<T>& x) const {
    const Index batch = x.rows();
    const Index opix = out_h_ * out_w_;
    Mat<T> cols(batch * opix, k_ * k_ * in_ch_);
    for (Index c = 0; c < in_ch_; ++c) {
      for (Index ky = 0; ky < k_; ++ky) {
        for (Index kx = 0; kx < k_; ++kx) {
          const Index col = (c * k_ + ky) * k_ + kx;
          for (Index b = 0; b < batch; ++b) {
            for (Index oy = 0; oy < out_h_; ++oy) {
              const Index iy = oy * stride_ - pad_ + ky;
              for (Index ox = 0; ox < out_w_; ++ox) {
                const Index ix = ox * stride_ - pad_ + kx;
                T v = T(0);
                if (iy >= 0 && iy < in_h_ && ix >= 0 && ix < in_w_)
                  v = x(b, c * in_h_ * in_w_ + iy * in_w_ + ix);
                cols(b * opix + oy * out_w_ + ox, col) = v;
              }
            }
          }
        }
      }
    }
    return cols;
  }

  Mat<T> col2im(const Mat<T>& dcols, Index batch) const {
    const Index opix = out_h_ * out_w_;
    Mat<T> dx = Mat<T>::Zero(batch, in_dim());
    for (Index c = 0; c < in_ch_; ++c) {
      for (Index ky = 0; ky < k_; ++ky) {
        for (Index kx = 0; kx < k_; ++kx) {
          const Index col = (c * k_ + ky) * k_ + kx;
          for (Index b = 0; b < batch; ++b) {
            for (Index oy = 0; oy < out_h_; ++oy) {
              const Index iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= in_h_) continue;
              for (Index ox = 0; ox < out_w_; ++ox) {
                const Index ix = ox * stride_ - pad_ + kx;
                if (ix < 0 || ix >= in_w_) continue;
                dx(b, c * in_h_ * in_w_ + iy * in_w_ + ix) +=
                    dcols(b * opix + oy * out_w_ + ox, col);
              }
            }
          }
        }
      }
    }
    return dx;
  }

  Index in_ch_ = 0, out_ch_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
  Index in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
  Mat<T> cols_;
};

/// 2x2 max pooling with stride 2; trailing odd rows/cols are dropped.
template <typename T>
class MaxPool2d {
 public:
  MaxPool2d() = default;
  MaxPool2d(Index channels, Index in_h, Index in_w)
      : ch_(channels), in_h_(in_h), in_w_(in_w), out_h_(in_h / 2), out_w_(in_w / 2) {
    require(out_h_ >= 1 && out_w_ >= 1, "MaxPool2d: empty output plane");
  }

  Index out_h() const { return out_h_; }
  Index out_w() const { return out_w_; }
  Index out_dim() const { return ch_ * out_h_ * out_w_; }
  Index in_dim() const { return ch_ * in_h_ * in_w_; }

  Mat<T> forward(const Mat<T>& x, bool cache = true) {
    const Index batch = x.rows();
    Mat<T> y(batch, out_dim());
    Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic> arg(batch, out_dim());
    for (Index b = 0; b < batch; ++b) {
      for (Index c = 0; c < ch_; ++c) {
        const Index ibase = c * in_h_ * in_w_;
        const Index obase = c * out_h_ * out_w_;
        for (Index oy = 0; oy < out_h_; ++oy) {
          for (Index ox = 0; ox < out_w_; ++ox) {
            Index best = ibase + (2 * oy) * in_w_ + 2 * ox;
            T bv = x(b, best);
            for (Index dy = 0; dy < 2; ++dy)
              for (Index dx = 0; dx < 2; ++dx) {
                const Index idx = ibase + (2 * oy + dy) * in_w_ + (2 * ox + dx);
                if (x(b, idx) > bv) {
                  bv = x(b, idx);
                  best = idx;
                }
              }
            y(b, obase + oy * out_w_ + ox) = bv;
            arg(b, obase + oy * out_w_ + ox) = best;
          }
        }
      }
    }
    if (cache) arg_ = std::move(arg);
    return y;
  }

  Mat<T> backward(const Mat<T>& dy) const {
    Mat<T> dx = Mat<T>::Zero(dy.rows(), in_dim());
    for (Index b = 0; b < dy.rows(); ++b)
      for (Index o = 0; o < out_dim(); ++o) dx(b, arg_(b, o)) += dy(b, o);
    return dx;
  }

 private:
  Index ch_ = 0, in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic> arg_;
};

template <typename T>
class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  explicit BatchNorm1d(Index dim)
      : gamma(Mat<T>::Ones(1, dim)),
        beta(Mat<T>::Zero(1, dim)),
        dgamma(Mat<T>::Zero(1, dim)),
        dbeta(Mat<T>::Zero(1, dim)),
        running_mean(Vec<T>::Zero(dim)),
        running_var(Vec<T>::Ones(dim)) {}

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  /// Evaluation-mode pass over the running statistics.
  Mat<T> infer(const Mat<T>& x) const {
    Mat<T> xhat = (x.rowwise() - running_mean.transpose()).array().rowwise() /
                  (running_var.array() + eps_).sqrt().transpose();
    return (xhat.array().rowwise() * gamma.row(0).array()).rowwise() +
           beta.row(0).array();
  }

  Mat<T> forward(const Mat<T>& x) {
    const Index batch = x.rows();
    if (!training_) return infer(x);
    require(batch >= 2, "BatchNorm1d: training batch must have >= 2 rows");
    Vec<T> mu = x.colwise().mean();
    Mat<T> centered = x.rowwise() - mu.transpose();
    Vec<T> var = centered.array().square().colwise().mean();  // biased
    inv_std_ = (var.array() + eps_).rsqrt();
    xhat_ = centered.array().rowwise() * inv_std_.transpose().array();
    const T unbias = static_cast<T>(batch) / static_cast<T>(batch - 1);
    running_mean = (T(1) - momentum_) * running_mean + momentum_ * mu;
    running_var = (T(1) - momentum_) * running_var + momentum_ * (var * unbias);
    return (xhat_.array().rowwise() * gamma.row(0).array()).rowwise() +
           beta.row(0).array();
  }

  Mat<T> backward(const Mat<T>& dy) {
    const T batch = static_cast<T>(dy.rows());
    dgamma.row(0) += (dy.array() * xhat_.array()).colwise().sum().matrix();
    dbeta.row(0) += dy.colwise().sum();
    Mat<T> dxhat = dy.array().rowwise() * gamma.row(0).array();
    Vec<T> sum_dxhat = dxhat.colwise().sum();
    Vec<T> sum_dxhat_xhat = (dxhat.array() * xhat_.array()).colwise().sum();
    Mat<T> dx =
        (dxhat * batch).rowwise() - sum_dxhat.transpose();
    dx.array() -= xhat_.array().rowwise() * sum_dxhat_xhat.transpose().array();
    dx.array().rowwise() *= (inv_std_.transpose().array() / batch);
    return dx;
  }

  std::vector<ParamRef<T>> params() {
    return {{&gamma, &dgamma}, {&beta, &dbeta}};
  }

  Mat<T> gamma, beta, dgamma, dbeta;
  Vec<T> running_mean, running_var;

 private:
  bool training_ = true;
  T eps_ = static_cast<T>(1e-5);
  T momentum_ = static_cast<T>(0.1);
  Vec<T> inv_std_;
  Mat<T> xhat_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<ParamRef<T>> params, const AdamConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    for (auto& p : params_) {
      m_.push_back(Mat<T>::Zero(p.value->rows(), p.value->cols()));
      v_.push_back(Mat<T>::Zero(p.value->rows(), p.value->cols()));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.grad->setZero();
  }

  void step() {
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T corr1 = T(1) - std::pow(b1, static_cast<T>(t_));
    const T corr2 = T(1) - std::pow(b2, static_cast<T>(t_));
    const T lr = static_cast<T>(cfg_.lr);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const Mat<T>& g = *params_[i].grad;
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
      params_[i].value->array() -=
          lr * (m_[i].array() / corr1) /
          ((v_[i].array() / corr2).sqrt() + eps);
    }
  }

 private:
  std::vector<ParamRef<T>> params_;
  AdamConfig cfg_;
  std::vector<Mat<T>> m_, v_;
  long t_ = 0;
};

template <typename T>
Mat<T> softmax_rows(const Mat<T>& logits) {
  Mat<T> p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const T m = logits.row(i).maxCoeff();
    Eigen::Array<T, 1, Eigen::Dynamic> e = (logits.row(i).array() - m).exp();
    p.row(i) = (e / e.sum()).matrix();
  }
  return p;
}

/// Mean cross-entropy; optionally emits d(loss)/d(logits).
template <typename T>
T softmax_cross_entropy(const Mat<T>& logits, const std::vector<int>& labels,
                        Mat<T>* dlogits = nullptr) {
  require(static_cast<std::size_t>(logits.rows()) == labels.size(),
          "cross_entropy: label count mismatch");
  const Index batch = logits.rows();
  Mat<T> p = softmax_rows(logits);
  T loss = T(0);
  for (Index i = 0; i < batch; ++i)
    loss -= std::log(std::max(p(i, labels[static_cast<std::size_t>(i)]),
                              static_cast<T>(1e-30)));
  loss /= static_cast<T>(batch);
  if (dlogits) {
    *dlogits = p;
    for (Index i = 0; i < batch; ++i)
      (*dlogits)(i, labels[static_cast<std::size_t>(i)]) -= T(1);
    *dlogits /= static_cast<T>(batch);
  }
  return loss;
}

}  // namespace neuroenc::nn
