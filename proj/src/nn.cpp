/*
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
 * implied.  See the License for the specific language governing
 * permissions and limitations under the License.
 */

#include "owcp/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "owcp/error.hpp"

namespace owcp {

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

Matrix layer_norm_forward(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache) {
  const auto d = static_cast<double>(x.cols());
  Vector mean = x.rowwise().mean();
  Matrix centered = x.colwise() - mean;
  Vector var = centered.array().square().rowwise().sum() / d;
  cache.inv_std = (var.array() + kLayerNormEps).rsqrt();
  cache.normalized = centered.array().colwise() * cache.inv_std.array();
  Matrix y = cache.normalized.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const LayerNormCache& cache,
                           Matrix& dgain, Matrix& dbias) {
  const auto d = static_cast<double>(dy.cols());
  dgain.row(0) += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
  Vector sum_dxhat = dxhat.rowwise().sum();
  Vector sum_dxhat_xhat = (dxhat.array() * cache.normalized.array()).rowwise().sum();
  Matrix dx = (d * dxhat.array() - cache.normalized.array().colwise() * sum_dxhat_xhat.array())
                  .colwise() - sum_dxhat.array();
  dx = dx.array().colwise() * (cache.inv_std.array() / d);
  return dx;
}

void softmax_rows(Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = row.maxCoeff();
    if (!std::isfinite(mx)) {
      row.setZero();
      continue;
    }
    for (Eigen::Index c = 0; c < row.size(); ++c) {
      row(c) = std::isinf(row(c)) ? 0.0 : std::exp(row(c) - mx);
    }
    row /= row.sum();
  }
}

void Adam::step(std::vector<ParamRef>& params, double lr, const std::vector<double>& lr_scale) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
      v_.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
    }
  }
  ++t_;
  double clip = 1.0;
  if (config_.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& p : params) sq += p.grad->squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > config_.grad_clip) clip = config_.grad_clip / norm;
  }
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double scale = i < lr_scale.size() ? lr_scale[i] : 1.0;
    if (scale == 0.0) continue;
    const double rate = lr * scale;
    auto g = (*params[i].grad) * clip;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    Matrix& w = *params[i].value;
    w.array() -= rate * ((m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.eps) +
                         config_.weight_decay * w.array());
  }
}

double warmup_linear_lr(double peak, std::int64_t step, std::int64_t total_steps, double warmup_fraction) {
  if (total_steps <= 0) return peak;
  const auto warmup = static_cast<std::int64_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (warmup >= total_steps) return peak;
  return peak * std::max(0.0, static_cast<double>(total_steps - step) /
                                  static_cast<double>(total_steps - warmup));
}

void zero_grads(std::vector<ParamRef>& params) {
  for (auto& p : params) p.grad->setZero();
}

Mlp Mlp::zeros_like() const {
  Mlp g = *this;
  for (auto& w : g.weights) w.setZero();
  for (auto& b : g.biases) b.setZero();
  return g;
}

Mlp init_mlp(const std::vector<Eigen::Index>& sizes, Rng& rng, double leak) {
  if (sizes.size() < 2) throw ConfigError("an MLP needs input and output sizes");
  for (auto n : sizes)
    if (n < 1) throw ConfigError("MLP layer widths must be >= 1");
  Mlp net;
  net.leak = leak;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    net.weights.push_back(random_normal(sizes[i], sizes[i + 1], std::sqrt(2.0 / static_cast<double>(sizes[i])), rng));
    net.biases.push_back(Matrix::Zero(1, sizes[i + 1]));
  }
  return net;
}

Matrix mlp_forward(const Mlp& net, const Matrix& x, MlpCache* cache) {
  if (x.cols() != net.input_dim()) throw ConfigError("MLP input width mismatch");
  if (cache != nullptr) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix h = x;
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    if (cache != nullptr) cache->inputs.push_back(h);
    Matrix z = h * net.weights[i];
    z.rowwise() += net.biases[i].row(0);
    if (cache != nullptr) cache->pre.push_back(z);
    if (i + 1 < net.weights.size()) {
      h = z.unaryExpr([leak = net.leak](double v) { return v > 0.0 ? v : leak * v; });
    } else {
      h = std::move(z);
    }
  }
  return h;
}

Matrix mlp_backward(const Mlp& net, const MlpCache& cache, const Matrix& dy, Mlp& grads) {
  Matrix d = dy;
  for (std::size_t k = net.weights.size(); k-- > 0;) {
    if (k + 1 < net.weights.size()) {
      d.array() *= cache.pre[k].array().unaryExpr([leak = net.leak](double v) { return v > 0.0 ? 1.0 : leak; });
    }
    grads.weights[k].noalias() += cache.inputs[k].transpose() * d;
    grads.biases[k] += d.colwise().sum();
    d = d * net.weights[k].transpose();
  }
  return d;
}

std::vector<ParamRef> mlp_param_refs(Mlp& net, Mlp& grads, const std::string& prefix) {
  std::vector<ParamRef> refs;
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    refs.push_back({prefix + ".w" + std::to_string(i), &net.weights[i], &grads.weights[i]});
    refs.push_back({prefix + ".b" + std::to_string(i), &net.biases[i], &grads.biases[i]});
  }
  return refs;
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace owcp
