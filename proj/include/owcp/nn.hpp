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

#ifndef OWCP_NN_HPP
#define OWCP_NN_HPP

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace owcp {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

using Rng = std::mt19937_64;

// Named view over one trainable tensor and its gradient buffer.
struct ParamRef {
  std::string name;
  Matrix* value;
  Matrix* grad;
};

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

bool all_finite(const Matrix& m);

// Row-wise layer normalization with learned gain and bias (1 x d each).
struct LayerNormCache {
  Matrix normalized;  // (x - mean) / std
  Vector inv_std;
};

inline constexpr double kLayerNormEps = 1e-5;

Matrix layer_norm_forward(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache);
// Returns dL/dx and accumulates gain/bias gradients.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const LayerNormCache& cache,
                           Matrix& dgain, Matrix& dbias);

// In-place row softmax. Entries equal to -infinity get probability 0.
void softmax_rows(Matrix& m);

// Decoupled-weight-decay Adam, as used for transformer fine-tuning.
struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global L2 norm, <= 0 disables
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // One update. `lr_scale` multiplies the group's rate (0 freezes the group).
  void step(std::vector<ParamRef>& params, double lr, const std::vector<double>& lr_scale = {});

  std::int64_t steps() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t t_ = 0;
};

// Linear warmup to the peak rate over the first warmup_fraction of steps,
// then linear decay to zero at total_steps.
double warmup_linear_lr(double peak, std::int64_t step, std::int64_t total_steps, double warmup_fraction);

void zero_grads(std::vector<ParamRef>& params);

// Fully connected stack: leaky ReLU after every layer but the last, which is linear.
struct Mlp {
  std::vector<Matrix> weights;  // fan_in x fan_out
  std::vector<Matrix> biases;   // 1 x fan_out
  double leak = 0.2;

  Mlp zeros_like() const;
  Eigen::Index input_dim() const { return weights.front().rows(); }
  Eigen::Index output_dim() const { return weights.back().cols(); }
  bool operator==(const Mlp&) const = default;
};

struct MlpCache {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation of each layer
};

// sizes = {in, hidden..., out}; weights ~ N(0, 2 / fan_in), zero biases.
Mlp init_mlp(const std::vector<Eigen::Index>& sizes, Rng& rng, double leak = 0.2);
Matrix mlp_forward(const Mlp& net, const Matrix& x, MlpCache* cache = nullptr);
// Accumulates parameter gradients into `grads` and returns dL/dx.
Matrix mlp_backward(const Mlp& net, const MlpCache& cache, const Matrix& dy, Mlp& grads);
std::vector<ParamRef> mlp_param_refs(Mlp& net, Mlp& grads, const std::string& prefix);

// log(1 + e^x) without overflow.
double softplus(double x);
double sigmoid(double x);

}  // namespace owcp

#endif  // OWCP_NN_HPP
