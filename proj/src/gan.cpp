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

#include "owcp/gan.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <json.hpp>

#include "owcp/error.hpp"

namespace owcp {

namespace {

constexpr double kProbFloor = 1e-7;
constexpr double kStdFloor = 1e-6;

Matrix standardize(const GanParams& p, const Matrix& x) {
  Matrix out = x;
  out.rowwise() -= p.data_mean.row(0);
  out.array().rowwise() /= p.data_std.row(0).array();
  return out;
}

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) { return random_normal(rows, cols, 1.0, rng); }

std::vector<Eigen::Index> layer_sizes(Eigen::Index in, const std::vector<Eigen::Index>& hidden, Eigen::Index out) {
  std::vector<Eigen::Index> sizes{in};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(out);
  return sizes;
}

bool params_finite(const GanParams& p) {
  for (const auto* net : {&p.generator, &p.discriminator}) {
    for (const auto& w : net->weights)
      if (!all_finite(w)) return false;
    for (const auto& b : net->biases)
      if (!all_finite(b)) return false;
  }
  return true;
}

}  // namespace

void GanConfig::validate() const {
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (batch_size < 1) throw ConfigError("gan batch_size must be >= 1");
  if (gen_lr < 0.0 || dis_lr < 0.0) throw ConfigError("gan learning rates must be >= 0");
  for (auto h : gen_hidden)
    if (h < 1) throw ConfigError("generator widths must be >= 1");
  for (auto h : dis_hidden)
    if (h < 1) throw ConfigError("discriminator widths must be >= 1");
}

void GanLog::write(std::ostream& out) const {
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["step"] = e.step;
    j["dis_loss"] = e.dis_loss;
    j["gen_loss"] = e.gen_loss;
    j["dis_accuracy"] = e.dis_accuracy;
    out << j.dump() << '\n';
  }
}

GanParams init_gan(std::span<const FlowEmbedding> data, const GanConfig& config) {
  config.validate();
  if (data.empty()) throw ConfigError("gan training set is empty");
  const Eigen::Index d = data[0].size();
  for (const auto& e : data)
    if (e.size() != d) throw ConfigError("gan training embeddings differ in width");

  GanParams p;
  Rng rng(config.seed);
  p.generator = init_mlp(layer_sizes(static_cast<Eigen::Index>(config.latent_dim), config.gen_hidden, d), rng);
  p.discriminator = init_mlp(layer_sizes(d, config.dis_hidden, 1), rng);
  p.data_mean = Matrix::Zero(1, d);
  for (const auto& e : data) p.data_mean += e;
  p.data_mean /= static_cast<double>(data.size());
  p.data_std = Matrix::Zero(1, d);
  for (const auto& e : data) p.data_std.array() += (e - p.data_mean.row(0)).array().square();
  p.data_std = (p.data_std / static_cast<double>(data.size())).array().sqrt().max(kStdFloor).matrix();
  return p;
}

Vector discriminate(const GanParams& params, const Matrix& x) {
  const Matrix logits = mlp_forward(params.discriminator, standardize(params, x));
  Vector out(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) out(i) = std::clamp(sigmoid(logits(i, 0)), kProbFloor, 1.0 - kProbFloor);
  return out;
}

double discriminator_accuracy(const GanParams& params, const Matrix& real, const Matrix& fake) {
  const Vector r = discriminate(params, real);
  const Vector f = discriminate(params, fake);
  const auto correct = (r.array() > 0.5).count() + (f.array() < 0.5).count();
  return static_cast<double>(correct) / static_cast<double>(r.size() + f.size());
}

GanResult train_gan(std::span<const FlowEmbedding> data, const GanConfig& config) {
  GanResult result;
  result.params = init_gan(data, config);
  if (config.steps == 0) return result;
  if (data.size() < config.batch_size) {
    throw ConfigError("gan needs at least batch_size (" + std::to_string(config.batch_size) +
                      ") embeddings, got " + std::to_string(data.size()));
  }

  GanParams& p = result.params;
  Matrix all(static_cast<Eigen::Index>(data.size()), p.dim());
  for (std::size_t i = 0; i < data.size(); ++i) all.row(static_cast<Eigen::Index>(i)) = data[i];
  const Matrix real_all = standardize(p, all);

  Mlp g_grad = p.generator.zeros_like();
  Mlp d_grad = p.discriminator.zeros_like();
  Mlp d_scratch = p.discriminator.zeros_like();
  auto g_refs = mlp_param_refs(p.generator, g_grad, "gen");
  auto d_refs = mlp_param_refs(p.discriminator, d_grad, "dis");
  const AdamConfig adam_cfg{0.5, 0.999, 1e-8, 0.0, 5.0};
  Adam g_opt(adam_cfg), d_opt(adam_cfg);

  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<Eigen::Index> pick(0, real_all.rows() - 1);
  const auto b = static_cast<Eigen::Index>(config.batch_size);
  const auto latent = static_cast<Eigen::Index>(config.latent_dim);
  const double inv_b = 1.0 / static_cast<double>(b);
  GanParams last_good = p;
  MlpCache g_cache, dr_cache, df_cache, dg_cache;

  for (std::size_t step = 0; step < config.steps; ++step) {
    Matrix real(b, p.dim());
    for (Eigen::Index i = 0; i < b; ++i) real.row(i) = real_all.row(pick(rng));

    // Discriminator: -log D(x) - log(1 - D(G(z))).
    const Matrix fake = mlp_forward(p.generator, gaussian(b, latent, rng));
    const Matrix lr_logits = mlp_forward(p.discriminator, real, &dr_cache);
    const Matrix lf_logits = mlp_forward(p.discriminator, fake, &df_cache);
    double dis_loss = 0.0;
    std::size_t correct = 0;
    Matrix d_real(b, 1), d_fake(b, 1);
    for (Eigen::Index i = 0; i < b; ++i) {
      dis_loss += inv_b * (softplus(-lr_logits(i, 0)) + softplus(lf_logits(i, 0)));
      d_real(i, 0) = inv_b * (sigmoid(lr_logits(i, 0)) - 1.0);
      d_fake(i, 0) = inv_b * sigmoid(lf_logits(i, 0));
      correct += (lr_logits(i, 0) > 0.0) + (lf_logits(i, 0) < 0.0);
    }

    auto abort = [&](const std::string& what) {
      result.aborted = true;
      result.abort_reason = "non-finite " + what + " at step " + std::to_string(step);
      p = last_good;
      return result;
    };
    if (!std::isfinite(dis_loss)) return abort("discriminator loss");
    last_good = p;
    zero_grads(d_refs);
    mlp_backward(p.discriminator, dr_cache, d_real, d_grad);
    mlp_backward(p.discriminator, df_cache, d_fake, d_grad);
    d_opt.step(d_refs, config.dis_lr);

    // Generator: -log D(G(z)) on a fresh draw, against the updated discriminator.
    const Matrix fake2 = mlp_forward(p.generator, gaussian(b, latent, rng), &g_cache);
    const Matrix lg_logits = mlp_forward(p.discriminator, fake2, &dg_cache);
    double gen_loss = 0.0;
    Matrix d_gen(b, 1);
    for (Eigen::Index i = 0; i < b; ++i) {
      gen_loss += inv_b * softplus(-lg_logits(i, 0));
      d_gen(i, 0) = inv_b * (sigmoid(lg_logits(i, 0)) - 1.0);
    }
    if (!std::isfinite(gen_loss) || !params_finite(p)) return abort("generator loss");
    const Matrix d_fake2 = mlp_backward(p.discriminator, dg_cache, d_gen, d_scratch);
    zero_grads(g_refs);
    mlp_backward(p.generator, g_cache, d_fake2, g_grad);
    g_opt.step(g_refs, config.gen_lr);

    if (step % 10 == 0) {
      result.log.entries.push_back({static_cast<std::int64_t>(step), dis_loss, gen_loss,
                                    static_cast<double>(correct) / static_cast<double>(2 * b)});
    }
  }
  if (!params_finite(p)) {
    result.aborted = true;
    result.abort_reason = "non-finite gan parameters after the last step";
    p = last_good;
  }
  return result;
}

std::vector<FlowEmbedding> synthesize(const GanParams& params, std::size_t count, std::uint64_t seed) {
  std::vector<FlowEmbedding> out;
  if (count == 0) return out;
  Rng rng(seed);
  const Matrix z = gaussian(static_cast<Eigen::Index>(count), params.generator.input_dim(), rng);
  Matrix x = mlp_forward(params.generator, z);
  x.array().rowwise() *= params.data_std.row(0).array();
  x.rowwise() += params.data_mean.row(0);
  out.reserve(count);
  for (Eigen::Index i = 0; i < x.rows(); ++i) out.push_back(x.row(i));
  return out;
}

std::vector<FlowEmbedding> synthesize(std::span<const GanParams> params, std::size_t count, std::uint64_t seed) {
  if (params.empty()) throw ConfigError("no generators to sample from");
  std::vector<FlowEmbedding> out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::size_t share = count / params.size() + (k < count % params.size() ? 1 : 0);
    auto part = synthesize(params[k], share, seed + k);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

TensorArchive gan_checkpoint(const GanParams& params, const GanConfig& config) {
  TensorArchive a("gan");
  a.meta()["latent_dim"] = config.latent_dim;
  a.meta()["gen_layers"] = params.generator.weights.size();
  a.meta()["dis_layers"] = params.discriminator.weights.size();
  a.meta()["leak"] = params.generator.leak;
  a.meta()["seed"] = config.seed;
  for (const auto& [prefix, net] : {std::pair{"gen", &params.generator}, std::pair{"dis", &params.discriminator}}) {
    for (std::size_t i = 0; i < net->weights.size(); ++i) {
      a.add(std::string(prefix) + ".w" + std::to_string(i), net->weights[i]);
      a.add(std::string(prefix) + ".b" + std::to_string(i), net->biases[i]);
    }
  }
  a.add("data_mean", params.data_mean);
  a.add("data_std", params.data_std);
  return a;
}

GanParams read_gan_checkpoint(const TensorArchive& archive) {
  if (archive.kind() != "gan") throw ParseError("expected a gan archive, got '" + archive.kind() + "'", 0);
  GanParams p;
  const double leak = archive.meta().at("leak").get<double>();
  for (const auto& [prefix, net] : {std::pair{"gen", &p.generator}, std::pair{"dis", &p.discriminator}}) {
    net->leak = leak;
    const auto layers = archive.meta().at(std::string(prefix) + "_layers").get<std::size_t>();
    for (std::size_t i = 0; i < layers; ++i) {
      net->weights.push_back(archive.get(std::string(prefix) + ".w" + std::to_string(i)));
      net->biases.push_back(archive.get(std::string(prefix) + ".b" + std::to_string(i)));
    }
  }
  p.data_mean = archive.get("data_mean");
  p.data_std = archive.get("data_std");
  return p;
}

TensorArchive synthetic_archive(const std::vector<FlowEmbedding>& samples, const std::string& generator_hash,
                                std::uint64_t seed) {
  TensorArchive a("synthetic");
  a.meta()["generator_hash"] = generator_hash;
  a.meta()["count"] = samples.size();
  a.meta()["seed"] = seed;
  a.meta()["label"] = "unknown";
  a.add("embeddings", stack_rows(samples, samples.empty() ? 0 : samples[0].size()));
  return a;
}

std::vector<FlowEmbedding> read_synthetic_archive(const TensorArchive& archive) {
  if (archive.kind() != "synthetic") throw ParseError("expected a synthetic archive, got '" + archive.kind() + "'", 0);
  return unstack_rows(archive.get("embeddings"));
}

}  // namespace owcp
