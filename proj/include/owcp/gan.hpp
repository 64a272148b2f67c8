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

#ifndef OWCP_GAN_HPP
#define OWCP_GAN_HPP

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "owcp/encoder.hpp"
#include "owcp/nn.hpp"
#include "owcp/tensor_io.hpp"

namespace owcp {

struct GanConfig {
  std::size_t latent_dim = 16;
  std::vector<Eigen::Index> gen_hidden{64, 64};
  std::vector<Eigen::Index> dis_hidden{64, 64};
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  double gen_lr = 5e-4;
  double dis_lr = 5e-4;
  std::uint64_t seed = 1;
  // One GAN per class instead of one over the pooled marginal set.
  bool per_class = false;

  void validate() const;
};

// Inputs are standardized per dimension before the discriminator sees them;
// the generator works in standardized units and synthesize() maps back.
struct GanParams {
  Mlp generator;
  Mlp discriminator;
  Matrix data_mean;  // 1 x d
  Matrix data_std;   // 1 x d

  Eigen::Index dim() const { return data_mean.cols(); }
  bool operator==(const GanParams&) const = default;
};

struct GanLogEntry {
  std::int64_t step = 0;
  double dis_loss = 0.0;
  double gen_loss = 0.0;
  double dis_accuracy = 0.0;

  bool operator==(const GanLogEntry&) const = default;
};

struct GanLog {
  std::vector<GanLogEntry> entries;  // every 10th step

  void write(std::ostream& out) const;
  bool operator==(const GanLog&) const = default;
};

struct GanResult {
  GanParams params;
  GanLog log;
  // Set when a loss went non-finite; params are the last finite ones.
  bool aborted = false;
  std::string abort_reason;
};

GanParams init_gan(std::span<const FlowEmbedding> data, const GanConfig& config);

// Alternating updates, one discriminator then one generator step per
// iteration, with the non-saturating generator loss -log D(G(z)).
// Throws ConfigError with fewer than batch_size embeddings or mixed widths.
GanResult train_gan(std::span<const FlowEmbedding> data, const GanConfig& config);

// D(x) for raw (unstandardized) rows, clamped strictly inside (0, 1).
Vector discriminate(const GanParams& params, const Matrix& x);

// Fraction of reals with D > 0.5 plus fakes with D < 0.5, over both sets.
double discriminator_accuracy(const GanParams& params, const Matrix& real, const Matrix& fake);

// count rows of G(z), z ~ N(0, I), deterministic under seed.
std::vector<FlowEmbedding> synthesize(const GanParams& params, std::size_t count, std::uint64_t seed);
// Splits count as evenly as possible across several generators (per-class mode).
std::vector<FlowEmbedding> synthesize(std::span<const GanParams> params, std::size_t count, std::uint64_t seed);

TensorArchive gan_checkpoint(const GanParams& params, const GanConfig& config);
GanParams read_gan_checkpoint(const TensorArchive& archive);

// Synthetic set container tagged with the generator checkpoint hash.
TensorArchive synthetic_archive(const std::vector<FlowEmbedding>& samples, const std::string& generator_hash,
                                std::uint64_t seed);
std::vector<FlowEmbedding> read_synthetic_archive(const TensorArchive& archive);

}  // namespace owcp

#endif  // OWCP_GAN_HPP
