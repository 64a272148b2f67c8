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

#ifndef OWCP_PRETRAIN_HPP
#define OWCP_PRETRAIN_HPP

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "owcp/encoder.hpp"

namespace owcp {

// Encoded flows with their class labels, index-aligned.
struct LabeledSequences {
  std::vector<TokenSequence> sequences;
  std::vector<std::string> labels;

  std::size_t size() const { return sequences.size(); }
};

// Indices into a LabeledSequences. label(positive) == label(anchor) and
// label(negative) != label(anchor) at every position.
struct TripletBatch {
  std::vector<std::size_t> anchors;
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
  std::vector<std::string> labels;  // anchor labels

  std::size_t size() const { return anchors.size(); }
  bool operator==(const TripletBatch&) const = default;
};

struct ContrastiveConfig {
  double temperature = 0.1;
  std::size_t batch_size = 16;
  std::size_t steps = 1000;
  double learning_rate = 5e-5;
  double warmup_fraction = 0.03;
  std::uint64_t seed = 1;
  // Smoothing of the running loss used to pick the best checkpoint.
  double running_decay = 0.9;

  void validate() const;
};

// Throws ConfigError when fewer than two classes exist or no class has two
// flows. Anchors from single-flow classes are skipped and redrawn.
TripletBatch sample_triplets(std::span<const std::string> labels, std::size_t batch_size, Rng& rng);
TripletBatch sample_triplets(std::span<const std::string> labels, std::size_t batch_size, std::uint64_t seed);

double cosine_similarity(const RowVector& a, const RowVector& b);

struct ContrastiveGrad {
  double loss = 0.0;
  RowVector d_anchor;
  std::vector<RowVector> d_positives;
  std::vector<RowVector> d_negatives;
};

// InfoNCE with cosine similarity:
//   mean over positives p of -log(e^{s_p} / (e^{s_p} + sum_n e^{s_n})), s = cos / tau.
// Throws ConfigError when tau <= 0 or either set is empty.
double contrastive_loss(const RowVector& anchor, std::span<const RowVector> positives,
                        std::span<const RowVector> negatives, double temperature);
ContrastiveGrad contrastive_loss_grad(const RowVector& anchor, std::span<const RowVector> positives,
                                      std::span<const RowVector> negatives, double temperature);

// Batch objective over 3B embeddings laid out [anchors | positives | negatives].
// Each anchor's negatives are every in-batch embedding whose label differs.
// Returns the mean loss and fills d_embeddings (same layout).
double batch_contrastive_loss(std::span<const RowVector> embeddings, std::span<const std::string> labels,
                              std::size_t batch, double temperature, std::vector<RowVector>& d_embeddings);

struct TrainingLogEntry {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double running_loss = 0.0;

  bool operator==(const TrainingLogEntry&) const = default;
};

struct TrainingLog {
  std::vector<TrainingLogEntry> entries;

  // One JSON object per line: {"step", "loss", "lr", "running_loss"}.
  void write(std::ostream& out) const;
  bool operator==(const TrainingLog&) const = default;
};

struct PretrainResult {
  EncoderParams params;  // lowest running loss seen
  TrainingLog log;
  std::int64_t best_step = -1;
};

// Throws NumericError on a non-finite loss.
PretrainResult run_pretraining(const LabeledSequences& corpus, const EncoderParams& init,
                               const EncoderConfig& encoder, const ContrastiveConfig& config);

}  // namespace owcp

#endif  // OWCP_PRETRAIN_HPP
