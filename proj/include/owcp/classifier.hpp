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

#ifndef OWCP_CLASSIFIER_HPP
#define OWCP_CLASSIFIER_HPP

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "owcp/encoder.hpp"
#include "owcp/pretrain.hpp"
#include "owcp/tensor_io.hpp"

namespace owcp {

inline const std::string kUnknownLabel = "UNKNOWN";

// Encoder plus a dense head. With an unknown node the head has k + 1
// outputs and node k is the unknown class; the baseline head has k.
struct ClassifierParams {
  EncoderParams encoder;
  EncoderConfig encoder_config;
  Matrix head_w;  // d_model x outputs
  Matrix head_b;  // 1 x outputs
  std::vector<std::string> classes;  // known classes, index = node
  bool unknown_node = true;
  // Set when fine-tuning had no synthetic samples to train the unknown node.
  bool unknown_node_untrained = false;

  std::size_t known_count() const { return classes.size(); }
  std::size_t outputs() const { return classes.size() + (unknown_node ? 1 : 0); }
  bool operator==(const ClassifierParams&) const = default;
};

struct FinetuneConfig {
  std::size_t epochs = 4;
  std::size_t batch_size = 32;
  double learning_rate = 1e-2;  // head
  double encoder_lr_scale = 0.1;
  bool head_only = false;
  double warmup_fraction = 0.1;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
  // Adds the unknown node; false builds the thresholding-softmax baseline.
  bool unknown_node = true;

  void validate() const;
};

struct FinetuneResult {
  ClassifierParams params;
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;  // on D, known-class argmax, after training
};

// Cross-entropy over the head's outputs. Known flows go through the encoder;
// synthetic embeddings enter at the head with target k. Every batch mixes
// both sources in proportion. Throws ConfigError when `known` is empty, on
// a synthetic set given to a baseline head, or on a class named UNKNOWN.
FinetuneResult finetune(const LabeledSequences& known, std::span<const FlowEmbedding> synthetic,
                        const EncoderParams& encoder, const EncoderConfig& encoder_config,
                        const FinetuneConfig& config);

struct DecisionConfig {
  double sigma = 0.7;
  // Lets the unknown node win the argmax outright.
  bool unknown_in_argmax = false;

  void validate() const;
};

struct Prediction {
  std::string label;  // a known class or kUnknownLabel
  std::optional<std::size_t> known_index;
  RowVector probabilities;

  bool unknown() const { return !known_index.has_value(); }
};

RowVector head_probabilities(const FlowEmbedding& embedding, const ClassifierParams& params);

// Known-only argmax l*; known if P(l*) >= sigma, else UNKNOWN. Works for
// both head shapes; with a k-node head this is the thresholding softmax.
Prediction decide(const RowVector& probabilities, const std::vector<std::string>& classes,
                  const DecisionConfig& decision);

Prediction predict_embedding(const FlowEmbedding& embedding, const ClassifierParams& params,
                             const DecisionConfig& decision);
Prediction predict(const TokenSequence& flow, const ClassifierParams& params, const DecisionConfig& decision);

// Baseline rule on a k-node head: argmax over k, UNKNOWN iff max < sigma.
Prediction baseline_threshold_softmax(const TokenSequence& flow, const ClassifierParams& params, double sigma);

std::vector<FlowEmbedding> classifier_embed_all(std::span<const TokenSequence> flows, const ClassifierParams& params);

// Grid search maximizing open-world accuracy on known validation embeddings
// plus simulated-open embeddings, ties toward the smaller sigma. Throws
// ConfigError on an empty grid, a grid value outside (0, 1] or an empty set.
double calibrate_sigma(const ClassifierParams& params, std::span<const FlowEmbedding> val_known,
                       std::span<const std::string> val_labels, std::span<const FlowEmbedding> opens,
                       std::span<const double> grid, bool unknown_in_argmax = false);

// Default calibration grid: 0.05 .. 0.95 in steps of 0.05.
std::vector<double> default_sigma_grid();

// {"flow_id", "predicted_label", "probabilities", "decision"} per line.
void write_prediction(std::ostream& out, const std::string& flow_id, const Prediction& p);

TensorArchive classifier_checkpoint(const ClassifierParams& params);
ClassifierParams read_classifier_checkpoint(const TensorArchive& archive);

}  // namespace owcp

#endif  // OWCP_CLASSIFIER_HPP
