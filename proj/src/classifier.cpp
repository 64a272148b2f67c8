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

#include "owcp/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <set>

#include <json.hpp>

#include "owcp/error.hpp"

namespace owcp {

namespace {

RowVector softmax(const RowVector& logits) {
  const double m = logits.maxCoeff();
  RowVector p = (logits.array() - m).exp().matrix();
  return p / p.sum();
}

RowVector head_logits(const FlowEmbedding& e, const ClassifierParams& params) {
  return e * params.head_w + params.head_b.row(0);
}

}  // namespace

void FinetuneConfig::validate() const {
  if (batch_size < 1) throw ConfigError("finetune batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("finetune learning_rate must be > 0");
  if (encoder_lr_scale < 0.0) throw ConfigError("encoder_lr_scale must be >= 0");
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0) throw ConfigError("warmup_fraction must be in [0, 1]");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
}

void DecisionConfig::validate() const {
  if (!(sigma > 0.0 && sigma <= 1.0)) throw ConfigError("sigma must be in (0, 1]");
}

RowVector head_probabilities(const FlowEmbedding& embedding, const ClassifierParams& params) {
  return softmax(head_logits(embedding, params));
}

Prediction decide(const RowVector& probabilities, const std::vector<std::string>& classes,
                  const DecisionConfig& decision) {
  decision.validate();
  const auto k = static_cast<Eigen::Index>(classes.size());
  Prediction p;
  p.probabilities = probabilities;
  Eigen::Index best = 0;
  probabilities.head(k).maxCoeff(&best);
  const bool unknown_wins =
      decision.unknown_in_argmax && probabilities.size() > k && probabilities(k) > probabilities(best);
  if (!unknown_wins && probabilities(best) >= decision.sigma) {
    p.known_index = static_cast<std::size_t>(best);
    p.label = classes[static_cast<std::size_t>(best)];
  } else {
    p.label = kUnknownLabel;
  }
  return p;
}

Prediction predict_embedding(const FlowEmbedding& embedding, const ClassifierParams& params,
                             const DecisionConfig& decision) {
  return decide(head_probabilities(embedding, params), params.classes, decision);
}

Prediction predict(const TokenSequence& flow, const ClassifierParams& params, const DecisionConfig& decision) {
  return predict_embedding(embed(flow, params.encoder, params.encoder_config), params, decision);
}

Prediction baseline_threshold_softmax(const TokenSequence& flow, const ClassifierParams& params, double sigma) {
  if (params.unknown_node) throw ConfigError("the thresholding-softmax baseline needs a k-node head");
  return predict(flow, params, {sigma, false});
}

std::vector<FlowEmbedding> classifier_embed_all(std::span<const TokenSequence> flows, const ClassifierParams& params) {
  return embed_all(flows, params.encoder, params.encoder_config);
}

FinetuneResult finetune(const LabeledSequences& known, std::span<const FlowEmbedding> synthetic,
                        const EncoderParams& encoder, const EncoderConfig& encoder_config,
                        const FinetuneConfig& config) {
  config.validate();
  if (known.size() == 0) throw ConfigError("fine-tuning needs at least one known flow");
  if (known.labels.size() != known.sequences.size()) throw ConfigError("labels and sequences differ in length");
  if (!config.unknown_node && !synthetic.empty()) throw ConfigError("a baseline head takes no synthetic samples");

  FinetuneResult result;
  ClassifierParams& params = result.params;
  params.encoder = encoder;
  params.encoder_config = encoder_config;
  params.unknown_node = config.unknown_node;
  params.unknown_node_untrained = config.unknown_node && synthetic.empty();
  std::set<std::string> class_set(known.labels.begin(), known.labels.end());
  if (class_set.count("") || class_set.count(kUnknownLabel)) {
    throw ConfigError("known flows need labels other than '' and '" + kUnknownLabel + "'");
  }
  params.classes.assign(class_set.begin(), class_set.end());
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < params.classes.size(); ++i) index[params.classes[i]] = i;
  const auto d = static_cast<Eigen::Index>(encoder_config.d_model);
  for (const auto& s : synthetic)
    if (s.size() != d) throw ConfigError("synthetic embedding width differs from d_model");

  Rng rng(config.seed);
  params.head_w = random_normal(d, static_cast<Eigen::Index>(params.outputs()), 0.02, rng);
  params.head_b = Matrix::Zero(1, static_cast<Eigen::Index>(params.outputs()));

  EncoderParams enc_grads = params.encoder.zeros_like();
  Matrix head_w_grad = Matrix::Zero(params.head_w.rows(), params.head_w.cols());
  Matrix head_b_grad = Matrix::Zero(1, params.head_b.cols());
  std::vector<ParamRef> refs;
  std::vector<double> scales;
  if (!config.head_only) {
    refs = encoder_param_refs(params.encoder, enc_grads);
    scales.assign(refs.size(), config.encoder_lr_scale);
  }
  refs.push_back({"head.w", &params.head_w, &head_w_grad});
  refs.push_back({"head.b", &params.head_b, &head_b_grad});
  scales.push_back(1.0);
  scales.push_back(1.0);
  Adam adam({0.9, 0.999, 1e-8, config.weight_decay, 1.0});

  // Frozen encoder: embed once.
  std::vector<FlowEmbedding> frozen;
  if (config.head_only) frozen = embed_all(known.sequences, params.encoder, encoder_config);

  const std::size_t n = known.size(), m = synthetic.size();
  const std::size_t batches = std::max<std::size_t>(1, (n + m + config.batch_size - 1) / config.batch_size);
  const auto total = static_cast<std::int64_t>(config.epochs * batches);
  const std::size_t unknown_target = params.classes.size();
  std::vector<std::size_t> known_order(n), synth_order(m);
  SequenceCache cache;
  std::int64_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(known_order.begin(), known_order.end(), 0);
    std::iota(synth_order.begin(), synth_order.end(), 0);
    std::shuffle(known_order.begin(), known_order.end(), rng);
    std::shuffle(synth_order.begin(), synth_order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t k0 = b * n / batches, k1 = (b + 1) * n / batches;
      const std::size_t s0 = b * m / batches, s1 = (b + 1) * m / batches;
      const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(1, (k1 - k0) + (s1 - s0)));
      zero_grads(refs);
      double loss = 0.0;
      auto accumulate = [&](const FlowEmbedding& e, std::size_t target) {
        RowVector p = softmax(head_logits(e, params));
        loss += -std::log(std::max(p(static_cast<Eigen::Index>(target)), 1e-300)) * inv;
        p(static_cast<Eigen::Index>(target)) -= 1.0;
        p *= inv;
        head_w_grad.noalias() += e.transpose() * p;
        head_b_grad += p;
        return RowVector(p * params.head_w.transpose());
      };
      for (std::size_t i = k0; i < k1; ++i) {
        const std::size_t idx = known_order[i];
        const std::size_t target = index[known.labels[idx]];
        if (config.head_only) {
          accumulate(frozen[idx], target);
        } else {
          const FlowEmbedding e = embed(known.sequences[idx], params.encoder, encoder_config, {true, &rng}, &cache);
          const RowVector de = accumulate(e, target);
          encoder_backward_pooled(de, cache, params.encoder, encoder_config, enc_grads);
        }
      }
      for (std::size_t i = s0; i < s1; ++i) accumulate(synthetic[synth_order[i]], unknown_target);
      if (!std::isfinite(loss)) {
        throw NumericError("fine-tuning loss became non-finite at epoch " + std::to_string(epoch));
      }
      epoch_loss += loss / static_cast<double>(batches);
      adam.step(refs, warmup_linear_lr(config.learning_rate, step, total, config.warmup_fraction), scales);
      ++step;
    }
    result.epoch_loss.push_back(epoch_loss);
  }

  const auto final_embeddings =
      config.head_only ? frozen : embed_all(known.sequences, params.encoder, encoder_config);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    head_logits(final_embeddings[i], params).head(static_cast<Eigen::Index>(params.classes.size())).maxCoeff(&best);
    if (params.classes[static_cast<std::size_t>(best)] == known.labels[i]) ++correct;
  }
  result.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return result;
}

std::vector<double> default_sigma_grid() {
  std::vector<double> grid;
  for (int i = 1; i <= 19; ++i) grid.push_back(0.05 * i);
  return grid;
}

double calibrate_sigma(const ClassifierParams& params, std::span<const FlowEmbedding> val_known,
                       std::span<const std::string> val_labels, std::span<const FlowEmbedding> opens,
                       std::span<const double> grid, bool unknown_in_argmax) {
  if (grid.empty()) throw ConfigError("sigma grid is empty");
  for (double s : grid)
    if (!(s > 0.0 && s <= 1.0)) throw ConfigError("sigma grid values must be in (0, 1]");
  if (val_known.empty() || opens.empty()) throw ConfigError("calibration needs known and open samples");
  if (val_labels.size() != val_known.size()) throw ConfigError("validation labels and embeddings differ in length");

  std::vector<RowVector> known_p, open_p;
  for (const auto& e : val_known) known_p.push_back(head_probabilities(e, params));
  for (const auto& e : opens) open_p.push_back(head_probabilities(e, params));

  std::vector<double> sorted(grid.begin(), grid.end());
  std::sort(sorted.begin(), sorted.end());
  double best_sigma = sorted.front();
  double best = -1.0;
  for (double sigma : sorted) {
    const DecisionConfig dc{sigma, unknown_in_argmax};
    std::size_t tp_k = 0, tp_u = 0;
    for (std::size_t i = 0; i < known_p.size(); ++i)
      if (decide(known_p[i], params.classes, dc).label == val_labels[i]) ++tp_k;
    for (const auto& p : open_p)
      if (decide(p, params.classes, dc).unknown()) ++tp_u;
    const double ac_ow = 0.5 * (static_cast<double>(tp_k) / static_cast<double>(known_p.size()) +
                                static_cast<double>(tp_u) / static_cast<double>(open_p.size()));
    if (ac_ow > best) {
      best = ac_ow;
      best_sigma = sigma;
    }
  }
  return best_sigma;
}

void write_prediction(std::ostream& out, const std::string& flow_id, const Prediction& p) {
  nlohmann::ordered_json j;
  j["flow_id"] = flow_id;
  j["predicted_label"] = p.label;
  j["probabilities"] = std::vector<double>(p.probabilities.data(), p.probabilities.data() + p.probabilities.size());
  j["decision"] = p.unknown() ? "unknown" : "known";
  out << j.dump() << '\n';
}

TensorArchive classifier_checkpoint(const ClassifierParams& params) {
  TensorArchive archive("classifier");
  const auto enc = encoder_checkpoint(params.encoder, params.encoder_config, "");
  archive.meta()["encoder_config"] = enc.meta()["config"];
  archive.meta()["classes"] = params.classes;
  archive.meta()["unknown_node"] = params.unknown_node;
  archive.meta()["unknown_node_untrained"] = params.unknown_node_untrained;
  for (const auto& [name, t] : enc.tensors()) archive.add("encoder." + name, t);
  archive.add("head.w", params.head_w);
  archive.add("head.b", params.head_b);
  return archive;
}

ClassifierParams read_classifier_checkpoint(const TensorArchive& archive) {
  if (archive.kind() != "classifier") throw ParseError("expected a classifier checkpoint, got " + archive.kind(), 0);
  ClassifierParams params;
  TensorArchive enc("encoder");
  enc.meta()["config"] = archive.meta().at("encoder_config");
  for (const auto& [name, t] : archive.tensors())
    if (name.rfind("encoder.", 0) == 0) enc.add(name.substr(8), t);
  read_encoder_checkpoint(enc, params.encoder, params.encoder_config);
  params.classes = archive.meta().at("classes").get<std::vector<std::string>>();
  params.unknown_node = archive.meta().at("unknown_node").get<bool>();
  params.unknown_node_untrained = archive.meta().at("unknown_node_untrained").get<bool>();
  params.head_w = archive.get("head.w");
  params.head_b = archive.get("head.b");
  if (static_cast<std::size_t>(params.head_w.cols()) != params.outputs()) {
    throw ParseError("classifier head width does not match its classes", 0);
  }
  return params;
}

}  // namespace owcp
