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

#include "owcp/pretrain.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <ostream>

#include <json.hpp>

#include "owcp/error.hpp"

namespace owcp {

void ContrastiveConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0) throw ConfigError("warmup_fraction must be in [0, 1]");
  if (running_decay < 0.0 || running_decay >= 1.0) throw ConfigError("running_decay must be in [0, 1)");
}

TripletBatch sample_triplets(std::span<const std::string> labels, std::size_t batch_size, Rng& rng) {
  std::map<std::string, std::size_t> class_sizes;
  for (const auto& l : labels)
    if (!l.empty()) ++class_sizes[l];
  if (class_sizes.size() < 2) throw ConfigError("triplet sampling needs at least two classes");
  bool any_pair = false;
  for (const auto& [label, n] : class_sizes) any_pair = any_pair || n >= 2;
  if (!any_pair) throw ConfigError("triplet sampling needs a class with at least two flows");

  std::uniform_int_distribution<std::size_t> pick(0, labels.size() - 1);
  TripletBatch batch;
  while (batch.size() < batch_size) {
    const std::size_t a = pick(rng);
    const auto& label = labels[a];
    if (label.empty() || class_sizes[label] < 2) continue;
    std::size_t p = pick(rng);
    while (p == a || labels[p] != label) p = pick(rng);
    std::size_t n = pick(rng);
    while (labels[n].empty() || labels[n] == label) n = pick(rng);
    batch.anchors.push_back(a);
    batch.positives.push_back(p);
    batch.negatives.push_back(n);
    batch.labels.push_back(label);
  }
  return batch;
}

TripletBatch sample_triplets(std::span<const std::string> labels, std::size_t batch_size, std::uint64_t seed) {
  Rng rng(seed);
  return sample_triplets(labels, batch_size, rng);
}

double cosine_similarity(const RowVector& a, const RowVector& b) {
  return a.dot(b) / (a.norm() * b.norm());
}

namespace {

// d cos(a, b) / da.
RowVector cosine_grad(const RowVector& a, const RowVector& b, double cos) {
  const double na = a.norm();
  return b / (na * b.norm()) - cos * a / (na * na);
}

void check_inputs(std::span<const RowVector> positives, std::span<const RowVector> negatives, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (positives.empty() || negatives.empty()) throw ConfigError("need at least one positive and one negative");
}

}  // namespace

ContrastiveGrad contrastive_loss_grad(const RowVector& anchor, std::span<const RowVector> positives,
                                      std::span<const RowVector> negatives, double temperature) {
  check_inputs(positives, negatives, temperature);
  std::vector<double> pos_cos, neg_cos;
  for (const auto& p : positives) pos_cos.push_back(cosine_similarity(anchor, p));
  for (const auto& n : negatives) neg_cos.push_back(cosine_similarity(anchor, n));

  ContrastiveGrad out;
  out.d_anchor = RowVector::Zero(anchor.size());
  for (const auto& p : positives) out.d_positives.push_back(RowVector::Zero(p.size()));
  for (const auto& n : negatives) out.d_negatives.push_back(RowVector::Zero(n.size()));

  // Shared negative term, stabilized by the largest logit.
  double max_logit = neg_cos[0] / temperature;
  for (double c : neg_cos) max_logit = std::max(max_logit, c / temperature);
  for (double c : pos_cos) max_logit = std::max(max_logit, c / temperature);
  std::vector<double> neg_exp;
  double neg_sum = 0.0;
  for (double c : neg_cos) {
    neg_exp.push_back(std::exp(c / temperature - max_logit));
    neg_sum += neg_exp.back();
  }

  const double inv_pos = 1.0 / static_cast<double>(positives.size());
  for (std::size_t i = 0; i < positives.size(); ++i) {
    const double e_pos = std::exp(pos_cos[i] / temperature - max_logit);
    const double denom = e_pos + neg_sum;
    out.loss += inv_pos * (-std::log(e_pos / denom));
    // dl/ds for this term; s = cos / tau.
    const double d_spos = inv_pos * (e_pos / denom - 1.0) / temperature;
    out.d_anchor += d_spos * cosine_grad(anchor, positives[i], pos_cos[i]);
    out.d_positives[i] += d_spos * cosine_grad(positives[i], anchor, pos_cos[i]);
    for (std::size_t j = 0; j < negatives.size(); ++j) {
      const double d_sneg = inv_pos * (neg_exp[j] / denom) / temperature;
      out.d_anchor += d_sneg * cosine_grad(anchor, negatives[j], neg_cos[j]);
      out.d_negatives[j] += d_sneg * cosine_grad(negatives[j], anchor, neg_cos[j]);
    }
  }
  return out;
}

double contrastive_loss(const RowVector& anchor, std::span<const RowVector> positives,
                        std::span<const RowVector> negatives, double temperature) {
  return contrastive_loss_grad(anchor, positives, negatives, temperature).loss;
}

double batch_contrastive_loss(std::span<const RowVector> embeddings, std::span<const std::string> labels,
                              std::size_t batch, double temperature, std::vector<RowVector>& d_embeddings) {
  if (embeddings.size() != 3 * batch || labels.size() != embeddings.size()) {
    throw ConfigError("batch layout must be [anchors | positives | negatives]");
  }
  d_embeddings.assign(embeddings.size(), RowVector::Zero(embeddings[0].size()));
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    std::vector<RowVector> negatives;
    std::vector<std::size_t> neg_index;
    for (std::size_t j = 0; j < embeddings.size(); ++j) {
      if (labels[j] == labels[i]) continue;
      negatives.push_back(embeddings[j]);
      neg_index.push_back(j);
    }
    const RowVector& positive = embeddings[batch + i];
    auto g = contrastive_loss_grad(embeddings[i], std::span<const RowVector>(&positive, 1), negatives, temperature);
    total += g.loss;
    d_embeddings[i] += g.d_anchor;
    d_embeddings[batch + i] += g.d_positives[0];
    for (std::size_t k = 0; k < neg_index.size(); ++k) d_embeddings[neg_index[k]] += g.d_negatives[k];
  }
  const double inv = 1.0 / static_cast<double>(batch);
  for (auto& d : d_embeddings) d *= inv;
  return total * inv;
}

void TrainingLog::write(std::ostream& out) const {
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["step"] = e.step;
    j["loss"] = e.loss;
    j["lr"] = e.lr;
    j["running_loss"] = e.running_loss;
    out << j.dump() << '\n';
  }
}

PretrainResult run_pretraining(const LabeledSequences& corpus, const EncoderParams& init,
                               const EncoderConfig& encoder, const ContrastiveConfig& config) {
  config.validate();
  PretrainResult result;
  result.params = init;
  if (config.steps == 0) return result;
  if (corpus.labels.size() != corpus.sequences.size()) throw ConfigError("labels and sequences differ in length");

  Rng rng(config.seed);
  EncoderParams params = init;
  EncoderParams grads = params.zeros_like();
  auto refs = encoder_param_refs(params, grads);
  Adam adam;
  const auto total = static_cast<std::int64_t>(config.steps);
  double running = 0.0;
  double best = std::numeric_limits<double>::infinity();

  const std::size_t b = config.batch_size;
  std::vector<SequenceCache> caches(3 * b);
  std::vector<RowVector> embeddings(3 * b);
  std::vector<std::string> labels(3 * b);
  std::vector<RowVector> d_embeddings;

  for (std::int64_t step = 0; step < total; ++step) {
    const auto batch = sample_triplets(corpus.labels, b, rng);
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t idx[3] = {batch.anchors[i], batch.positives[i], batch.negatives[i]};
      for (std::size_t role = 0; role < 3; ++role) {
        const std::size_t slot = role * b + i;
        embeddings[slot] = embed(corpus.sequences[idx[role]], params, encoder, {true, &rng}, &caches[slot]);
        labels[slot] = corpus.labels[idx[role]];
      }
    }
    const double loss = batch_contrastive_loss(embeddings, labels, b, config.temperature, d_embeddings);
    if (!std::isfinite(loss)) {
      throw NumericError("contrastive loss became non-finite at step " + std::to_string(step) +
                         " (last running loss " + std::to_string(running) + ")");
    }
    running = step == 0 ? loss : config.running_decay * running + (1.0 - config.running_decay) * loss;
    if (running < best) {
      best = running;
      result.params = params;
      result.best_step = step;
    }

    zero_grads(refs);
    for (std::size_t slot = 0; slot < 3 * b; ++slot) {
      encoder_backward_pooled(d_embeddings[slot], caches[slot], params, encoder, grads);
    }
    const double lr = warmup_linear_lr(config.learning_rate, step, total, config.warmup_fraction);
    adam.step(refs, lr);
    result.log.entries.push_back({step, loss, lr, running});
  }
  return result;
}

}  // namespace owcp
