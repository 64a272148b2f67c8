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

#include "owcp/evalharness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

#include "owcp/error.hpp"
#include "owcp/tensor_io.hpp"

namespace owcp {

std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), tag, 0x6f776370u};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

namespace {

double ratio(std::size_t num, std::size_t den, const std::string& name, std::vector<std::string>& guarded) {
  if (den == 0) {
    guarded.push_back(name);
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

void check_inputs(std::span<const std::string> predicted, std::span<const std::string> truth) {
  if (truth.empty()) throw ConfigError("no predictions to score");
  if (predicted.size() != truth.size()) throw ConfigError("predictions and truths differ in length");
}

// Per-class counts and macro F1 over `classes`.
double fill_per_class(MetricsReport& r, const std::set<std::string>& classes, std::span<const std::string> predicted,
                      std::span<const std::string> truth) {
  for (const auto& c : classes) r.per_class[c] = {};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i] == truth[i]) {
      ++r.per_class[truth[i]].tp;
    } else {
      ++r.per_class[truth[i]].fn;
      if (classes.count(predicted[i])) ++r.per_class[predicted[i]].fp;
    }
  }
  double sum = 0.0;
  for (auto& [c, k] : r.per_class) {
    k.f1 = ratio(2 * k.tp, 2 * k.tp + k.fp + k.fn, "f1:" + c, r.guarded);
    sum += k.f1;
  }
  return r.per_class.empty() ? 0.0 : sum / static_cast<double>(r.per_class.size());
}

void fill_confusion(MetricsReport& r, std::span<const std::string> predicted, std::span<const std::string> truth) {
  r.scored = truth.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++r.confusion[truth[i]][predicted[i]];
    if (predicted[i] == truth[i]) ++correct;
  }
  r.ac = static_cast<double>(correct) / static_cast<double>(truth.size());
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

void reject_unknown_keys(const nlohmann::json& j, const std::string& section, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError("section '" + section + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* allowed) { return k == allowed; })) {
      throw ConfigError("unknown key '" + k + "' in section '" + section + "'");
    }
  }
}

}  // namespace

SplitSpec make_split(std::span<const FlowRecord> flows, double known_fraction, std::uint64_t seed,
                     const SplitRatios& ratios) {
  if (!(known_fraction > 0.0 && known_fraction < 1.0)) throw ConfigError("known_fraction must be in (0, 1)");
  if (ratios.train < 0.0 || ratios.val < 0.0 || ratios.test < 0.0 || !(ratios.train + ratios.val + ratios.test > 0.0)) {
    throw ConfigError("split ratios must be non-negative with a positive sum");
  }
  std::map<std::string, std::vector<std::string>> by_class;
  for (const auto& f : flows)
    if (!f.label.empty()) by_class[f.label].push_back(f.flow_id);
  if (by_class.size() < 2) throw ConfigError("splitting needs at least two classes");

  SplitSpec s;
  s.seed = seed;
  Rng rng(seed);
  std::vector<std::string> classes;
  for (const auto& [c, ids] : by_class) classes.push_back(c);
  std::shuffle(classes.begin(), classes.end(), rng);
  const auto c = static_cast<long long>(classes.size());
  const auto k = std::clamp<long long>(std::llround(known_fraction * static_cast<double>(c)), 1, c - 1);
  s.known_classes.assign(classes.begin(), classes.begin() + k);
  s.unknown_classes.assign(classes.begin() + k, classes.end());
  std::sort(s.known_classes.begin(), s.known_classes.end());
  std::sort(s.unknown_classes.begin(), s.unknown_classes.end());

  const double sum = ratios.train + ratios.val + ratios.test;
  for (const auto& label : s.known_classes) {
    auto ids = by_class[label];
    std::shuffle(ids.begin(), ids.end(), rng);
    if (ids.size() < 3) {
      s.warnings.push_back("class '" + label + "' has " + std::to_string(ids.size()) +
                           " flows; all go to training");
      s.train.insert(s.train.end(), ids.begin(), ids.end());
      continue;
    }
    const auto n = static_cast<double>(ids.size());
    const auto n_val = static_cast<std::size_t>(std::floor(n * ratios.val / sum));
    const auto n_test = static_cast<std::size_t>(std::floor(n * ratios.test / sum));
    s.val.insert(s.val.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.cw_test.insert(s.cw_test.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_val),
                     ids.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
    s.train.insert(s.train.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), ids.end());
  }
  s.ow_test = s.cw_test;
  for (const auto& label : s.unknown_classes) s.ow_test.insert(s.ow_test.end(), by_class[label].begin(), by_class[label].end());
  return s;
}

nlohmann::ordered_json to_json(const SplitSpec& s) {
  return {{"seed", s.seed},           {"known_classes", s.known_classes}, {"unknown_classes", s.unknown_classes},
          {"train", s.train},         {"val", s.val},                     {"cw_test", s.cw_test},
          {"ow_test", s.ow_test},     {"warnings", s.warnings}};
}

SplitSpec split_from_json(const nlohmann::json& j) {
  SplitSpec s;
  try {
    s.seed = j.at("seed").get<std::uint64_t>();
    s.known_classes = j.at("known_classes").get<std::vector<std::string>>();
    s.unknown_classes = j.at("unknown_classes").get<std::vector<std::string>>();
    s.train = j.at("train").get<std::vector<std::string>>();
    s.val = j.at("val").get<std::vector<std::string>>();
    s.cw_test = j.at("cw_test").get<std::vector<std::string>>();
    s.ow_test = j.at("ow_test").get<std::vector<std::string>>();
    s.warnings = j.value("warnings", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad split: ") + e.what(), 0);
  }
  return s;
}

MetricsReport closed_metrics(std::span<const std::string> predicted, std::span<const std::string> truth) {
  check_inputs(predicted, truth);
  MetricsReport r;
  std::set<std::string> classes;
  for (const auto& t : truth) {
    if (t == kUnknownLabel) throw ConfigError("closed-world truths must be known classes");
    classes.insert(t);
  }
  for (const auto& p : predicted)
    if (p != kUnknownLabel) classes.insert(p);
  fill_confusion(r, predicted, truth);
  r.macro_f1 = fill_per_class(r, classes, predicted, truth);
  return r;
}

MetricsReport open_metrics(std::span<const std::string> predicted, std::span<const std::string> truth) {
  check_inputs(predicted, truth);
  if (std::find(truth.begin(), truth.end(), kUnknownLabel) == truth.end()) {
    throw ConfigError("no unknown flows in the truth: AC_ow is undefined, use closed_metrics");
  }
  MetricsReport r;
  r.open = true;
  std::set<std::string> classes(truth.begin(), truth.end());
  classes.insert(predicted.begin(), predicted.end());
  fill_confusion(r, predicted, truth);
  r.macro_f1 = fill_per_class(r, classes, predicted, truth);
  r.f1_ow = r.macro_f1;

  std::size_t tp_k = 0, fn_k = 0, tp_u = 0, fn_u = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool hit = predicted[i] == truth[i];
    if (truth[i] == kUnknownLabel) {
      (hit ? tp_u : fn_u)++;
    } else {
      (hit ? tp_k : fn_k)++;
    }
  }
  r.known_recall = ratio(tp_k, tp_k + fn_k, "known_recall", r.guarded);
  r.unknown_recall = ratio(tp_u, tp_u + fn_u, "unknown_recall", r.guarded);
  r.ac_ow = 0.5 * (r.known_recall + r.unknown_recall);
  return r;
}

nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["scored"] = r.scored;
  j["ac"] = r.ac;
  j["macro_f1"] = r.macro_f1;
  if (r.open) {
    j["ac_ow"] = r.ac_ow;
    j["f1_ow"] = r.f1_ow;
    j["known_recall"] = r.known_recall;
    j["unknown_recall"] = r.unknown_recall;
  }
  j["guarded"] = r.guarded;
  auto& pc = j["per_class"] = nlohmann::ordered_json::object();
  for (const auto& [c, k] : r.per_class) pc[c] = {{"tp", k.tp}, {"fp", k.fp}, {"fn", k.fn}, {"f1", k.f1}};
  auto& cm = j["confusion"] = nlohmann::ordered_json::object();
  for (const auto& [t, row] : r.confusion) {
    auto& out = cm[t] = nlohmann::ordered_json::object();
    for (const auto& [p, n] : row) out[p] = n;
  }
  return j;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("spearman needs two equal-length series of >= 2 points");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

PipelineConfig PipelineConfig::desk() {
  PipelineConfig c;
  c.tokenizer = {2, 32, 30000};
  c.encoder = EncoderConfig::desk(c.tokenizer.sequence_length());
  c.pretrain.steps = 300;
  c.pretrain.batch_size = 16;
  c.pretrain.learning_rate = 1e-3;
  c.pretrain.warmup_fraction = 0.05;
  c.epsilon.value = 0.3;
  c.gan.steps = 1000;
  c.gan.per_class = true;
  c.finetune.epochs = 4;
  c.finetune.head_only = true;
  return c;
}

PipelineConfig PipelineConfig::paper() {
  PipelineConfig c;
  c.encoder = EncoderConfig::paper();
  c.finetune.learning_rate = 5e-5;
  c.finetune.encoder_lr_scale = 1.0;
  return c;
}

void PipelineConfig::validate() const {
  tokenizer.validate();
  encoder.validate();
  if (encoder.max_seq < tokenizer.sequence_length()) {
    throw ConfigError("encoder max_seq " + std::to_string(encoder.max_seq) + " is shorter than the sequence length " +
                      std::to_string(tokenizer.sequence_length()));
  }
  pretrain.validate();
  if (radius.kind == RadiusPolicy::Kind::kQuantile && !(radius.q > 0.0 && radius.q <= 1.0)) {
    throw ConfigError("radius quantile must be in (0, 1]");
  }
  if (!(epsilon.value > 0.0)) throw ConfigError("epsilon must be > 0");
  gan.validate();
  finetune.validate();
  if (sigma_grid.empty()) throw ConfigError("sigma grid is empty");
  for (double s : sigma_grid)
    if (!(s > 0.0 && s <= 1.0)) throw ConfigError("sigma grid values must be in (0, 1]");
  if (!(known_fraction > 0.0 && known_fraction < 1.0)) throw ConfigError("known_fraction must be in (0, 1)");
}

nlohmann::ordered_json to_json(const PipelineConfig& c) {
  nlohmann::ordered_json j;
  j["tokenizer"] = {{"payload_packets", c.tokenizer.payload_packets},
                    {"length_packets", c.tokenizer.length_packets},
                    {"max_vocab", c.tokenizer.max_vocab}};
  j["encoder"] = to_json(c.encoder);
  j["pretrain"] = {{"temperature", c.pretrain.temperature},     {"batch_size", c.pretrain.batch_size},
                   {"steps", c.pretrain.steps},                 {"learning_rate", c.pretrain.learning_rate},
                   {"warmup_fraction", c.pretrain.warmup_fraction}, {"running_decay", c.pretrain.running_decay}};
  j["margins"] = {{"radius", c.radius.kind == RadiusPolicy::Kind::kMax ? "max" : "quantile"},
                  {"q", c.radius.q},
                  {"epsilon", c.epsilon.value},
                  {"epsilon_relative", c.epsilon.relative}};
  j["gan"] = {{"latent_dim", c.gan.latent_dim}, {"gen_hidden", c.gan.gen_hidden},
              {"dis_hidden", c.gan.dis_hidden}, {"steps", c.gan.steps},
              {"batch_size", c.gan.batch_size}, {"gen_lr", c.gan.gen_lr},
              {"dis_lr", c.gan.dis_lr},         {"per_class", c.gan.per_class},
              {"synthetic_count", c.synthetic_count}, {"calibration_opens", c.calibration_opens}};
  j["classifier"] = {{"epochs", c.finetune.epochs},
                     {"batch_size", c.finetune.batch_size},
                     {"learning_rate", c.finetune.learning_rate},
                     {"encoder_lr_scale", c.finetune.encoder_lr_scale},
                     {"head_only", c.finetune.head_only},
                     {"warmup_fraction", c.finetune.warmup_fraction},
                     {"weight_decay", c.finetune.weight_decay},
                     {"sigma_grid", c.sigma_grid},
                     {"unknown_in_argmax", c.unknown_in_argmax}};
  j["eval"] = {{"known_fraction", c.known_fraction},
               {"ratios", {c.ratios.train, c.ratios.val, c.ratios.test}}};
  return j;
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const PipelineConfig& base) {
  PipelineConfig c = base;
  reject_unknown_keys(j, "config", {"tokenizer", "encoder", "pretrain", "margins", "gan", "classifier", "eval", "preset",
                                    "paths", "corpus"});
  if (j.contains("tokenizer")) {
    const auto& t = j["tokenizer"];
    reject_unknown_keys(t, "tokenizer", {"payload_packets", "length_packets", "max_vocab"});
    read(t, "payload_packets", c.tokenizer.payload_packets);
    read(t, "length_packets", c.tokenizer.length_packets);
    read(t, "max_vocab", c.tokenizer.max_vocab);
    // The positional table follows the tokenizer unless set explicitly.
    if (!j.contains("encoder") || !j["encoder"].contains("max_seq")) c.encoder.max_seq = c.tokenizer.sequence_length();
  }
  if (j.contains("encoder")) {
    const auto& e = j["encoder"];
    reject_unknown_keys(e, "encoder", {"d_model", "heads", "head_dim", "ffn_dim", "layers", "max_seq", "dropout"});
    read(e, "d_model", c.encoder.d_model);
    read(e, "heads", c.encoder.heads);
    read(e, "head_dim", c.encoder.head_dim);
    read(e, "ffn_dim", c.encoder.ffn_dim);
    read(e, "layers", c.encoder.layers);
    read(e, "max_seq", c.encoder.max_seq);
    read(e, "dropout", c.encoder.dropout);
  }
  if (j.contains("pretrain")) {
    const auto& p = j["pretrain"];
    reject_unknown_keys(p, "pretrain",
                        {"temperature", "batch_size", "steps", "learning_rate", "warmup_fraction", "running_decay"});
    read(p, "temperature", c.pretrain.temperature);
    read(p, "batch_size", c.pretrain.batch_size);
    read(p, "steps", c.pretrain.steps);
    read(p, "learning_rate", c.pretrain.learning_rate);
    read(p, "warmup_fraction", c.pretrain.warmup_fraction);
    read(p, "running_decay", c.pretrain.running_decay);
  }
  if (j.contains("margins")) {
    const auto& m = j["margins"];
    reject_unknown_keys(m, "margins", {"radius", "q", "epsilon", "epsilon_relative"});
    std::string kind = c.radius.kind == RadiusPolicy::Kind::kMax ? "max" : "quantile";
    read(m, "radius", kind);
    if (kind != "max" && kind != "quantile") throw ConfigError("margins.radius must be 'max' or 'quantile'");
    c.radius.kind = kind == "max" ? RadiusPolicy::Kind::kMax : RadiusPolicy::Kind::kQuantile;
    read(m, "q", c.radius.q);
    read(m, "epsilon", c.epsilon.value);
    read(m, "epsilon_relative", c.epsilon.relative);
  }
  if (j.contains("gan")) {
    const auto& g = j["gan"];
    reject_unknown_keys(g, "gan",
                        {"latent_dim", "gen_hidden", "dis_hidden", "steps", "batch_size", "gen_lr", "dis_lr",
                         "per_class", "synthetic_count", "calibration_opens"});
    read(g, "latent_dim", c.gan.latent_dim);
    read(g, "gen_hidden", c.gan.gen_hidden);
    read(g, "dis_hidden", c.gan.dis_hidden);
    read(g, "steps", c.gan.steps);
    read(g, "batch_size", c.gan.batch_size);
    read(g, "gen_lr", c.gan.gen_lr);
    read(g, "dis_lr", c.gan.dis_lr);
    read(g, "per_class", c.gan.per_class);
    read(g, "synthetic_count", c.synthetic_count);
    read(g, "calibration_opens", c.calibration_opens);
  }
  if (j.contains("classifier")) {
    const auto& f = j["classifier"];
    reject_unknown_keys(f, "classifier",
                        {"epochs", "batch_size", "learning_rate", "encoder_lr_scale", "head_only", "warmup_fraction",
                         "weight_decay", "sigma_grid", "unknown_in_argmax"});
    read(f, "epochs", c.finetune.epochs);
    read(f, "batch_size", c.finetune.batch_size);
    read(f, "learning_rate", c.finetune.learning_rate);
    read(f, "encoder_lr_scale", c.finetune.encoder_lr_scale);
    read(f, "head_only", c.finetune.head_only);
    read(f, "warmup_fraction", c.finetune.warmup_fraction);
    read(f, "weight_decay", c.finetune.weight_decay);
    read(f, "sigma_grid", c.sigma_grid);
    read(f, "unknown_in_argmax", c.unknown_in_argmax);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    // seeds and unknown_fractions belong to the command-line runner.
    reject_unknown_keys(e, "eval", {"known_fraction", "ratios", "seeds", "unknown_fractions"});
    read(e, "known_fraction", c.known_fraction);
    if (e.contains("ratios")) {
      std::vector<double> r;
      read(e, "ratios", r);
      if (r.size() != 3) throw ConfigError("eval.ratios must hold three numbers (train, val, test)");
      c.ratios = {r[0], r[1], r[2]};
    }
  }
  c.validate();
  return c;
}

std::string AblationSwitches::name() const {
  std::string out;
  auto add = [&](bool on, const char* n) {
    if (!on) return;
    if (!out.empty()) out += "+";
    out += n;
  };
  add(no_np, "no_NP");
  add(no_pl, "no_PL");
  add(no_cpt, "no_CPT");
  add(no_bsf, "no_BSF");
  return out.empty() ? "full" : out;
}

nlohmann::ordered_json to_json(const PipelineReport& r) {
  nlohmann::ordered_json j;
  j["variant"] = r.switches.name();
  j["seed"] = r.seed;
  j["known_classes"] = r.split.known_classes;
  j["unknown_classes"] = r.split.unknown_classes;
  j["sigma"] = r.sigma;
  j["baseline_sigma"] = r.baseline_sigma;
  j["marginal_before_filter"] = r.marginal_before_filter;
  j["marginal_after_filter"] = r.marginal_after_filter;
  j["synthetic"] = r.synthetic;
  j["train_accuracy"] = r.train_accuracy;
  j["owcp"] = {{"closed", to_json(r.closed)}, {"open", to_json(r.open)}};
  j["baseline"] = {{"closed", to_json(r.baseline_closed)}, {"open", to_json(r.baseline_open)}};
  auto curve = [](const std::vector<std::pair<double, double>>& c) {
    auto out = nlohmann::ordered_json::array();
    for (const auto& [s, v] : c) out.push_back({s, v});
    return out;
  };
  j["sigma_curve"] = curve(r.sigma_curve);
  j["baseline_sigma_curve"] = curve(r.baseline_sigma_curve);
  j["stage_seconds"] = r.stage_seconds;
  j["warnings"] = r.warnings;
  return j;
}

SplitFlows gather_split(std::span<const FlowRecord> flows, const SplitSpec& split) {
  std::map<std::string, const FlowRecord*> by_id;
  for (const auto& f : flows) by_id[f.flow_id] = &f;
  auto gather = [&](const std::vector<std::string>& ids) {
    std::vector<FlowRecord> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw ConfigError("split names flow '" + id + "' which is not in the corpus");
      out.push_back(*it->second);
    }
    return out;
  };
  return {gather(split.train), gather(split.val), gather(split.cw_test), gather(split.ow_test)};
}

EncodeOptions encode_options(const AblationSwitches& switches) { return {switches.no_np, switches.no_pl}; }

LabeledSequences encode_labeled(std::span<const FlowRecord> flows, const Vocabulary& vocab,
                                const PipelineConfig& config, const AblationSwitches& switches) {
  LabeledSequences out;
  out.sequences = encode_flows(flows, vocab, config.tokenizer, encode_options(switches));
  for (const auto& f : flows) out.labels.push_back(f.label);
  return out;
}

PretrainResult pretrain_stage(const LabeledSequences& train, std::size_t vocab_size, const PipelineConfig& config,
                              const AblationSwitches& switches, std::uint64_t seed) {
  const EncoderParams init = init_encoder(config.encoder, vocab_size, derive_seed(seed, 2));
  if (switches.no_cpt) return {init, {}, -1};
  ContrastiveConfig pc = config.pretrain;
  pc.seed = derive_seed(seed, 3);
  return run_pretraining(train, init, config.encoder, pc);
}

MarginStage margin_stage(std::span<const FlowRecord> train, const LabeledSequences& train_seqs,
                         const EncoderParams& encoder, const PipelineConfig& config,
                         const AblationSwitches& switches) {
  LabeledEmbeddings emb;
  emb.embeddings = embed_all(train_seqs.sequences, encoder, config.encoder);
  emb.labels = train_seqs.labels;
  for (const auto& f : train) emb.flow_ids.push_back(f.flow_id);
  MarginStage out;
  out.prototypes = build_prototypes(emb, config.radius);
  out.marginal = select_marginal(out.prototypes, emb, config.epsilon);
  if (!switches.no_bsf) {
    std::map<std::string, BackgroundMeta> backgrounds;
    for (const auto& f : train) backgrounds[f.flow_id] = f.background;
    out.marginal = background_filter(out.marginal, build_background_index(train), backgrounds);
  }
  return out;
}

std::size_t synthetic_count(const PipelineConfig& config, std::size_t train_flows, std::size_t known_classes) {
  if (config.synthetic_count > 0) return config.synthetic_count;
  const std::size_t k = std::max<std::size_t>(1, known_classes);
  return std::max<std::size_t>(1, (train_flows + k / 2) / k);
}

SyntheticStage synthetic_stage(const MarginalFlowSet& marginal, const PipelineConfig& config, std::size_t count,
                               std::uint64_t seed) {
  SyntheticStage out;
  const std::size_t n_cal = config.calibration_opens > 0 ? config.calibration_opens : count;
  GanConfig gc = config.gan;
  gc.seed = derive_seed(seed, 4);
  std::vector<std::pair<std::string, std::vector<FlowEmbedding>>> groups;
  if (gc.per_class) {
    std::map<std::string, std::vector<FlowEmbedding>> by_class;
    for (const auto& e : marginal.entries)
      if (e.kept) by_class[e.class_id].push_back(e.embedding);
    for (auto& [c, v] : by_class)
      if (v.size() >= 2) groups.emplace_back(c, std::move(v));
  } else {
    auto kept = marginal.kept_embeddings();
    if (kept.size() >= 2) groups.emplace_back("*", std::move(kept));
  }
  for (const auto& [cls, g] : groups) {
    GanConfig this_gc = gc;
    this_gc.batch_size = std::min(gc.batch_size, g.size());
    this_gc.seed = derive_seed(gc.seed, static_cast<std::uint32_t>(out.generators.size()));
    auto result = train_gan(g, this_gc);
    if (result.aborted) {
      out.aborted = true;
      out.warnings.push_back("gan stopped early: " + result.abort_reason);
    }
    out.generators.push_back(std::move(result.params));
    out.generator_classes.push_back(cls);
    out.logs.push_back(std::move(result.log));
  }
  if (out.generators.empty()) {
    out.warnings.push_back("fewer than two marginal flows survived filtering; no synthetic unknowns");
  } else {
    out.synthetic = synthesize(out.generators, count, derive_seed(seed, 5));
    out.calibration = synthesize(out.generators, n_cal, derive_seed(seed, 6));
  }
  return out;
}

FinetuneStage finetune_stage(const LabeledSequences& train, std::span<const FlowEmbedding> synthetic,
                             const EncoderParams& encoder, const PipelineConfig& config, std::uint64_t seed) {
  FinetuneConfig fc = config.finetune;
  fc.seed = derive_seed(seed, 7);
  fc.unknown_node = true;
  FinetuneStage out;
  out.owcp = finetune(train, synthetic, encoder, config.encoder, fc);
  fc.unknown_node = false;
  out.baseline = finetune(train, {}, encoder, config.encoder, fc);
  return out;
}

std::vector<FlowEmbedding> calibration_opens(std::span<const FlowEmbedding> calibration,
                                             const MarginalFlowSet& marginal,
                                             std::span<const FlowEmbedding> fallback) {
  std::vector<FlowEmbedding> opens(calibration.begin(), calibration.end());
  if (opens.empty())
    for (const auto& e : marginal.entries) opens.push_back(e.embedding);
  if (opens.empty()) opens.assign(fallback.begin(), fallback.end());
  return opens;
}

double calibrate_stage(const ClassifierParams& params, std::span<const TokenSequence> val,
                       std::span<const std::string> val_labels, std::span<const FlowEmbedding> opens,
                       const PipelineConfig& config) {
  if (val.empty()) return 0.7;
  const auto val_emb = classifier_embed_all(val, params);
  return calibrate_sigma(params, val_emb, val_labels, opens, config.sigma_grid,
                         config.unknown_in_argmax && params.unknown_node);
}

ScoreStage score_stage(const ClassifierParams& params, double sigma, std::span<const TokenSequence> ow,
                       std::span<const std::string> ow_truth, std::size_t cw_count, const PipelineConfig& config) {
  if (ow.size() != ow_truth.size() || cw_count > ow.size()) throw ConfigError("scoring inputs differ in length");
  ScoreStage out;
  const bool in_argmax = config.unknown_in_argmax && params.unknown_node;
  const auto emb = classifier_embed_all(ow, params);
  std::vector<RowVector> probs;
  probs.reserve(emb.size());
  for (const auto& e : emb) probs.push_back(head_probabilities(e, params));
  std::vector<std::string> labels;
  for (const auto& p : probs) {
    out.predictions.push_back(decide(p, params.classes, {sigma, in_argmax}));
    labels.push_back(out.predictions.back().label);
  }
  const auto n_cw = static_cast<std::ptrdiff_t>(cw_count);
  if (cw_count > 0) {
    const std::vector<std::string> cw_pred(labels.begin(), labels.begin() + n_cw);
    const std::vector<std::string> cw_truth(ow_truth.begin(), ow_truth.begin() + n_cw);
    out.closed = closed_metrics(cw_pred, cw_truth);
  }
  out.open = open_metrics(labels, ow_truth);
  for (double s : config.sigma_grid) {
    std::vector<std::string> pred;
    for (const auto& p : probs) pred.push_back(decide(p, params.classes, {s, in_argmax}).label);
    out.curve.emplace_back(s, open_metrics(pred, ow_truth).ac_ow);
  }
  return out;
}

std::vector<std::string> ow_truth_labels(std::span<const FlowRecord> ow_test, const SplitSpec& split) {
  const std::set<std::string> known(split.known_classes.begin(), split.known_classes.end());
  std::vector<std::string> out;
  for (const auto& f : ow_test) out.push_back(known.count(f.label) ? f.label : kUnknownLabel);
  return out;
}

PipelineReport run_pipeline(std::span<const FlowRecord> flows, const PipelineConfig& config,
                            const AblationSwitches& switches, std::uint64_t seed) {
  config.validate();
  PipelineReport report;
  auto clock = std::chrono::steady_clock::now();
  auto lap = [&](const std::string& stage) {
    const auto now = std::chrono::steady_clock::now();
    report.stage_seconds[stage] = std::chrono::duration<double>(now - clock).count();
    clock = now;
  };
  report.switches = switches;
  report.seed = seed;
  report.split = make_split(flows, config.known_fraction, derive_seed(seed, 1), config.ratios);
  const SplitSpec& split = report.split;
  report.warnings = split.warnings;
  const SplitFlows sf = gather_split(flows, split);

  const Vocabulary vocab = build_vocab(sf.train, config.tokenizer);
  const LabeledSequences train_seqs = encode_labeled(sf.train, vocab, config, switches);
  const LabeledSequences val_seqs = encode_labeled(sf.val, vocab, config, switches);
  const auto ow_seqs = encode_flows(sf.ow_test, vocab, config.tokenizer, encode_options(switches));

  const EncoderParams theta = pretrain_stage(train_seqs, vocab.size(), config, switches, seed).params;
  lap("pretrain");

  const MarginStage margins = margin_stage(sf.train, train_seqs, theta, config, switches);
  const MarginalFlowSet& marginal = margins.marginal;
  report.warnings.insert(report.warnings.end(), marginal.warnings.begin(), marginal.warnings.end());
  report.marginal_before_filter = marginal.count_before_filter;
  report.marginal_after_filter = marginal.count_after_filter;
  lap("margins");

  const auto syn = synthetic_stage(
      marginal, config, synthetic_count(config, sf.train.size(), split.known_classes.size()), seed);
  report.warnings.insert(report.warnings.end(), syn.warnings.begin(), syn.warnings.end());
  report.synthetic = syn.synthetic.size();
  lap("gan");

  const auto tuned = finetune_stage(train_seqs, syn.synthetic, theta, config, seed);
  report.train_accuracy = tuned.owcp.train_accuracy;
  lap("finetune");

  std::vector<FlowEmbedding> fallback;
  if (syn.calibration.empty() && marginal.entries.empty())
    fallback = embed_all(train_seqs.sequences, theta, config.encoder);
  const auto opens = calibration_opens(syn.calibration, marginal, fallback);
  const auto ow_truth = ow_truth_labels(sf.ow_test, split);

  if (val_seqs.sequences.empty()) report.warnings.push_back("empty validation split; sigma fixed at 0.7");
  report.sigma = calibrate_stage(tuned.owcp.params, val_seqs.sequences, val_seqs.labels, opens, config);
  report.baseline_sigma = calibrate_stage(tuned.baseline.params, val_seqs.sequences, val_seqs.labels, opens, config);
  auto owcp_score = score_stage(tuned.owcp.params, report.sigma, ow_seqs, ow_truth, sf.cw_test.size(), config);
  auto base_score =
      score_stage(tuned.baseline.params, report.baseline_sigma, ow_seqs, ow_truth, sf.cw_test.size(), config);
  report.closed = std::move(owcp_score.closed);
  report.open = std::move(owcp_score.open);
  report.sigma_curve = std::move(owcp_score.curve);
  report.baseline_closed = std::move(base_score.closed);
  report.baseline_open = std::move(base_score.open);
  report.baseline_sigma_curve = std::move(base_score.curve);
  lap("score");
  return report;
}

AblationReport run_ablation(std::span<const FlowRecord> flows, const PipelineConfig& config, std::uint64_t seed) {
  AblationReport out;
  out.runs.push_back(run_pipeline(flows, config, {}, seed));
  out.runs.push_back(run_pipeline(flows, config, {.no_np = true}, seed));
  out.runs.push_back(run_pipeline(flows, config, {.no_pl = true}, seed));
  out.runs.push_back(run_pipeline(flows, config, {.no_cpt = true}, seed));
  out.runs.push_back(run_pipeline(flows, config, {.no_bsf = true}, seed));
  return out;
}

void SweepReport::write_csv(std::ostream& out) const {
  out << "fraction,seed,AC,F1,AC_ow,F1_ow\n";
  for (const auto& p : points) {
    out << p.fraction << ',' << p.seed << ',' << p.report.closed.ac << ',' << p.report.closed.macro_f1 << ','
        << p.report.open.ac_ow << ',' << p.report.open.f1_ow << '\n';
  }
}

SweepReport run_sensitivity(std::span<const FlowRecord> flows, std::span<const double> unknown_fractions,
                            std::span<const std::uint64_t> seeds, const PipelineConfig& config) {
  if (unknown_fractions.empty()) throw ConfigError("sweep needs at least one fraction");
  if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
  for (double f : unknown_fractions)
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("unknown fractions must be in (0, 1)");

  SweepReport out;
  for (double f : unknown_fractions) {
    PipelineConfig c = config;
    c.known_fraction = 1.0 - f;
    for (auto s : seeds) out.points.push_back({f, s, run_pipeline(flows, c, {}, s)});
  }
  for (double f : unknown_fractions) {
    SweepSummary sum;
    sum.fraction = f;
    std::vector<double> f1, f1_ow;
    for (const auto& p : out.points) {
      if (p.fraction != f) continue;
      f1.push_back(p.report.closed.macro_f1);
      f1_ow.push_back(p.report.open.f1_ow);
    }
    auto mean_spread = [](const std::vector<double>& v, double& mean, double& spread) {
      mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double sq = 0.0;
      for (double x : v) sq += (x - mean) * (x - mean);
      spread = std::sqrt(sq / static_cast<double>(v.size()));
    };
    mean_spread(f1, sum.f1_mean, sum.f1_spread);
    mean_spread(f1_ow, sum.f1_ow_mean, sum.f1_ow_spread);
    out.summary.push_back(sum);
  }
  if (unknown_fractions.size() >= 2) {
    double total = 0.0;
    for (auto s : seeds) {
      std::vector<double> x, y;
      for (const auto& p : out.points) {
        if (p.seed != s) continue;
        x.push_back(p.fraction);
        y.push_back(p.report.open.f1_ow);
      }
      total += spearman(x, y);
    }
    out.mean_spearman_f1_ow = total / static_cast<double>(seeds.size());
  }
  return out;
}

nlohmann::ordered_json to_json(const SweepReport& r) {
  nlohmann::ordered_json j;
  j["mean_spearman_f1_ow"] = r.mean_spearman_f1_ow;
  auto& summary = j["summary"] = nlohmann::ordered_json::array();
  for (const auto& s : r.summary) {
    summary.push_back({{"fraction", s.fraction},
                       {"f1_mean", s.f1_mean},
                       {"f1_spread", s.f1_spread},
                       {"f1_ow_mean", s.f1_ow_mean},
                       {"f1_ow_spread", s.f1_ow_spread}});
  }
  auto& points = j["points"] = nlohmann::ordered_json::array();
  for (const auto& p : r.points) points.push_back({{"fraction", p.fraction}, {"seed", p.seed}, {"report", to_json(p.report)}});
  return j;
}

}  // namespace owcp
