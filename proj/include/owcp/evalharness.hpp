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

#ifndef OWCP_EVALHARNESS_HPP
#define OWCP_EVALHARNESS_HPP

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "owcp/classifier.hpp"
#include "owcp/flow_store.hpp"
#include "owcp/gan.hpp"
#include "owcp/margins.hpp"
#include "owcp/pretrain.hpp"
#include "owcp/tokenizer.hpp"

namespace owcp {

struct SplitRatios {
  double train = 8.0;
  double val = 1.0;
  double test = 1.0;
};

struct SplitSpec {
  std::vector<std::string> known_classes;
  std::vector<std::string> unknown_classes;
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> cw_test;
  std::vector<std::string> ow_test;  // cw_test followed by every unknown-class flow
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;

  bool operator==(const SplitSpec&) const = default;
};

// Known classes: llround(known_fraction * C), clamped to [1, C - 1], drawn
// at random by seed. Inside each known class, floor(n * val / sum) flows go
// to validation and floor(n * test / sum) to the CW test; the remainder
// trains. Classes with fewer than 3 flows train entirely (with a warning).
// Unlabeled flows are ignored. Throws ConfigError with fewer than two
// classes or a fraction outside (0, 1).
SplitSpec make_split(std::span<const FlowRecord> flows, double known_fraction, std::uint64_t seed,
                     const SplitRatios& ratios = {});

nlohmann::ordered_json to_json(const SplitSpec& split);
SplitSpec split_from_json(const nlohmann::json& j);

struct ClassCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double f1 = 0.0;

  bool operator==(const ClassCounts&) const = default;
};

struct MetricsReport {
  std::size_t scored = 0;
  std::map<std::string, ClassCounts> per_class;
  std::map<std::string, std::map<std::string, std::size_t>> confusion;  // truth -> predicted -> count
  double ac = 0.0;
  double macro_f1 = 0.0;
  bool open = false;
  double ac_ow = 0.0;
  double f1_ow = 0.0;
  double known_recall = 0.0;
  double unknown_recall = 0.0;
  // Names of rates whose denominator was zero and were reported as 0.
  std::vector<std::string> guarded;
};

// Truths must all be known classes. A flow predicted UNKNOWN counts as a
// miss of its true class; UNKNOWN is not scored as a class here. Classes with
// neither truths nor predictions are excluded from the macro average.
// Throws ConfigError on empty or mismatched input or an UNKNOWN truth.
MetricsReport closed_metrics(std::span<const std::string> predicted, std::span<const std::string> truth);

// Truths use kUnknownLabel for unknown-class flows. AC_ow averages the
// correct-label known recall and the unknown recall; F1_ow is macro F1 over
// the known classes plus UNKNOWN. Throws ConfigError when no truth is UNKNOWN.
MetricsReport open_metrics(std::span<const std::string> predicted, std::span<const std::string> truth);

nlohmann::ordered_json to_json(const MetricsReport& report);

// Spearman rank correlation with average ranks for ties. 0 when either side
// is constant. Throws ConfigError on mismatched or fewer than two points.
double spearman(std::span<const double> x, std::span<const double> y);

struct PipelineConfig {
  TokenizerConfig tokenizer;
  EncoderConfig encoder;
  ContrastiveConfig pretrain;
  RadiusPolicy radius;
  EpsilonPolicy epsilon;
  GanConfig gan;
  // 0 = mean per-known-class training count.
  std::size_t synthetic_count = 0;
  // Extra synthetic samples, never trained on, used as calibration opens.
  std::size_t calibration_opens = 0;  // 0 = same as the synthetic count
  FinetuneConfig finetune;
  std::vector<double> sigma_grid = default_sigma_grid();
  bool unknown_in_argmax = false;
  double known_fraction = 0.8;
  SplitRatios ratios;

  static PipelineConfig desk();
  static PipelineConfig paper();
  void validate() const;
};

nlohmann::ordered_json to_json(const PipelineConfig& config);
// Missing keys keep the values of `base`. Throws ConfigError on bad values.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const PipelineConfig& base);

struct AblationSwitches {
  bool no_np = false;
  bool no_pl = false;
  bool no_cpt = false;
  bool no_bsf = false;

  std::string name() const;
  bool operator==(const AblationSwitches&) const = default;
};

struct PipelineReport {
  SplitSpec split;
  AblationSwitches switches;
  std::uint64_t seed = 0;
  double sigma = 0.0;           // OWCP
  double baseline_sigma = 0.0;  // thresholding softmax
  MetricsReport closed;         // OWCP on the CW test
  MetricsReport open;           // OWCP on the OW test
  MetricsReport baseline_closed;
  MetricsReport baseline_open;
  std::size_t marginal_before_filter = 0;
  std::size_t marginal_after_filter = 0;
  std::size_t synthetic = 0;
  double train_accuracy = 0.0;
  // AC_ow on the OW test at every grid sigma, for both models (diagnostic).
  std::vector<std::pair<double, double>> sigma_curve;
  std::vector<std::pair<double, double>> baseline_sigma_curve;
  std::map<std::string, double> stage_seconds;
  std::vector<std::string> warnings;
};

nlohmann::ordered_json to_json(const PipelineReport& report);

// Stages shared by run_pipeline and the command-line tool. Seeds for each
// stage derive from the run seed and a fixed tag.
std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t tag);

struct SplitFlows {
  std::vector<FlowRecord> train, val, cw_test, ow_test;
};
// Throws ConfigError when the split names a flow id missing from `flows`.
SplitFlows gather_split(std::span<const FlowRecord> flows, const SplitSpec& split);

EncodeOptions encode_options(const AblationSwitches& switches);
LabeledSequences encode_labeled(std::span<const FlowRecord> flows, const Vocabulary& vocab,
                                const PipelineConfig& config, const AblationSwitches& switches);

// Random init, then contrastive pre-training unless no_cpt (empty log).
PretrainResult pretrain_stage(const LabeledSequences& train, std::size_t vocab_size, const PipelineConfig& config,
                              const AblationSwitches& switches, std::uint64_t seed);

struct MarginStage {
  std::vector<ClassPrototype> prototypes;
  MarginalFlowSet marginal;
};
// Prototypes and marginal flows of the training set in the encoder's space,
// background-filtered unless no_bsf.
MarginStage margin_stage(std::span<const FlowRecord> train, const LabeledSequences& train_seqs,
                         const EncoderParams& encoder, const PipelineConfig& config,
                         const AblationSwitches& switches);

struct SyntheticStage {
  std::vector<GanParams> generators;  // one, or one per class with >= 2 kept flows
  std::vector<std::string> generator_classes;  // "*" for the pooled generator
  std::vector<GanLog> logs;
  std::vector<FlowEmbedding> synthetic;
  std::vector<FlowEmbedding> calibration;
  std::vector<std::string> warnings;
  bool aborted = false;  // some generator hit a non-finite loss
};
// Mean per-class training count unless the config pins one.
std::size_t synthetic_count(const PipelineConfig& config, std::size_t train_flows, std::size_t known_classes);
SyntheticStage synthetic_stage(const MarginalFlowSet& marginal, const PipelineConfig& config, std::size_t count,
                               std::uint64_t seed);

struct FinetuneStage {
  FinetuneResult owcp;
  FinetuneResult baseline;
};
FinetuneStage finetune_stage(const LabeledSequences& train, std::span<const FlowEmbedding> synthetic,
                             const EncoderParams& encoder, const PipelineConfig& config, std::uint64_t seed);

// Held-out synthetic samples; without any, the marginal embeddings, and
// without those, `fallback`.
std::vector<FlowEmbedding> calibration_opens(std::span<const FlowEmbedding> calibration,
                                             const MarginalFlowSet& marginal,
                                             std::span<const FlowEmbedding> fallback);

// 0.7 with an empty validation split.
double calibrate_stage(const ClassifierParams& params, std::span<const TokenSequence> val,
                       std::span<const std::string> val_labels, std::span<const FlowEmbedding> opens,
                       const PipelineConfig& config);

struct ScoreStage {
  std::vector<Prediction> predictions;  // one per OW test flow
  MetricsReport closed;
  MetricsReport open;
  std::vector<std::pair<double, double>> curve;
};
// `ow_truth` uses kUnknownLabel for unknown flows; its first `cw_count`
// entries are the CW test.
ScoreStage score_stage(const ClassifierParams& params, double sigma, std::span<const TokenSequence> ow,
                       std::span<const std::string> ow_truth, std::size_t cw_count, const PipelineConfig& config);

std::vector<std::string> ow_truth_labels(std::span<const FlowRecord> ow_test, const SplitSpec& split);

// Split, vocabulary, pre-training, margins, BSF, GAN, fine-tuning of both the
// OWCP head and the thresholding-softmax baseline from the same encoder,
// sigma calibration, and scoring. Every random draw derives from `seed`.
PipelineReport run_pipeline(std::span<const FlowRecord> flows, const PipelineConfig& config,
                            const AblationSwitches& switches, std::uint64_t seed);

struct AblationReport {
  std::vector<PipelineReport> runs;  // full model first, then one per switch
};

// Full model plus each of no_NP, no_PL, no_CPT, no_BSF on its own, with
// identical seeds and configs.
AblationReport run_ablation(std::span<const FlowRecord> flows, const PipelineConfig& config, std::uint64_t seed);

struct SweepPoint {
  double fraction = 0.0;  // unknown-class fraction
  std::uint64_t seed = 0;
  PipelineReport report;
};

struct SweepSummary {
  double fraction = 0.0;
  double f1_mean = 0.0;
  double f1_spread = 0.0;  // population standard deviation over seeds
  double f1_ow_mean = 0.0;
  double f1_ow_spread = 0.0;
};

struct SweepReport {
  std::vector<SweepPoint> points;
  std::vector<SweepSummary> summary;
  // Mean over seeds of spearman(fraction, F1_ow); 0 with one fraction.
  double mean_spearman_f1_ow = 0.0;

  // fraction,seed,AC,F1,AC_ow,F1_ow
  void write_csv(std::ostream& out) const;
};

// Throws ConfigError when a fraction is outside (0, 1) or no seed is given.
SweepReport run_sensitivity(std::span<const FlowRecord> flows, std::span<const double> unknown_fractions,
                            std::span<const std::uint64_t> seeds, const PipelineConfig& config);

nlohmann::ordered_json to_json(const SweepReport& report);

}  // namespace owcp

#endif  // OWCP_EVALHARNESS_HPP
