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

#include "owcp/cli.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "owcp/classifier.hpp"
#include "owcp/error.hpp"
#include "owcp/evalharness.hpp"
#include "owcp/flow_store.hpp"
#include "owcp/hashing.hpp"
#include "owcp/tensor_io.hpp"

namespace owcp::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

const std::map<std::string, std::vector<std::string>>& dependencies() {
  static const std::map<std::string, std::vector<std::string>> deps{
      {"gen-corpus", {}},
      {"build-vocab", {"gen-corpus"}},
      {"pretrain", {"gen-corpus", "build-vocab"}},
      {"margins", {"gen-corpus", "build-vocab", "pretrain"}},
      {"train-gan", {"build-vocab", "margins"}},
      {"finetune", {"gen-corpus", "build-vocab", "pretrain", "train-gan"}},
      {"calibrate", {"gen-corpus", "build-vocab", "pretrain", "margins", "train-gan", "finetune"}},
      {"evaluate", {"gen-corpus", "build-vocab", "finetune", "calibrate"}},
      {"classify", {"build-vocab", "finetune", "calibrate"}},
      {"ablate", {"gen-corpus"}},
      {"sweep", {"gen-corpus"}},
  };
  return deps;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write-then-rename so readers never see a partial artifact.
void write_file(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << bytes;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void check_keys(const nlohmann::json& j, const std::string& section, const std::set<std::string>& keys) {
  if (!j.is_object()) throw ConfigError("section '" + section + "' must be an object");
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw ConfigError("unknown key '" + k + "' in section '" + section + "'");
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

void flatten(const nlohmann::json& j, const std::string& prefix, std::map<std::string, std::string>& out) {
  if (j.is_object() && !j.empty()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else {
    out[prefix] = j.dump();
  }
}

ojson without_timing(ojson j) {
  j.erase("stage_seconds");
  return j;
}

struct Options {
  std::string command;
  fs::path config_path;
  fs::path workdir;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::string preset;
  fs::path input;
  fs::path output;
  bool baseline = false;
};

// Everything a command needs from the config file and flags.
struct Run {
  Options opt;
  fs::path workdir;
  PipelineConfig config;
  nlohmann::json corpus;  // generator spec, or {"path": ...}
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<double> unknown_fractions{0.1, 0.2, 0.3, 0.4, 0.5};
};

Run resolve(const Options& opt) {
  Run run;
  run.opt = opt;
  nlohmann::json j = nlohmann::json::object();
  if (!opt.config_path.empty()) {
    try {
      j = nlohmann::json::parse(read_file(opt.config_path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + opt.config_path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
  }
  std::string preset = "desk";
  read(j, "preset", preset);
  if (!opt.preset.empty()) preset = opt.preset;
  if (preset != "desk" && preset != "paper") throw ConfigError("preset must be desk or paper, got '" + preset + "'");
  run.config = pipeline_config_from_json(j, preset == "paper" ? PipelineConfig::paper() : PipelineConfig::desk());

  fs::path corpus_path;
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    check_keys(p, "paths", {"corpus", "workdir"});
    std::string s;
    if (p.contains("workdir")) {
      read(p, "workdir", s);
      run.workdir = s;
    }
    if (p.contains("corpus")) {
      read(p, "corpus", s);
      corpus_path = s;
      if (corpus_path.is_relative() && !opt.config_path.empty())
        corpus_path = opt.config_path.parent_path() / corpus_path;
    }
  }
  if (!opt.workdir.empty()) run.workdir = opt.workdir;
  if (run.workdir.empty()) throw ConfigError("no workdir: pass --workdir or set paths.workdir");

  if (j.contains("corpus") && !corpus_path.empty()) throw ConfigError("set either corpus or paths.corpus, not both");
  if (!corpus_path.empty()) {
    run.corpus = {{"path", fs::absolute(corpus_path).lexically_normal().string()}};
  } else {
    run.corpus = to_json(corpus_spec_from_json(j.value("corpus", nlohmann::json::object())));
  }

  if (j.contains("eval")) {
    read(j["eval"], "seeds", run.seeds);
    read(j["eval"], "unknown_fractions", run.unknown_fractions);
  }
  if (run.seeds.empty()) throw ConfigError("eval.seeds must not be empty");
  run.seed = opt.seed.value_or(run.seeds.front());
  return run;
}

// Config slice each stage depends on, so editing one section only
// invalidates the stages that read it.
ojson stage_config(const Run& run, const std::string& stage) {
  const ojson all = to_json(run.config);
  ojson c = ojson::object();
  if (stage == "gen-corpus") {
    c["corpus"] = run.corpus;
  } else if (stage == "build-vocab") {
    c["tokenizer"] = all["tokenizer"];
    c["eval"] = all["eval"];
  } else if (stage == "pretrain") {
    c["encoder"] = all["encoder"];
    c["pretrain"] = all["pretrain"];
  } else if (stage == "margins") {
    c["margins"] = all["margins"];
  } else if (stage == "train-gan") {
    c["gan"] = all["gan"];
  } else if (stage == "finetune" || stage == "calibrate") {
    c["classifier"] = all["classifier"];
  } else {
    c = all;
    if (stage == "sweep") {
      c["eval"]["seeds"] = run.seeds;
      c["eval"]["unknown_fractions"] = run.unknown_fractions;
    }
  }
  return c;
}

std::uint64_t stage_seed(const Run& run, const std::string& stage) {
  if (stage == "gen-corpus") return run.corpus.contains("seed") ? run.corpus["seed"].get<std::uint64_t>() : 0;
  if (stage == "sweep") return 0;  // seeds live in the config slice
  return run.seed;
}

// Transitive upstream stages in pipeline order.
std::vector<std::string> upstream(const std::string& stage) {
  std::set<std::string> seen;
  std::vector<std::string> todo = dependencies().at(stage);
  while (!todo.empty()) {
    auto s = todo.back();
    todo.pop_back();
    if (!seen.insert(s).second) continue;
    for (const auto& d : dependencies().at(s)) todo.push_back(d);
  }
  std::vector<std::string> out;
  for (const auto& s : stage_order())
    if (seen.count(s)) out.push_back(s);
  return out;
}

std::map<std::string, std::string> current_inputs(const Manifest& m, const std::string& stage) {
  std::map<std::string, std::string> in;
  for (const auto& d : dependencies().at(stage)) {
    const ManifestEntry* e = m.find(d);
    if (!e) throw MissingStageError(d);
    for (const auto& [name, hash] : e->outputs) in[name] = hash;
  }
  return in;
}

// Every upstream stage must be recorded, current with respect to its own
// inputs, and have its artifacts on disk unchanged.
void require_upstream(const Manifest& m, const fs::path& workdir, const std::string& stage, std::ostream& err) {
  for (const auto& s : upstream(stage)) {
    const ManifestEntry* e = m.find(s);
    if (!e) throw MissingStageError(s);
    if (e->inputs != current_inputs(m, s)) {
      err << "stage " << s << " is stale: an upstream stage was rerun after it\n";
      throw MissingStageError(s);
    }
    for (const auto& [name, hash] : e->outputs) {
      const fs::path p = workdir / name;
      if (!fs::exists(p) || sha256_file(p) != hash) {
        err << "artifact " << name << " is missing or changed since stage " << s << " wrote it\n";
        throw MissingStageError(s);
      }
    }
  }
}

class Workspace {
 public:
  Workspace(const Run& run, std::ostream& out, std::ostream& err)
      : run_(run), dir_(run.workdir), out_(out), err_(err), manifest_(Manifest::load(run.workdir)) {}

  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& name) const { return dir_ / name; }
  const Manifest& manifest() const { return manifest_; }

  // Runs `body` unless the recorded entry already matches; `body` returns
  // the names of the artifacts it wrote.
  template <typename Body>
  int stage(const std::string& name, Body&& body) {
    require_upstream(manifest_, dir_, name, err_);
    const auto inputs = current_inputs(manifest_, name);
    const ojson config = stage_config(run_, name);
    const std::uint64_t seed = stage_seed(run_, name);
    const std::string config_hash = sha256_hex(config.dump());
    if (const ManifestEntry* prev = manifest_.find(name); prev && !run_.opt.force) {
      if (prev->config_hash != config_hash || prev->seed != seed) {
        ojson before = prev->config, after = config;
        before["seed"] = prev->seed;
        after["seed"] = seed;
        std::string msg = "config differs from the recorded " + name + " run (use --force or a fresh workdir):";
        for (const auto& line : config_diff(before, after)) msg += "\n  " + line;
        throw ConfigError(msg);
      }
      bool intact = prev->inputs == inputs;
      for (const auto& [file, hash] : prev->outputs)
        intact = intact && fs::exists(path(file)) && sha256_file(path(file)) == hash;
      if (intact) {
        out_ << name << ": up to date\n";
        return kOk;
      }
    }
    const std::vector<std::string> written = body();
    ManifestEntry entry;
    entry.stage = name;
    entry.inputs = inputs;
    for (const auto& file : written) entry.outputs[file] = sha256_file(path(file));
    entry.config = config;
    entry.config_hash = config_hash;
    entry.seed = seed;
    manifest_.put(std::move(entry));
    manifest_.save(dir_);
    out_ << name << ":";
    for (const auto& file : written) out_ << ' ' << file;
    out_ << '\n';
    return kOk;
  }

  std::vector<FlowRecord> corpus() const { return load_flows(path("corpus.jsonl")); }
  SplitSpec split() const { return split_from_json(nlohmann::json::parse(read_file(path("split.json")))); }
  Vocabulary vocab() const { return Vocabulary::load(path("vocab.tsv")); }
  EncoderParams encoder() const {
    EncoderParams p;
    EncoderConfig c;
    read_encoder_checkpoint(TensorArchive::load(path("encoder.owt")), p, c);
    if (!(c == run_.config.encoder)) throw ConfigError("encoder.owt was built with another encoder config");
    return p;
  }
  ClassifierParams classifier(bool baseline) const {
    return read_classifier_checkpoint(TensorArchive::load(path(baseline ? "baseline.owt" : "classifier.owt")));
  }
  nlohmann::json calibration() const { return nlohmann::json::parse(read_file(path("calibration.json"))); }

 private:
  const Run& run_;
  fs::path dir_;
  std::ostream& out_;
  std::ostream& err_;
  Manifest manifest_;
};

TensorArchive marginal_archive(const MarginalFlowSet& m, Eigen::Index dim) {
  TensorArchive a("marginal");
  std::vector<std::string> ids, classes;
  std::vector<bool> kept;
  std::vector<RowVector> rows;
  for (const auto& e : m.entries) {
    ids.push_back(e.flow_id);
    classes.push_back(e.class_id);
    kept.push_back(e.kept);
    rows.push_back(e.embedding);
  }
  a.meta()["flow_ids"] = ids;
  a.meta()["classes"] = classes;
  a.meta()["kept"] = kept;
  a.meta()["count_before_filter"] = m.count_before_filter;
  a.meta()["count_after_filter"] = m.count_after_filter;
  a.add("embeddings", stack_rows(rows, dim));
  return a;
}

MarginalFlowSet read_marginal_archive(const TensorArchive& a) {
  if (a.kind() != "marginal") throw ParseError("expected a marginal archive, got '" + a.kind() + "'", 0);
  MarginalFlowSet m;
  const auto ids = a.meta().at("flow_ids").get<std::vector<std::string>>();
  const auto classes = a.meta().at("classes").get<std::vector<std::string>>();
  const auto kept = a.meta().at("kept").get<std::vector<bool>>();
  const auto rows = unstack_rows(a.get("embeddings"));
  if (classes.size() != ids.size() || kept.size() != ids.size() || rows.size() != ids.size())
    throw ParseError("marginal archive fields differ in length", 0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    MarginalEntry e;
    e.flow_id = ids[i];
    e.class_id = classes[i];
    e.embedding = rows[i];
    e.kept = kept[i];
    m.entries.push_back(std::move(e));
  }
  m.count_before_filter = a.meta().at("count_before_filter").get<std::size_t>();
  m.count_after_filter = a.meta().at("count_after_filter").get<std::size_t>();
  return m;
}

std::string generator_name(std::size_t i) {
  std::string s = std::to_string(i);
  return "gan_" + std::string(s.size() < 2 ? 2 - s.size() : 0, '0') + s;
}

std::vector<std::string> cmd_gen_corpus(const Run& run, Workspace& ws) {
  std::vector<FlowRecord> flows;
  if (run.corpus.contains("path")) {
    flows = load_flows(run.corpus["path"].get<std::string>());
  } else {
    flows = generate_corpus(corpus_spec_from_json(run.corpus));
  }
  const auto report = validate_corpus(flows);
  if (!report.ok()) {
    std::string msg = "corpus failed validation:";
    for (const auto& e : report.errors) msg += "\n  " + e;
    throw ValidationError(msg);
  }
  std::ostringstream ss;
  write_flows(ss, flows);
  write_file(ws.path("corpus.jsonl"), ss.str());
  return {"corpus.jsonl"};
}

std::vector<std::string> cmd_build_vocab(const Run& run, Workspace& ws) {
  const auto flows = ws.corpus();
  const SplitSpec split = make_split(flows, run.config.known_fraction, derive_seed(run.seed, 1), run.config.ratios);
  const auto sf = gather_split(flows, split);
  const Vocabulary vocab = build_vocab(sf.train, run.config.tokenizer);
  write_file(ws.path("split.json"), to_json(split).dump(2) + "\n");
  std::ostringstream ss;
  vocab.write(ss);
  write_file(ws.path("vocab.tsv"), ss.str());
  return {"split.json", "vocab.tsv"};
}

std::vector<std::string> cmd_pretrain(const Run& run, Workspace& ws) {
  const auto sf = gather_split(ws.corpus(), ws.split());
  const Vocabulary vocab = ws.vocab();
  const auto train = encode_labeled(sf.train, vocab, run.config, {});
  const auto result = pretrain_stage(train, vocab.size(), run.config, {}, run.seed);
  write_file(ws.path("encoder.owt"), encoder_checkpoint(result.params, run.config.encoder, vocab.hash()).serialize());
  std::ostringstream log;
  result.log.write(log);
  write_file(ws.path("pretrain_log.jsonl"), log.str());
  return {"encoder.owt", "pretrain_log.jsonl"};
}

std::vector<std::string> cmd_margins(const Run& run, Workspace& ws) {
  const auto sf = gather_split(ws.corpus(), ws.split());
  const auto train = encode_labeled(sf.train, ws.vocab(), run.config, {});
  const auto stage = margin_stage(sf.train, train, ws.encoder(), run.config, {});
  ojson protos = ojson::array();
  for (const auto& p : stage.prototypes) {
    protos.push_back({{"class", p.class_id},
                      {"radius", p.radius},
                      {"members", p.member_count},
                      {"centroid", std::vector<double>(p.centroid.data(), p.centroid.data() + p.centroid.size())}});
  }
  write_file(ws.path("prototypes.json"), protos.dump(2) + "\n");
  std::ostringstream ss;
  stage.marginal.write(ss);
  write_file(ws.path("marginal.jsonl"), ss.str());
  write_file(ws.path("marginal.owt"),
             marginal_archive(stage.marginal, static_cast<Eigen::Index>(run.config.encoder.d_model)).serialize());
  return {"prototypes.json", "marginal.jsonl", "marginal.owt"};
}

std::vector<std::string> cmd_train_gan(const Run& run, Workspace& ws, std::ostream& err, int& status) {
  const SplitSpec split = ws.split();
  const auto marginal = read_marginal_archive(TensorArchive::load(ws.path("marginal.owt")));
  const auto count = synthetic_count(run.config, split.train.size(), split.known_classes.size());
  const auto stage = synthetic_stage(marginal, run.config, count, run.seed);
  for (const auto& w : stage.warnings) err << "warning: " << w << '\n';
  // The last finite generators are still written.
  if (stage.aborted) status = kNumericFailure;
  std::vector<std::string> written;
  std::string joined_hashes;
  for (std::size_t i = 0; i < stage.generators.size(); ++i) {
    const std::string name = generator_name(i);
    TensorArchive a = gan_checkpoint(stage.generators[i], run.config.gan);
    a.meta()["class"] = stage.generator_classes[i];
    const std::string bytes = a.serialize();
    joined_hashes += sha256_hex(bytes);
    write_file(ws.path(name + ".owt"), bytes);
    std::ostringstream log;
    stage.logs[i].write(log);
    write_file(ws.path(name + "_log.jsonl"), log.str());
    written.push_back(name + ".owt");
    written.push_back(name + "_log.jsonl");
  }
  const std::string generator_hash = sha256_hex(joined_hashes);
  write_file(ws.path("synthetic.owt"),
             synthetic_archive(stage.synthetic, generator_hash, derive_seed(run.seed, 5)).serialize());
  write_file(ws.path("calibration_opens.owt"),
             synthetic_archive(stage.calibration, generator_hash, derive_seed(run.seed, 6)).serialize());
  written.push_back("synthetic.owt");
  written.push_back("calibration_opens.owt");
  return written;
}

std::vector<std::string> cmd_finetune(const Run& run, Workspace& ws) {
  const auto sf = gather_split(ws.corpus(), ws.split());
  const auto train = encode_labeled(sf.train, ws.vocab(), run.config, {});
  const auto synthetic = read_synthetic_archive(TensorArchive::load(ws.path("synthetic.owt")));
  const auto tuned = finetune_stage(train, synthetic, ws.encoder(), run.config, run.seed);
  write_file(ws.path("classifier.owt"), classifier_checkpoint(tuned.owcp.params).serialize());
  write_file(ws.path("baseline.owt"), classifier_checkpoint(tuned.baseline.params).serialize());
  ojson summary;
  summary["owcp"] = {{"epoch_loss", tuned.owcp.epoch_loss}, {"train_accuracy", tuned.owcp.train_accuracy}};
  summary["baseline"] = {{"epoch_loss", tuned.baseline.epoch_loss},
                         {"train_accuracy", tuned.baseline.train_accuracy}};
  write_file(ws.path("finetune.json"), summary.dump(2) + "\n");
  return {"classifier.owt", "baseline.owt", "finetune.json"};
}

std::vector<std::string> cmd_calibrate(const Run& run, Workspace& ws) {
  const auto sf = gather_split(ws.corpus(), ws.split());
  const Vocabulary vocab = ws.vocab();
  const auto val = encode_labeled(sf.val, vocab, run.config, {});
  const auto held_out = read_synthetic_archive(TensorArchive::load(ws.path("calibration_opens.owt")));
  const auto marginal = read_marginal_archive(TensorArchive::load(ws.path("marginal.owt")));
  std::vector<FlowEmbedding> fallback;
  if (held_out.empty() && marginal.entries.empty())
    fallback = embed_all(encode_labeled(sf.train, vocab, run.config, {}).sequences, ws.encoder(), run.config.encoder);
  const auto opens = calibration_opens(held_out, marginal, fallback);
  ojson j;
  j["sigma"] = calibrate_stage(ws.classifier(false), val.sequences, val.labels, opens, run.config);
  j["baseline_sigma"] = calibrate_stage(ws.classifier(true), val.sequences, val.labels, opens, run.config);
  j["unknown_in_argmax"] = run.config.unknown_in_argmax;
  j["validation_flows"] = val.size();
  j["calibration_opens"] = opens.size();
  j["opens_source"] = !held_out.empty() ? "synthetic" : !marginal.entries.empty() ? "marginal" : "training";
  write_file(ws.path("calibration.json"), j.dump(2) + "\n");
  return {"calibration.json"};
}

int cmd_evaluate(const Run& run, Workspace& ws, std::ostream& out, std::ostream& err) {
  require_upstream(ws.manifest(), ws.dir(), "evaluate", err);
  const SplitSpec split = ws.split();
  const auto sf = gather_split(ws.corpus(), split);
  const auto ow = encode_flows(sf.ow_test, ws.vocab(), run.config.tokenizer);
  const auto truth = ow_truth_labels(sf.ow_test, split);
  const auto cal = ws.calibration();
  const auto owcp = score_stage(ws.classifier(false), cal.at("sigma").get<double>(), ow, truth, sf.cw_test.size(),
                                run.config);
  const auto base = score_stage(ws.classifier(true), cal.at("baseline_sigma").get<double>(), ow, truth,
                                sf.cw_test.size(), run.config);
  auto curve = [](const std::vector<std::pair<double, double>>& c) {
    ojson a = ojson::array();
    for (const auto& [s, v] : c) a.push_back({s, v});
    return a;
  };
  ojson j;
  j["seed"] = run.seed;
  j["sigma"] = cal.at("sigma");
  j["baseline_sigma"] = cal.at("baseline_sigma");
  j["owcp"] = {{"closed", to_json(owcp.closed)}, {"open", to_json(owcp.open)}, {"sigma_curve", curve(owcp.curve)}};
  j["baseline"] = {{"closed", to_json(base.closed)}, {"open", to_json(base.open)}, {"sigma_curve", curve(base.curve)}};
  write_file(ws.path("metrics.json"), j.dump(2) + "\n");
  std::ostringstream preds;
  for (std::size_t i = 0; i < owcp.predictions.size(); ++i)
    write_prediction(preds, sf.ow_test[i].flow_id, owcp.predictions[i]);
  write_file(ws.path("predictions.jsonl"), preds.str());
  out << "evaluate: metrics.json predictions.jsonl\n";
  out << "owcp     F1 " << owcp.closed.macro_f1 << "  AC_ow " << owcp.open.ac_ow << "  F1_ow " << owcp.open.f1_ow << '\n';
  out << "baseline F1 " << base.closed.macro_f1 << "  AC_ow " << base.open.ac_ow << "  F1_ow " << base.open.f1_ow << '\n';
  return kOk;
}

int cmd_classify(const Run& run, Workspace& ws, std::ostream& out, std::ostream& err) {
  require_upstream(ws.manifest(), ws.dir(), "classify", err);
  if (run.opt.input.empty()) throw ConfigError("classify needs --input");
  const auto flows = load_flows(run.opt.input);
  const auto params = ws.classifier(run.opt.baseline);
  const auto cal = ws.calibration();
  const double sigma = cal.at(run.opt.baseline ? "baseline_sigma" : "sigma").get<double>();
  const DecisionConfig dc{sigma, run.config.unknown_in_argmax && params.unknown_node};
  const auto seqs = encode_flows(flows, ws.vocab(), run.config.tokenizer);
  std::ostringstream ss;
  const auto emb = classifier_embed_all(seqs, params);
  for (std::size_t i = 0; i < flows.size(); ++i) write_prediction(ss, flows[i].flow_id, predict_embedding(emb[i], params, dc));
  if (run.opt.output.empty()) {
    out << ss.str();
  } else {
    write_file(run.opt.output, ss.str());
  }
  return kOk;
}

std::vector<std::string> cmd_ablate(const Run& run, Workspace& ws, std::ostream& out) {
  const auto report = run_ablation(ws.corpus(), run.config, run.seed);
  ojson runs = ojson::array();
  for (const auto& r : report.runs) {
    runs.push_back(without_timing(to_json(r)));
    out << r.switches.name() << "  F1 " << r.closed.macro_f1 << "  AC_ow " << r.open.ac_ow << '\n';
  }
  write_file(ws.path("ablation.json"), runs.dump(2) + "\n");
  return {"ablation.json"};
}

std::vector<std::string> cmd_sweep(const Run& run, Workspace& ws, std::ostream& out) {
  const auto report = run_sensitivity(ws.corpus(), run.unknown_fractions, run.seeds, run.config);
  ojson j = to_json(report);
  if (j.contains("points"))
    for (auto& p : j["points"])
      if (p.contains("report")) p["report"] = without_timing(p["report"]);
  write_file(ws.path("sweep.json"), j.dump(2) + "\n");
  std::ostringstream csv;
  report.write_csv(csv);
  write_file(ws.path("sweep.csv"), csv.str());
  out << "mean spearman(fraction, F1_ow) " << report.mean_spearman_f1_ow << '\n';
  return {"sweep.json", "sweep.csv"};
}

int dispatch(const Options& opt, std::ostream& out, std::ostream& err) {
  const Run run = resolve(opt);
  fs::create_directories(run.workdir);
  const std::string& c = opt.command;
  if (c == "evaluate" || c == "classify") {
    Workspace ws(run, out, err);
    return c == "evaluate" ? cmd_evaluate(run, ws, out, err) : cmd_classify(run, ws, out, err);
  }
  WorkdirLock lock(run.workdir);
  Workspace ws(run, out, err);
  if (c == "gen-corpus") return ws.stage(c, [&] { return cmd_gen_corpus(run, ws); });
  if (c == "build-vocab") return ws.stage(c, [&] { return cmd_build_vocab(run, ws); });
  if (c == "pretrain") return ws.stage(c, [&] { return cmd_pretrain(run, ws); });
  if (c == "margins") return ws.stage(c, [&] { return cmd_margins(run, ws); });
  if (c == "train-gan") {
    int status = kOk;
    const int code = ws.stage(c, [&] { return cmd_train_gan(run, ws, err, status); });
    return code == kOk ? status : code;
  }
  if (c == "finetune") return ws.stage(c, [&] { return cmd_finetune(run, ws); });
  if (c == "calibrate") return ws.stage(c, [&] { return cmd_calibrate(run, ws); });
  if (c == "ablate") return ws.stage(c, [&] { return cmd_ablate(run, ws, out); });
  if (c == "sweep") return ws.stage(c, [&] { return cmd_sweep(run, ws, out); });
  throw ConfigError("unknown command " + c);
}

}  // namespace

const std::vector<std::string>& stage_inputs(const std::string& stage) {
  auto it = dependencies().find(stage);
  if (it == dependencies().end()) throw ConfigError("unknown stage " + stage);
  return it->second;
}

Manifest Manifest::load(const fs::path& workdir) {
  Manifest m;
  const fs::path p = workdir / "manifest.json";
  if (!fs::exists(p)) return m;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(p));
    for (const auto& e : j.at("stages")) {
      ManifestEntry entry;
      entry.stage = e.at("stage").get<std::string>();
      entry.inputs = e.at("inputs").get<std::map<std::string, std::string>>();
      entry.outputs = e.at("outputs").get<std::map<std::string, std::string>>();
      entry.config = ojson::parse(e.at("config").dump());
      entry.config_hash = e.at("config_hash").get<std::string>();
      entry.seed = e.at("seed").get<std::uint64_t>();
      m.entries_[entry.stage] = std::move(entry);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest.json: " + std::string(e.what()), 0);
  }
  return m;
}

void Manifest::save(const fs::path& workdir) const {
  ojson stages = ojson::array();
  auto emit = [&](const ManifestEntry& e) {
    stages.push_back({{"stage", e.stage},
                      {"inputs", e.inputs},
                      {"outputs", e.outputs},
                      {"config", e.config},
                      {"config_hash", e.config_hash},
                      {"seed", e.seed}});
  };
  for (const auto& s : stage_order())
    if (auto it = entries_.find(s); it != entries_.end()) emit(it->second);
  for (const auto& [name, e] : entries_)
    if (std::find(stage_order().begin(), stage_order().end(), name) == stage_order().end()) emit(e);
  write_file(workdir / "manifest.json", ojson{{"stages", stages}}.dump(2) + "\n");
}

const ManifestEntry* Manifest::find(const std::string& stage) const {
  auto it = entries_.find(stage);
  return it == entries_.end() ? nullptr : &it->second;
}

void Manifest::put(ManifestEntry entry) { entries_[entry.stage] = std::move(entry); }

bool Manifest::consistent() const {
  for (const auto& [name, e] : entries_) {
    try {
      if (e.inputs != current_inputs(*this, name)) return false;
    } catch (const MissingStageError&) {
      return false;
    }
  }
  return true;
}

std::vector<std::string> config_diff(const nlohmann::json& before, const nlohmann::json& after) {
  std::map<std::string, std::string> a, b;
  flatten(before, "", a);
  flatten(after, "", b);
  std::set<std::string> keys;
  for (const auto& [k, v] : a) keys.insert(k);
  for (const auto& [k, v] : b) keys.insert(k);
  std::vector<std::string> out;
  for (const auto& k : keys) {
    const auto ia = a.find(k), ib = b.find(k);
    const std::string va = ia == a.end() ? "(absent)" : ia->second;
    const std::string vb = ib == b.end() ? "(absent)" : ib->second;
    if (va != vb) out.push_back(k + ": " + va + " -> " + vb);
  }
  return out;
}

WorkdirLock::WorkdirLock(const fs::path& workdir) : path_(workdir / ".lock") {
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      const auto written = ::write(fd, pid.data(), pid.size());
      ::close(fd);
      if (written != static_cast<ssize_t>(pid.size())) {
        fs::remove(path_);
        throw Error("cannot write lock file " + path_.string());
      }
      return;
    }
    if (errno != EEXIST) throw Error("cannot create lock file " + path_.string());
    long holder = 0;
    {
      std::ifstream in(path_);
      in >> holder;
    }
    const bool alive = holder > 0 && (::kill(static_cast<pid_t>(holder), 0) == 0 || errno == EPERM);
    if (alive) throw Error("workdir is locked by process " + std::to_string(holder) + " (" + path_.string() + ")");
    fs::remove(path_);
  }
  throw Error("cannot acquire lock " + path_.string());
}

WorkdirLock::~WorkdirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

CorpusSpec corpus_spec_from_json(const nlohmann::json& j) {
  check_keys(j, "corpus",
             {"num_classes", "flows_per_class", "skew", "favored_pairs", "length_spread", "min_packets", "max_packets",
              "ack_fraction", "tpl_share_fraction", "shared_pool_size", "tpl_content_mix",
              "unique_backgrounds_per_class", "label_prefix", "seed"});
  CorpusSpec s;
  read(j, "num_classes", s.num_classes);
  read(j, "flows_per_class", s.flows_per_class);
  read(j, "skew", s.skew);
  read(j, "favored_pairs", s.favored_pairs);
  read(j, "length_spread", s.length_spread);
  read(j, "min_packets", s.min_packets);
  read(j, "max_packets", s.max_packets);
  read(j, "ack_fraction", s.ack_fraction);
  read(j, "tpl_share_fraction", s.tpl_share_fraction);
  read(j, "shared_pool_size", s.shared_pool_size);
  read(j, "tpl_content_mix", s.tpl_content_mix);
  read(j, "unique_backgrounds_per_class", s.unique_backgrounds_per_class);
  read(j, "label_prefix", s.label_prefix);
  read(j, "seed", s.seed);
  s.validate();
  return s;
}

ojson to_json(const CorpusSpec& s) {
  return {{"num_classes", s.num_classes},
          {"flows_per_class", s.flows_per_class},
          {"skew", s.skew},
          {"favored_pairs", s.favored_pairs},
          {"length_spread", s.length_spread},
          {"min_packets", s.min_packets},
          {"max_packets", s.max_packets},
          {"ack_fraction", s.ack_fraction},
          {"tpl_share_fraction", s.tpl_share_fraction},
          {"shared_pool_size", s.shared_pool_size},
          {"tpl_content_mix", s.tpl_content_mix},
          {"unique_backgrounds_per_class", s.unique_backgrounds_per_class},
          {"label_prefix", s.label_prefix},
          {"seed", s.seed}};
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Open-world encrypted traffic classification pipeline", "owcp"};
  app.require_subcommand(1);
  app.fallthrough();
  Options opt;
  std::string config, workdir;
  std::uint64_t seed = 0;
  app.add_option("--config", config, "JSON run configuration");
  app.add_option("--workdir", workdir, "Experiment directory (artifacts + manifest)");
  auto* seed_opt = app.add_option("--seed", seed, "Run seed (default: first of eval.seeds, else 1)");
  app.add_flag("--force", opt.force, "Rerun a stage even when its manifest entry matches");
  app.add_option("--preset", opt.preset, "Base configuration")->check(CLI::IsMember({"desk", "paper"}));

  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-corpus", "Generate (or import) the labeled corpus"},
      {"build-vocab", "Split the corpus and build the token vocabulary"},
      {"pretrain", "Contrastive pre-training of the encoder"},
      {"margins", "Prototypes, marginal flows and background filtering"},
      {"train-gan", "Train generators and sample synthetic unknowns"},
      {"finetune", "Fine-tune the open-world head and the softmax baseline"},
      {"calibrate", "Grid-search the rejection threshold"},
      {"evaluate", "Score both models on the test splits"},
      {"classify", "Label flows from a flow file"},
      {"ablate", "Run the full model and each ablation"},
      {"sweep", "Sweep the unknown-class fraction over seeds"},
  };
  std::string input, output;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    if (name == "classify") {
      sub->add_option("--input", input, "Flow file to classify")->required();
      sub->add_option("--output", output, "Prediction file (default: stdout)");
      sub->add_flag("--baseline", opt.baseline, "Use the thresholding-softmax baseline");
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }
  opt.command = app.get_subcommands().front()->get_name();
  opt.config_path = config;
  opt.workdir = workdir;
  if (seed_opt->count() > 0) opt.seed = seed;
  opt.input = input;
  opt.output = output;

  try {
    return dispatch(opt, out, err);
  } catch (const MissingStageError& e) {
    err << "error: " << e.what() << '\n';
    return kMissingStage;
  } catch (const NumericError& e) {
    err << "error: numeric failure: " << e.what() << '\n';
    return kNumericFailure;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace owcp::cli
