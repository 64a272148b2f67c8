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

// Acceptance runner: one PASS/FAIL line per criterion. Pass criterion
// numbers as arguments to run a subset.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "owcp/cli.hpp"
#include "owcp/evalharness.hpp"
#include "owcp/hashing.hpp"
#include "owcp/synthgen.hpp"

using namespace owcp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(4);
  ss << v;
  return ss.str();
}

CorpusSpec end_to_end_corpus() {
  CorpusSpec s;
  s.num_classes = 10;
  s.flows_per_class = 200;
  s.skew = 0.5;
  s.tpl_share_fraction = 0.2;
  s.seed = 1;
  return s;
}

Outcome tokenizer_examples() {
  auto packet = [](Direction d, std::uint32_t len, std::string payload = {}) {
    return PacketView{d, len, std::move(payload)};
  };
  FlowRecord f;
  f.flow_id = "f";
  f.label = "a";
  f.background.dst_ip = "192.0.2.1";
  f.background.dst_port = 443;
  f.packets = {packet(Direction::kOutbound, 328, std::string("\x1a\x2b\x03\x45\x62\xaa", 6)),
               packet(Direction::kInbound, 1074), packet(Direction::kInbound, 180),
               packet(Direction::kOutbound, 328)};
  bool ok = true;
  std::string why;
  const auto np = payload_tokens(f, 6);
  if (np.size() != 1 || np[0] != std::vector<std::string>{"1a2b", "0345", "62aa"}) ok = false, why += " payload";
  if (length_tokens(f, 128) != std::vector<std::string>{"+328", "-1074", "-180", "+328"}) ok = false, why += " lengths";
  TokenizerConfig cfg;  // M = 6, N = 128
  if (cfg.payload_packets != 6 || cfg.length_packets != 128 || cfg.sequence_length() != 322) ok = false, why += " length";
  const auto vocab = build_vocab(std::vector<FlowRecord>{f}, cfg);
  const auto seq = encode_flow(f, vocab, cfg);
  const std::vector<std::pair<std::size_t, std::string>> expect{
      {1, "1a2b"}, {2, "0345"}, {3, "62aa"}, {194, "+328"}, {195, "-1074"}, {196, "-180"}, {197, "+328"}};
  if (seq.ids.size() != 322 || seq.ids[0] != kCls || seq.ids[193] != kSep) {
    ok = false, why += " layout";
  } else {
    for (const auto& [pos, tok] : expect)
      if (vocab.token(seq.ids[pos]) != tok) ok = false, why += " token@" + std::to_string(pos);
  }
  return {ok, "sequence length " + std::to_string(seq.ids.size()) + (why.empty() ? "" : "; mismatch:" + why)};
}

Outcome metric_oracle() {
  const std::string U = kUnknownLabel;
  const std::vector<std::string> labels{"a", "b", U};
  struct Case {
    std::vector<std::vector<int>> m;
    double ac_ow;  // worked by hand: mean of known recall and unknown recall
  };
  const std::vector<Case> cases{
      {{{4, 0, 1}, {0, 4, 1}, {2, 2, 6}}, 0.7},                 // (8/10 + 6/10) / 2
      {{{5, 0, 0}, {0, 5, 0}, {3, 3, 0}}, 0.5},                 // (1 + 0) / 2
      {{{1, 2, 3}, {4, 5, 6}, {7, 8, 9}}, 37.0 / 112.0},        // (6/21 + 9/24) / 2
      {{{0, 0, 5}, {0, 0, 5}, {0, 0, 10}}, 0.5},                // (0 + 1) / 2
      {{{10, 0, 0}, {3, 0, 7}, {1, 1, 1}}, 5.0 / 12.0},         // (10/20 + 1/3) / 2
      {{{2, 1, 0}, {0, 0, 0}, {0, 4, 4}}, 7.0 / 12.0},          // (2/3 + 4/8) / 2
  };
  double worst = 0.0;
  for (const auto& c : cases) {
    std::vector<std::string> pred, truth;
    for (std::size_t t = 0; t < c.m.size(); ++t)
      for (std::size_t p = 0; p < c.m[t].size(); ++p)
        for (int n = 0; n < c.m[t][p]; ++n) {
          truth.push_back(labels[t]);
          pred.push_back(labels[p]);
        }
    worst = std::max(worst, std::abs(open_metrics(pred, truth).ac_ow - c.ac_ow));
  }
  return {worst <= 1e-12, std::to_string(cases.size()) + " matrices, max abs error " + fmt(worst)};
}

Outcome gradient_checks() {
  const EncoderConfig cfg{.d_model = 8, .heads = 2, .head_dim = 4, .ffn_dim = 12, .layers = 1, .max_seq = 16,
                          .dropout = 0.0};
  auto params = init_encoder(cfg, 12, 21);
  Rng rng(22);
  {
    auto g = params.zeros_like();
    for (auto& ref : encoder_param_refs(params, g))
      *ref.value += random_normal(ref.value->rows(), ref.value->cols(), 0.3, rng);
  }
  const TokenSequence seq{{kCls, 5, 7, kSep, 9, 6, kPad, kPad, 8, kPad}, 2, 3};
  const Matrix weights = random_normal(10, 8, 1.0, rng);
  auto loss = [&](const EncoderParams& p) { return forward_sequence(seq, p, cfg).states.cwiseProduct(weights).sum(); };
  std::vector<std::size_t> positions(seq.ids.size());
  std::iota(positions.begin(), positions.end(), 0);
  bool mask[10];
  for (std::size_t i = 0; i < 10; ++i) mask[i] = seq.ids[i] != kPad;
  SequenceCache cache;
  encode_rows(seq.ids, positions, mask, params, cfg, {}, &cache);
  auto grads = params.zeros_like();
  encoder_backward(weights, cache, params, cfg, grads);
  const double enc = testing::max_gradient_error(params, grads, loss).error;

  RowVector anchor = random_normal(1, 8, 1.0, rng).row(0);
  std::vector<RowVector> pos{random_normal(1, 8, 1.0, rng).row(0), random_normal(1, 8, 1.0, rng).row(0)};
  std::vector<RowVector> neg{random_normal(1, 8, 1.0, rng).row(0), random_normal(1, 8, 1.0, rng).row(0),
                             random_normal(1, 8, 1.0, rng).row(0)};
  const double tau = 0.3;
  const auto g = contrastive_loss_grad(anchor, pos, neg, tau);
  double con = 0.0;
  auto probe = [&](RowVector& v, const RowVector& analytic) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double saved = v(i);
      v(i) = saved + testing::kFiniteDiffStep;
      const double up = contrastive_loss(anchor, pos, neg, tau);
      v(i) = saved - testing::kFiniteDiffStep;
      const double down = contrastive_loss(anchor, pos, neg, tau);
      v(i) = saved;
      con = std::max(con, testing::relative_error(analytic(i), (up - down) / (2 * testing::kFiniteDiffStep)));
    }
  };
  probe(anchor, g.d_anchor);
  for (std::size_t i = 0; i < pos.size(); ++i) probe(pos[i], g.d_positives[i]);
  for (std::size_t i = 0; i < neg.size(); ++i) probe(neg[i], g.d_negatives[i]);
  return {enc < 1e-4 && con < 1e-4, "encoder max rel error " + fmt(enc) + ", contrastive " + fmt(con)};
}

Outcome margin_brute_force() {
  Rng rng(4);
  LabeledEmbeddings data;
  for (std::size_t i = 0; i < 1000; ++i) {
    FlowEmbedding e = random_normal(1, 6, 1.0, rng).row(0);
    e(0) += 4.0 * static_cast<double>(i % 8);
    data.flow_ids.push_back("f" + std::to_string(i));
    data.labels.push_back("c" + std::to_string(i % 8));
    data.embeddings.push_back(e);
  }
  const auto protos = build_prototypes(data, RadiusPolicy::max());
  const auto got = select_marginal(protos, data, {});

  // Exhaustive filter: every flow against its own class sphere, recomputed
  // from scratch (same summation order as the library).
  std::map<std::string, RowVector> centroid;
  std::map<std::string, std::size_t> count;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto [it, fresh] = centroid.try_emplace(data.labels[i], RowVector::Zero(6));
    it->second += data.embeddings[i];
    ++count[data.labels[i]];
  }
  for (auto& [c, v] : centroid) v /= static_cast<double>(count[c]);
  std::map<std::string, double> radius;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double d = (data.embeddings[i] - centroid[data.labels[i]]).norm();
    radius[data.labels[i]] = std::max(radius[data.labels[i]], d);
  }
  std::set<std::tuple<std::string, double, double>> expect, actual;
  std::size_t inside = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double d = (data.embeddings[i] - centroid[data.labels[i]]).norm();
    const double r = radius[data.labels[i]];
    if (d <= r) ++inside;
    if (d <= r && r - d < 0.1 * r) expect.insert({data.flow_ids[i], d, r});
  }
  for (const auto& e : got.entries) actual.insert({e.flow_id, e.distance, e.delta});
  bool radii_match = true;
  for (const auto& p : protos) radii_match = radii_match && p.radius == radius[p.class_id];
  const bool ok = actual == expect && inside == data.size() && radii_match;
  return {ok, std::to_string(actual.size()) + " marginal vs " + std::to_string(expect.size()) +
                  " brute force; max policy covers " + std::to_string(inside) + "/1000"};
}

Outcome bsf_oracle() {
  auto flow = [](const std::string& id, const std::string& label, const std::string& ip,
                 std::optional<std::string> sni, std::optional<std::string> cert) {
    FlowRecord f;
    f.flow_id = id;
    f.label = label;
    f.background = {ip, 443, std::move(sni), std::move(cert)};
    return f;
  };
  // Four classes; s1..s4 carry a background key seen in another class.
  const std::vector<FlowRecord> flows{
      flow("u1", "a", "10.0.0.1", "a.example", "ca"),      flow("u2", "a", "10.0.0.1", "a.example", "ca"),
      flow("s1", "a", "203.0.113.1", "a2.example", "ca2"), flow("u3", "b", "10.0.0.2", "b.example", "cb"),
      flow("s2", "b", "10.0.0.22", "cdn.example", "cb2"),  flow("s4", "b", "10.0.0.23", "b3.example", "shared"),
      flow("u4", "c", "10.0.0.3", std::nullopt, std::nullopt), flow("u5", "c", "10.0.0.3", "c.example", "cc"),
      flow("s3", "c", "10.0.0.33", "cdn.example", "cc2"),  flow("u6", "d", "10.0.0.4", "d.example", "cd"),
      flow("u7", "d", "203.0.113.1", "d2.example", "shared"), flow("u8", "d", "10.0.0.44", "cdn.example", "cd3"),
  };
  MarginalFlowSet m;
  std::map<std::string, BackgroundMeta> backgrounds;
  for (const auto& f : flows) {
    if (f.label == "d") continue;  // class d only contributes to the index
    m.entries.push_back({f.flow_id, f.label, RowVector::Zero(2), 1.0, 1.0, true, ""});
    backgrounds[f.flow_id] = f.background;
  }
  m.count_before_filter = m.count_after_filter = m.entries.size();
  const auto out = background_filter(m, build_background_index(flows), backgrounds);
  std::set<std::string> removed;
  for (const auto& e : out.entries)
    if (!e.kept) removed.insert(e.flow_id);
  std::string list;
  for (const auto& r : removed) list += (list.empty() ? "" : ",") + r;
  return {removed == std::set<std::string>{"s1", "s2", "s3", "s4"}, "removed {" + list + "}"};
}

Outcome gan_toy() {
  auto mixture = [](std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, 0.5);
    std::vector<FlowEmbedding> out;
    for (std::size_t i = 0; i < n; ++i) {
      FlowEmbedding e(2);
      e << (i % 2 == 0 ? -2.0 : 2.0) + noise(rng), noise(rng);
      out.push_back(e);
    }
    return out;
  };
  GanConfig cfg;
  cfg.latent_dim = 4;
  cfg.gen_hidden = {32, 32};
  cfg.dis_hidden = {32, 32};
  cfg.steps = 2000;
  cfg.batch_size = 64;
  cfg.seed = 7;
  const auto result = train_gan(mixture(1000, 11), cfg);
  const auto real = mixture(1000, 99);
  const auto fake = synthesize(result.params, 1000, 5);
  const double acc = discriminator_accuracy(result.params, stack_rows(real, 2), stack_rows(fake, 2));
  RowVector mean = RowVector::Zero(2);
  for (const auto& e : fake) mean += e / static_cast<double>(fake.size());
  // Target mixture mean is (0, 0).
  const double dx = std::abs(mean(0)), dy = std::abs(mean(1));
  const bool ok = !result.aborted && acc >= 0.4 && acc <= 0.6 && dx <= 0.3 && dy <= 0.3;
  return {ok, "balanced accuracy " + fmt(acc) + ", mean offset (" + fmt(dx) + ", " + fmt(dy) + ")"};
}

Outcome end_to_end() {
  const auto flows = generate_corpus(end_to_end_corpus());
  const auto cfg = PipelineConfig::desk();
  int wins = 0;
  double sum = 0.0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto r = run_pipeline(flows, cfg, {}, seed);
    if (r.open.ac_ow > r.baseline_open.ac_ow) ++wins;
    sum += r.open.ac_ow;
    detail += " seed " + std::to_string(seed) + ": " + fmt(r.open.ac_ow) + " vs " + fmt(r.baseline_open.ac_ow) + ";";
  }
  const double mean = sum / 3.0;
  return {wins >= 2 && mean >= 0.75,
          "OWCP wins " + std::to_string(wins) + "/3, mean AC_ow " + fmt(mean) + " (" + detail.substr(1) + ")"};
}

Outcome ablation() {
  const auto flows = generate_corpus(end_to_end_corpus());
  const auto report = run_ablation(flows, PipelineConfig::desk(), 1);
  const double full = report.runs[0].closed.macro_f1;
  bool ok = true;
  std::string detail = "full " + fmt(full);
  for (std::size_t i = 1; i < report.runs.size(); ++i) {
    const double f1 = report.runs[i].closed.macro_f1;
    ok = ok && f1 <= full;
    detail += ", " + report.runs[i].switches.name() + " " + fmt(f1);
  }
  return {ok, "closed F1: " + detail};
}

Outcome sensitivity() {
  const auto flows = generate_corpus(end_to_end_corpus());
  const std::vector<double> fractions{0.1, 0.2, 0.3, 0.4, 0.5};
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  const auto report = run_sensitivity(flows, fractions, seeds, PipelineConfig::desk());
  std::string detail;
  for (const auto& s : report.summary) detail += " " + fmt(s.fraction) + ":" + fmt(s.f1_ow_mean);
  return {report.mean_spearman_f1_ow < 0.0,
          "mean spearman " + fmt(report.mean_spearman_f1_ow) + "; F1_ow by fraction" + detail};
}

Outcome reproducibility() {
  const fs::path root = fs::temp_directory_path() / ("owcp_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path config = root / "config.json";
  std::ofstream(config) << nlohmann::json{{"corpus", cli::to_json(end_to_end_corpus())}}.dump();
  const fs::path work = root / "work";
  std::ostringstream out, err;
  auto run = [&](const std::string& stage, bool force) {
    std::vector<std::string> args{"--config", config.string(), "--workdir", work.string(), "--seed", "1"};
    if (force) args.push_back("--force");
    args.push_back(stage);
    return cli::run(args, out, err);
  };
  auto hashes = [&] {
    std::map<std::string, std::string> h;
    for (const auto& e : fs::directory_iterator(work))
      if (e.path().filename() != "manifest.json" && e.is_regular_file())
        h[e.path().filename().string()] = sha256_file(e.path());
    return h;
  };
  bool ok = true;
  for (const auto& s : cli::stage_order()) ok = ok && run(s, false) == cli::kOk;
  ok = ok && run("evaluate", false) == cli::kOk;
  const auto first = hashes();
  for (const auto& s : cli::stage_order()) ok = ok && run(s, true) == cli::kOk;
  ok = ok && run("evaluate", false) == cli::kOk;
  const auto second = hashes();
  std::size_t differ = 0;
  for (const auto& [name, h] : first)
    if (!second.count(name) || second.at(name) != h) ++differ;
  fs::remove_all(root);
  if (!ok) return {false, "stage failed: " + err.str()};
  return {differ == 0 && first.size() == second.size(),
          std::to_string(first.size()) + " artifacts rehashed after forced reruns, " + std::to_string(differ) +
              " differ"};
}

struct Criterion {
  int id;
  std::string name;
  double limit_seconds;
  std::function<Outcome()> check;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "tokenizer bit-exactness", 1, tokenizer_examples},
      {2, "open-world metric oracle", 1, metric_oracle},
      {3, "gradient checks", 30, gradient_checks},
      {4, "margin brute force", 5, margin_brute_force},
      {5, "background filter oracle", 1, bsf_oracle},
      {6, "GAN toy equilibrium", 120, gan_toy},
      {7, "end-to-end open-set gain", 900, end_to_end},
      {8, "ablation direction", 2700, ablation},
      {9, "sensitivity trend", 3600, sensitivity},
      {10, "stage reproducibility", 300, reproducibility},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& c : criteria) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.limit_seconds;
    const bool pass = o.pass && in_time;
    if (!pass) ++failures;
    std::cout << "criterion " << c.id << " " << (pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail
              << " [" << fmt(secs) << " s of " << fmt(c.limit_seconds) << " s" << (in_time ? "" : ", over time")
              << "]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
