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

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "owcp/error.hpp"
#include "owcp/evalharness.hpp"
#include "owcp/synthgen.hpp"

using namespace owcp;

namespace {

const std::string U = kUnknownLabel;

// Expands a confusion matrix (rows truth, columns predicted) into label lists.
void expand(const std::vector<std::string>& labels, const std::vector<std::vector<int>>& m,
            std::vector<std::string>& pred, std::vector<std::string>& truth) {
  for (std::size_t t = 0; t < m.size(); ++t)
    for (std::size_t p = 0; p < m[t].size(); ++p)
      for (int n = 0; n < m[t][p]; ++n) {
        truth.push_back(labels[t]);
        pred.push_back(labels[p]);
      }
}

// AC_ow straight from a confusion matrix whose last row/column is UNKNOWN.
double ac_ow_oracle(const std::vector<std::vector<int>>& m) {
  const std::size_t u = m.size() - 1;
  double tp_k = 0, all_k = 0, tp_u = m[u][u], all_u = 0;
  for (std::size_t t = 0; t < u; ++t) {
    tp_k += m[t][t];
    for (int v : m[t]) all_k += v;
  }
  for (int v : m[u]) all_u += v;
  return ((all_k > 0 ? tp_k / all_k : 0.0) + (all_u > 0 ? tp_u / all_u : 0.0)) / 2.0;
}

double macro_f1_oracle(const std::vector<std::vector<int>>& m) {
  double sum = 0;
  int n = 0;
  for (std::size_t c = 0; c < m.size(); ++c) {
    double tp = m[c][c], fn = 0, fp = 0;
    for (std::size_t j = 0; j < m.size(); ++j) {
      if (j == c) continue;
      fn += m[c][j];
      fp += m[j][c];
    }
    if (tp + fn + fp == 0) continue;
    const double prec = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double rec = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    sum += prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    ++n;
  }
  return sum / n;
}

std::vector<FlowRecord> corpus(std::size_t classes, std::size_t per_class) {
  std::vector<FlowRecord> out;
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      FlowRecord f;
      f.flow_id = "c" + std::to_string(c) + "-" + std::to_string(i);
      f.label = "c" + std::to_string(c);
      out.push_back(f);
    }
  return out;
}

}  // namespace

TEST_CASE("closed metrics") {
  std::vector<std::string> pred, truth;
  expand({"a", "b"}, {{3, 1}, {2, 4}}, pred, truth);
  auto r = closed_metrics(pred, truth);
  CHECK(r.ac == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(r.per_class["a"].f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(r.per_class["b"].f1 == doctest::Approx(8.0 / 11.0).epsilon(1e-12));
  CHECK(r.macro_f1 == doctest::Approx((2.0 / 3.0 + 8.0 / 11.0) / 2).epsilon(1e-12));
  CHECK(r.macro_f1 == doctest::Approx(0.6970).epsilon(1e-4));
  CHECK(r.per_class["a"].tp == 3);
  CHECK(r.per_class["a"].fp == 2);
  CHECK(r.per_class["a"].fn == 1);
  CHECK(r.confusion["b"]["a"] == 2);
  CHECK(r.scored == 10);

  auto perfect = closed_metrics(truth, truth);
  CHECK(perfect.ac == 1.0);
  CHECK(perfect.macro_f1 == 1.0);

  std::vector<std::string> wrong(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) wrong[i] = truth[i] == "a" ? "b" : "a";
  CHECK(closed_metrics(wrong, truth).ac == 0.0);

  // UNKNOWN predictions are misses, not a class.
  std::vector<std::string> rejected{"a", U, "b"}, t3{"a", "a", "b"};
  auto rr = closed_metrics(rejected, t3);
  CHECK(rr.per_class.count(U) == 0);
  CHECK(rr.per_class["a"].fn == 1);

  CHECK_THROWS_AS(closed_metrics({}, {}), ConfigError);
  std::vector<std::string> short_pred{"a"};
  CHECK_THROWS_AS(closed_metrics(short_pred, t3), ConfigError);
  std::vector<std::string> unk_truth{U};
  CHECK_THROWS_AS(closed_metrics(unk_truth, unk_truth), ConfigError);
}

TEST_CASE("open metrics match hand-computed values on handcrafted confusion matrices") {
  const std::vector<std::string> labels3{"a", "b", U};
  const std::vector<std::vector<std::vector<int>>> cases{
      {{4, 0, 1}, {0, 4, 1}, {2, 2, 6}},  // 8/10 known correct, 6/10 unknown
      {{5, 0, 0}, {0, 5, 0}, {3, 3, 0}},  // recalls 1 and 0
      {{1, 2, 3}, {4, 5, 6}, {7, 8, 9}},
      {{0, 0, 5}, {0, 0, 5}, {0, 0, 10}},
      {{10, 0, 0}, {3, 0, 7}, {1, 1, 1}},
      {{2, 1, 0}, {0, 0, 0}, {0, 4, 4}},
  };
  for (const auto& m : cases) {
    std::vector<std::string> pred, truth;
    expand(labels3, m, pred, truth);
    auto r = open_metrics(pred, truth);
    CHECK(r.ac_ow == doctest::Approx(ac_ow_oracle(m)).epsilon(1e-12));
    CHECK(std::abs(r.ac_ow - ac_ow_oracle(m)) < 1e-12);
    CHECK(r.f1_ow == doctest::Approx(macro_f1_oracle(m)).epsilon(1e-12));
    CHECK(r.ac_ow >= 0.0);
    CHECK(r.ac_ow <= 1.0);
  }
  {
    std::vector<std::string> pred, truth;
    expand(labels3, cases[0], pred, truth);
    CHECK(std::abs(open_metrics(pred, truth).ac_ow - 0.7) < 1e-12);
    pred.clear();
    truth.clear();
    expand(labels3, cases[1], pred, truth);
    CHECK(open_metrics(pred, truth).ac_ow == 0.5);
  }

  // Known-label mistakes are not known hits even though both are "known".
  std::vector<std::string> p{"b", U}, t{"a", U};
  CHECK(open_metrics(p, t).known_recall == 0.0);

  // Degenerate: all truths unknown, all predicted unknown.
  std::vector<std::string> all_u{U, U, U};
  auto g = open_metrics(all_u, all_u);
  CHECK(g.ac_ow == 0.5);
  CHECK(std::find(g.guarded.begin(), g.guarded.end(), "known_recall") != g.guarded.end());

  std::vector<std::string> known_only{"a", "b"};
  CHECK_THROWS_AS(open_metrics(known_only, known_only), ConfigError);
}

TEST_CASE("macro F1 is invariant under class relabeling") {
  Rng rng(5);
  std::uniform_int_distribution<int> pick(0, 3);
  const std::vector<std::string> names{"a", "b", "c", U};
  const std::vector<std::string> renamed{"z", "y", "x", U};
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::string> p, t, p2, t2;
    for (int i = 0; i < 40; ++i) {
      const int a = pick(rng), b = pick(rng);
      t.push_back(names[a]);
      p.push_back(names[b]);
      t2.push_back(renamed[a]);
      p2.push_back(renamed[b]);
    }
    t[0] = U;
    t2[0] = U;
    auto r1 = open_metrics(p, t), r2 = open_metrics(p2, t2);
    CHECK(r1.f1_ow == doctest::Approx(r2.f1_ow).epsilon(1e-12));
    CHECK(r1.ac_ow == doctest::Approx(r2.ac_ow).epsilon(1e-12));
  }
}

TEST_CASE("make_split") {
  for (auto [c, known] : {std::pair{20, 16}, std::pair{215, 172}, std::pair{10, 8}}) {
    auto flows = corpus(static_cast<std::size_t>(c), 3);
    auto s = make_split(flows, 0.8, 1);
    CHECK(s.known_classes.size() == static_cast<std::size_t>(known));
    CHECK(s.unknown_classes.size() == static_cast<std::size_t>(c - known));
  }
  auto flows = corpus(10, 37);
  auto s = make_split(flows, 0.8, 42);
  CHECK(s == make_split(flows, 0.8, 42));
  CHECK_FALSE(s == make_split(flows, 0.8, 43));

  // Disjoint classes, and every flow in exactly one partition.
  std::set<std::string> known(s.known_classes.begin(), s.known_classes.end());
  for (const auto& u : s.unknown_classes) CHECK(known.count(u) == 0);
  std::multiset<std::string> seen;
  for (const auto* part : {&s.train, &s.val, &s.cw_test}) seen.insert(part->begin(), part->end());
  for (const auto& id : s.ow_test)
    if (std::find(s.cw_test.begin(), s.cw_test.end(), id) == s.cw_test.end()) seen.insert(id);
  CHECK(seen.size() == flows.size());
  for (const auto& f : flows) CHECK(seen.count(f.flow_id) == 1);
  // 37 per class: 3 val, 3 test, 31 train.
  CHECK(s.val.size() == 8 * 3);
  CHECK(s.cw_test.size() == 8 * 3);
  CHECK(s.train.size() == 8 * 31);
  CHECK(s.ow_test.size() == s.cw_test.size() + 2 * 37);
  CHECK(std::equal(s.cw_test.begin(), s.cw_test.end(), s.ow_test.begin()));

  auto tiny = corpus(4, 2);
  auto t = make_split(tiny, 0.5, 1);
  CHECK(t.train.size() == 4);
  CHECK(t.val.empty());
  CHECK(t.warnings.size() == 2);

  CHECK(make_split(corpus(2, 5), 0.99, 1).known_classes.size() == 1);
  CHECK(make_split(corpus(2, 5), 0.01, 1).known_classes.size() == 1);
  CHECK_THROWS_AS(make_split(corpus(1, 5), 0.5, 1), ConfigError);
  CHECK_THROWS_AS(make_split(flows, 1.0, 1), ConfigError);
  CHECK_THROWS_AS(make_split(flows, 0.0, 1), ConfigError);

  auto back = split_from_json(nlohmann::json::parse(to_json(s).dump()));
  CHECK(back == s);
}

TEST_CASE("spearman") {
  std::vector<double> x{1, 2, 3, 4, 5};
  std::vector<double> up{2, 4, 5, 9, 10}, down{5, 3, 2, 1, 0};
  CHECK(spearman(x, up) == doctest::Approx(1.0));
  CHECK(spearman(x, down) == doctest::Approx(-1.0));
  // Ties: ranks y = {1.5, 1.5, 3, 4, 5}; closed form via Pearson on ranks.
  std::vector<double> tied{1, 1, 2, 3, 4};
  const double rx[] = {1, 2, 3, 4, 5}, ry[] = {1.5, 1.5, 3, 4, 5};
  double mx = 3, my = 3, sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 5; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  CHECK(spearman(x, tied) == doctest::Approx(sxy / std::sqrt(sxx * syy)).epsilon(1e-12));
  std::vector<double> flat{1, 1, 1, 1, 1};
  CHECK(spearman(x, flat) == 0.0);
  std::vector<double> one{1};
  CHECK_THROWS_AS(spearman(one, one), ConfigError);
}

TEST_CASE("pipeline config JSON") {
  auto desk = PipelineConfig::desk();
  auto j = nlohmann::json::parse(to_json(desk).dump());
  auto back = pipeline_config_from_json(j, PipelineConfig::paper());
  CHECK(to_json(back) == to_json(desk));
  CHECK(desk.encoder.max_seq == desk.tokenizer.sequence_length());

  auto partial = pipeline_config_from_json(nlohmann::json::parse(R"({"pretrain": {"steps": 7}})"), desk);
  CHECK(partial.pretrain.steps == 7);
  CHECK(partial.tokenizer.payload_packets == desk.tokenizer.payload_packets);
  auto tok = pipeline_config_from_json(nlohmann::json::parse(R"({"tokenizer": {"payload_packets": 3}})"), desk);
  CHECK(tok.encoder.max_seq == 3 * 32 + 32 + 2);

  CHECK_THROWS_AS(pipeline_config_from_json(nlohmann::json::parse(R"({"bogus": 1})"), desk), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(nlohmann::json::parse(R"({"gan": {"stepz": 1}})"), desk), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(nlohmann::json::parse(R"({"gan": {"steps": "many"}})"), desk), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(nlohmann::json::parse(R"({"classifier": {"sigma_grid": [0.5, 1.5]}})"), desk),
                  ConfigError);
  CHECK_THROWS_AS(
      pipeline_config_from_json(nlohmann::json::parse(R"({"encoder": {"max_seq": 10}})"), desk), ConfigError);
}
