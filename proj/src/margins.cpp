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

#include "owcp/margins.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <json.hpp>

#include "owcp/error.hpp"

namespace owcp {

std::vector<ClassPrototype> compute_centroids(const std::map<std::string, std::vector<FlowEmbedding>>& by_class) {
  std::vector<ClassPrototype> out;
  for (const auto& [label, members] : by_class) {
    if (members.empty()) throw ConfigError("class '" + label + "' has no embeddings");
    ClassPrototype p;
    p.class_id = label;
    p.centroid = RowVector::Zero(members[0].size());
    for (const auto& e : members) {
      if (e.size() != p.centroid.size()) throw ConfigError("embedding dimension mismatch in class '" + label + "'");
      p.centroid += e;
    }
    p.centroid /= static_cast<double>(members.size());
    p.member_count = members.size();
    out.push_back(std::move(p));
  }
  return out;
}

double compute_radius(std::span<const FlowEmbedding> members, const FlowEmbedding& centroid,
                      const RadiusPolicy& policy) {
  if (members.empty()) throw ConfigError("radius of an empty class");
  if (policy.kind == RadiusPolicy::Kind::kQuantile && !(policy.q > 0.0 && policy.q <= 1.0)) {
    throw ConfigError("radius quantile must be in (0, 1]");
  }
  std::vector<double> d;
  d.reserve(members.size());
  for (const auto& e : members) d.push_back((e - centroid).norm());
  std::sort(d.begin(), d.end());
  if (policy.kind == RadiusPolicy::Kind::kMax) return d.back();
  const double pos = static_cast<double>(d.size() - 1) * policy.q;
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, d.size() - 1);
  const double interpolated = d[lo] + (pos - static_cast<double>(lo)) * (d[hi] - d[lo]);
  // Never cover fewer than ceil(q n) members.
  const auto covered = static_cast<std::size_t>(std::ceil(policy.q * static_cast<double>(d.size())));
  return std::max(interpolated, d[std::clamp<std::size_t>(covered, 1, d.size()) - 1]);
}

std::vector<ClassPrototype> build_prototypes(const LabeledEmbeddings& data, const RadiusPolicy& policy) {
  std::map<std::string, std::vector<FlowEmbedding>> by_class;
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(data.embeddings[i]);
  auto protos = compute_centroids(by_class);
  for (auto& p : protos) p.radius = compute_radius(by_class[p.class_id], p.centroid, policy);
  return protos;
}

std::vector<FlowEmbedding> MarginalFlowSet::kept_embeddings() const {
  std::vector<FlowEmbedding> out;
  for (const auto& e : entries)
    if (e.kept) out.push_back(e.embedding);
  return out;
}

void MarginalFlowSet::write(std::ostream& out) const {
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["flow_id"] = e.flow_id;
    j["class"] = e.class_id;
    j["distance"] = e.distance;
    j["delta"] = e.delta;
    j["kept"] = e.kept;
    j["removal_reason"] = e.removal_reason.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(e.removal_reason);
    out << j.dump() << '\n';
  }
}

MarginalFlowSet select_marginal(std::span<const ClassPrototype> prototypes, const LabeledEmbeddings& data,
                                const EpsilonPolicy& epsilon) {
  if (!(epsilon.value > 0.0)) throw ConfigError("epsilon must be > 0");
  std::map<std::string, const ClassPrototype*> by_id;
  for (const auto& p : prototypes) by_id[p.class_id] = &p;

  MarginalFlowSet out;
  out.total_flows = data.size();
  for (const auto& p : prototypes) out.epsilon[p.class_id] = epsilon.resolve(p.radius);
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto it = by_id.find(data.labels[i]);
    if (it == by_id.end()) throw ConfigError("no prototype for class '" + data.labels[i] + "'");
    const ClassPrototype& p = *it->second;
    const double dist = (data.embeddings[i] - p.centroid).norm();
    if (dist > p.radius || !(p.radius - dist < out.epsilon[p.class_id])) continue;
    out.entries.push_back({data.flow_ids[i], p.class_id, data.embeddings[i], dist, p.radius, true, ""});
  }
  out.count_before_filter = out.entries.size();
  out.count_after_filter = out.entries.size();
  if (static_cast<double>(out.entries.size()) > 0.3 * static_cast<double>(data.size())) {
    out.warnings.push_back("marginal set holds " + std::to_string(out.entries.size()) + " of " +
                           std::to_string(data.size()) + " flows (more than 30%)");
  }
  return out;
}

BackgroundIndex build_background_index(std::span<const FlowRecord> flows) {
  BackgroundIndex index;
  for (const auto& f : flows) {
    if (f.label.empty()) continue;
    index.dst[f.background.dst_tuple()].insert(f.label);
    if (f.background.sni) index.sni[*f.background.sni].insert(f.label);
    if (f.background.cert_digest) index.cert[*f.background.cert_digest].insert(f.label);
  }
  return index;
}

std::optional<std::string> shared_background_reason(const BackgroundMeta& background, const BackgroundIndex& index) {
  auto shared = [](const std::map<std::string, std::set<std::string>>& m, const std::string& key) {
    auto it = m.find(key);
    return it != m.end() && it->second.size() >= 2;
  };
  if (shared(index.dst, background.dst_tuple())) return "dst";
  if (background.sni && shared(index.sni, *background.sni)) return "sni";
  if (background.cert_digest && shared(index.cert, *background.cert_digest)) return "cert";
  return std::nullopt;
}

MarginalFlowSet background_filter(const MarginalFlowSet& marginal, const BackgroundIndex& index,
                                  const std::map<std::string, BackgroundMeta>& backgrounds) {
  MarginalFlowSet out = marginal;
  out.count_after_filter = 0;
  for (auto& e : out.entries) {
    if (!e.kept) continue;
    auto it = backgrounds.find(e.flow_id);
    if (it == backgrounds.end()) throw ConfigError("no background metadata for flow '" + e.flow_id + "'");
    if (auto reason = shared_background_reason(it->second, index)) {
      e.kept = false;
      e.removal_reason = *reason;
    } else {
      ++out.count_after_filter;
    }
  }
  return out;
}

}  // namespace owcp
