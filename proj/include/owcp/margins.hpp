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

#ifndef OWCP_MARGINS_HPP
#define OWCP_MARGINS_HPP

#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "owcp/encoder.hpp"
#include "owcp/flow_store.hpp"

namespace owcp {

struct ClassPrototype {
  std::string class_id;
  FlowEmbedding centroid;
  double radius = 0.0;
  std::size_t member_count = 0;

  bool operator==(const ClassPrototype&) const = default;
};

// Radius policy. kQuantile uses linear interpolation between order
// statistics at position (n - 1) * q over the sorted distances, raised when
// needed to the ceil(q n)-th smallest distance so that at least that many
// members lie inside.
struct RadiusPolicy {
  enum class Kind { kMax, kQuantile };
  Kind kind = Kind::kQuantile;
  double q = 0.95;

  static RadiusPolicy max() { return {Kind::kMax, 1.0}; }
  static RadiusPolicy quantile(double q) { return {Kind::kQuantile, q}; }
};

// Embeddings paired with flow ids and class labels, index-aligned.
struct LabeledEmbeddings {
  std::vector<std::string> flow_ids;
  std::vector<std::string> labels;
  std::vector<FlowEmbedding> embeddings;

  std::size_t size() const { return embeddings.size(); }
};

// Classes come back in sorted label order. Throws ConfigError on an empty class.
std::vector<ClassPrototype> compute_centroids(const std::map<std::string, std::vector<FlowEmbedding>>& by_class);

// Throws ConfigError on an empty set or q outside (0, 1].
double compute_radius(std::span<const FlowEmbedding> members, const FlowEmbedding& centroid,
                      const RadiusPolicy& policy = {});

// Centroids plus radii for every class in `data`.
std::vector<ClassPrototype> build_prototypes(const LabeledEmbeddings& data, const RadiusPolicy& policy = {});

struct MarginalEntry {
  std::string flow_id;
  std::string class_id;
  FlowEmbedding embedding;
  double distance = 0.0;
  double delta = 0.0;
  bool kept = true;
  std::string removal_reason;  // "dst", "sni" or "cert" when removed

  bool operator==(const MarginalEntry&) const = default;
};

struct MarginalFlowSet {
  std::vector<MarginalEntry> entries;
  // Absolute epsilon per class, as applied.
  std::map<std::string, double> epsilon;
  std::size_t total_flows = 0;
  std::size_t count_before_filter = 0;
  std::size_t count_after_filter = 0;
  std::vector<std::string> warnings;

  std::vector<FlowEmbedding> kept_embeddings() const;
  // One JSON object per entry: flow_id, class, distance, delta, kept, removal_reason.
  void write(std::ostream& out) const;
};

// Epsilon either absolute or relative to each class radius.
struct EpsilonPolicy {
  double value = 0.1;
  bool relative = true;

  double resolve(double delta) const { return relative ? value * delta : value; }
};

// Entry included iff distance <= delta and delta - distance < epsilon, using
// the flow's own class. Flows outside the sphere are never marginal. Warns
// when more than 30% of flows are selected. Throws ConfigError when the
// epsilon value is not positive or a label has no prototype.
MarginalFlowSet select_marginal(std::span<const ClassPrototype> prototypes, const LabeledEmbeddings& data,
                                const EpsilonPolicy& epsilon = {});

struct BackgroundIndex {
  std::map<std::string, std::set<std::string>> dst;
  std::map<std::string, std::set<std::string>> sni;
  std::map<std::string, std::set<std::string>> cert;
};

// Built from every labeled training flow; unlabeled flows are ignored.
BackgroundIndex build_background_index(std::span<const FlowRecord> flows);

// Reason a flow's background is shared across classes, checked in the
// order dst, sni, cert. nullopt when all keys are single-class.
std::optional<std::string> shared_background_reason(const BackgroundMeta& background, const BackgroundIndex& index);

// Marks entries whose background is shared as removed. `backgrounds` maps
// flow_id to its metadata; throws ConfigError on an unknown flow_id.
MarginalFlowSet background_filter(const MarginalFlowSet& marginal, const BackgroundIndex& index,
                                  const std::map<std::string, BackgroundMeta>& backgrounds);

}  // namespace owcp

#endif  // OWCP_MARGINS_HPP
