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

#ifndef OWCP_SYNTHGEN_HPP
#define OWCP_SYNTHGEN_HPP

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "owcp/flow_store.hpp"

namespace owcp {

// Synthetic labeled corpus with per-class payload/length profiles and a pool
// of backgrounds shared across classes (third-party library traffic).
struct CorpusSpec {
  std::size_t num_classes = 10;
  std::size_t flows_per_class = 200;
  // 0 = every payload pair and length is uniform noise, 1 = every draw comes
  // from the class profile.
  double skew = 0.5;
  std::size_t favored_pairs = 12;  // per class
  std::size_t length_spread = 24;  // width of a class's length band, bytes
  std::size_t min_packets = 8;
  std::size_t max_packets = 40;
  // Probability that a packet is a bare ACK (no payload, 40 bytes).
  double ack_fraction = 0.1;

  double tpl_share_fraction = 0.0;  // in [0, 1)
  std::size_t shared_pool_size = 4;
  // Share of a TPL flow's content drawn from the shared library profile
  // rather than from its own app.
  double tpl_content_mix = 0.7;
  std::size_t unique_backgrounds_per_class = 3;

  std::string label_prefix = "app";
  std::uint64_t seed = 1;

  void validate() const;
};

// Class labels in generation order: label_prefix + two-digit index.
std::vector<std::string> corpus_labels(const CorpusSpec& spec);

std::vector<FlowRecord> generate_corpus(const CorpusSpec& spec);

// Normalized histogram of payload and length tokens per class, over the
// first `payload_packets` payload packets and `length_packets` lengths.
std::map<std::string, std::map<std::string, double>> class_token_histograms(std::span<const FlowRecord> flows,
                                                                             std::size_t payload_packets,
                                                                             std::size_t length_packets);

double total_variation(const std::map<std::string, double>& p, const std::map<std::string, double>& q);

}  // namespace owcp

#endif  // OWCP_SYNTHGEN_HPP
