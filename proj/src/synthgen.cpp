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

#include "owcp/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "owcp/error.hpp"
#include "owcp/nn.hpp"
#include "owcp/tokenizer.hpp"

namespace owcp {

namespace {

constexpr std::uint32_t kAckLength = 40;
constexpr std::uint32_t kMinLength = 41;
constexpr std::uint32_t kMaxLength = 1500;

struct Profile {
  std::vector<std::uint16_t> pairs;
  std::uint32_t out_base = 0;
  std::uint32_t in_base = 0;
  double out_prob = 0.5;
};

Rng derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(tag)};
  return Rng(seq);
}

Profile make_profile(const CorpusSpec& spec, Rng& rng) {
  Profile p;
  std::set<std::uint16_t> chosen;
  std::uniform_int_distribution<int> pair(0, 0xffff);
  while (chosen.size() < spec.favored_pairs) chosen.insert(static_cast<std::uint16_t>(pair(rng)));
  p.pairs.assign(chosen.begin(), chosen.end());
  std::shuffle(p.pairs.begin(), p.pairs.end(), rng);
  const auto top = static_cast<int>(kMaxLength - spec.length_spread);
  std::uniform_int_distribution<int> base(static_cast<int>(kMinLength) + 20, top);
  p.out_base = static_cast<std::uint32_t>(base(rng));
  p.in_base = static_cast<std::uint32_t>(base(rng));
  p.out_prob = std::uniform_real_distribution<double>(0.3, 0.7)(rng);
  return p;
}

PacketView make_packet(const CorpusSpec& spec, const Profile& own, const Profile* library, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto pick_profile = [&]() -> const Profile& {
    return (library != nullptr && unit(rng) < spec.tpl_content_mix) ? *library : own;
  };

  PacketView p;
  if (unit(rng) < spec.ack_fraction) {
    p.direction = unit(rng) < 0.5 ? Direction::kOutbound : Direction::kInbound;
    p.length_bytes = kAckLength;
    return p;
  }
  const Profile& prof = pick_profile();
  p.direction = unit(rng) < prof.out_prob ? Direction::kOutbound : Direction::kInbound;
  if (unit(rng) < spec.skew) {
    const auto base = p.direction == Direction::kOutbound ? prof.out_base : prof.in_base;
    std::uniform_int_distribution<std::uint32_t> jitter(0, static_cast<std::uint32_t>(spec.length_spread) - 1);
    p.length_bytes = base + jitter(rng);
  } else {
    p.length_bytes = std::uniform_int_distribution<std::uint32_t>(kMinLength, kMaxLength)(rng);
  }

  const std::size_t want = kPayloadWindow + std::uniform_int_distribution<std::size_t>(0, 16)(rng);
  const std::size_t payload_len = std::min<std::size_t>(p.length_bytes, want);
  std::uniform_int_distribution<int> byte(0, 0xff);
  p.payload.reserve(payload_len);
  while (p.payload.size() + 2 <= payload_len) {
    const Profile& src = pick_profile();
    if (unit(rng) < spec.skew) {
      const auto pair = src.pairs[std::uniform_int_distribution<std::size_t>(0, src.pairs.size() - 1)(rng)];
      p.payload.push_back(static_cast<char>(pair >> 8));
      p.payload.push_back(static_cast<char>(pair & 0xff));
    } else {
      p.payload.push_back(static_cast<char>(byte(rng)));
      p.payload.push_back(static_cast<char>(byte(rng)));
    }
  }
  if (p.payload.size() < payload_len) p.payload.push_back(static_cast<char>(byte(rng)));
  return p;
}

}  // namespace

void CorpusSpec::validate() const {
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (flows_per_class < 1) throw ConfigError("flows_per_class must be >= 1");
  if (skew < 0.0 || skew > 1.0) throw ConfigError("skew must be in [0, 1]");
  if (favored_pairs < 1) throw ConfigError("favored_pairs must be >= 1");
  if (length_spread < 1 || length_spread > 200) throw ConfigError("length_spread must be in [1, 200]");
  if (min_packets < 1 || max_packets < min_packets) throw ConfigError("need 1 <= min_packets <= max_packets");
  if (ack_fraction < 0.0 || ack_fraction >= 1.0) throw ConfigError("ack_fraction must be in [0, 1)");
  if (tpl_share_fraction < 0.0 || tpl_share_fraction >= 1.0) throw ConfigError("tpl_share_fraction must be in [0, 1)");
  if (tpl_share_fraction > 0.0 && shared_pool_size < 1) throw ConfigError("shared pool must be non-empty");
  if (tpl_content_mix < 0.0 || tpl_content_mix > 1.0) throw ConfigError("tpl_content_mix must be in [0, 1]");
  if (unique_backgrounds_per_class < 1) throw ConfigError("unique_backgrounds_per_class must be >= 1");
}

std::vector<std::string> corpus_labels(const CorpusSpec& spec) {
  const std::size_t width = std::max<std::size_t>(2, std::to_string(spec.num_classes - 1).size());
  std::vector<std::string> labels;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    auto digits = std::to_string(c);
    labels.push_back(spec.label_prefix + std::string(width - digits.size(), '0') + digits);
  }
  return labels;
}

std::vector<FlowRecord> generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const auto labels = corpus_labels(spec);
  std::vector<Profile> classes;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    auto rng = derived_rng(spec.seed, c, 0, 1);
    classes.push_back(make_profile(spec, rng));
  }
  std::vector<Profile> libraries;
  for (std::size_t k = 0; k < spec.shared_pool_size; ++k) {
    auto rng = derived_rng(spec.seed, k, 0, 2);
    libraries.push_back(make_profile(spec, rng));
  }

  std::vector<FlowRecord> flows;
  flows.reserve(spec.num_classes * spec.flows_per_class);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t j = 0; j < spec.flows_per_class; ++j) {
      auto rng = derived_rng(spec.seed, c, j, 3);
      FlowRecord f;
      auto idx = std::to_string(j);
      f.flow_id = labels[c] + "-" + std::string(idx.size() < 5 ? 5 - idx.size() : 0, '0') + idx;
      f.label = labels[c];

      const Profile* library = nullptr;
      if (unit(rng) < spec.tpl_share_fraction) {
        const auto k = std::uniform_int_distribution<std::size_t>(0, spec.shared_pool_size - 1)(rng);
        library = &libraries[k];
        f.background.dst_ip = "203.0.113." + std::to_string(k + 1);
        f.background.dst_port = 443;
        f.background.sni = "lib" + std::to_string(k) + ".cdn.example";
        f.background.cert_digest = "shared-cert-" + std::to_string(k);
      } else {
        const auto u = std::uniform_int_distribution<std::size_t>(0, spec.unique_backgrounds_per_class - 1)(rng);
        f.background.dst_ip =
            "10." + std::to_string(c / 256) + "." + std::to_string(c % 256) + "." + std::to_string(u + 1);
        f.background.dst_port = 443;
        f.background.sni = labels[c] + "-" + std::to_string(u) + ".example";
        f.background.cert_digest = "cert-" + labels[c] + "-" + std::to_string(u);
      }

      const auto n = std::uniform_int_distribution<std::size_t>(spec.min_packets, spec.max_packets)(rng);
      for (std::size_t i = 0; i < n; ++i) f.packets.push_back(make_packet(spec, classes[c], library, rng));
      flows.push_back(std::move(f));
    }
  }
  return flows;
}

std::map<std::string, std::map<std::string, double>> class_token_histograms(std::span<const FlowRecord> flows,
                                                                             std::size_t payload_packets,
                                                                             std::size_t length_packets) {
  std::map<std::string, std::map<std::string, double>> hist;
  std::map<std::string, double> totals;
  for (const auto& f : flows) {
    auto& h = hist[f.label];
    for (const auto& packet : payload_tokens(f, payload_packets)) {
      for (const auto& t : packet) {
        h[t] += 1.0;
        totals[f.label] += 1.0;
      }
    }
    for (const auto& t : length_tokens(f, length_packets)) {
      h[t] += 1.0;
      totals[f.label] += 1.0;
    }
  }
  for (auto& [label, h] : hist) {
    for (auto& [t, v] : h) v /= totals[label];
  }
  return hist;
}

double total_variation(const std::map<std::string, double>& p, const std::map<std::string, double>& q) {
  double sum = 0.0;
  for (const auto& [t, v] : p) {
    auto it = q.find(t);
    sum += std::abs(v - (it == q.end() ? 0.0 : it->second));
  }
  for (const auto& [t, v] : q)
    if (p.find(t) == p.end()) sum += v;
  return 0.5 * sum;
}

}  // namespace owcp
