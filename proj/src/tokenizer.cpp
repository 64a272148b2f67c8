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

#include "owcp/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "owcp/error.hpp"
#include "owcp/hashing.hpp"

namespace owcp {

namespace {

const char* const kSpecialNames[kNumSpecials] = {"[CLS]", "[SEP]", "[PAD]", "[UNK]"};

}  // namespace

void TokenizerConfig::validate() const {
  if (max_vocab < kNumSpecials + 1) throw ConfigError("max_vocab must be >= 5");
  if (payload_packets == 0 && length_packets == 0) {
    throw ConfigError("tokenizer needs at least one payload or length packet");
  }
}

Vocabulary::Vocabulary() {
  for (const char* name : kSpecialNames) {
    ids_.emplace(name, static_cast<TokenId>(tokens_.size()));
    tokens_.emplace_back(name);
  }
}

TokenId Vocabulary::lookup(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

TokenId Vocabulary::add(const std::string& token) {
  const auto id = static_cast<TokenId>(tokens_.size());
  if (!ids_.emplace(token, id).second) throw ConfigError("duplicate vocabulary token " + token);
  tokens_.push_back(token);
  return id;
}

void Vocabulary::write(std::ostream& out) const {
  for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write vocabulary " + path.string());
  write(out);
}

Vocabulary Vocabulary::read(std::istream& in) {
  Vocabulary vocab;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("expected token<TAB>id", line_no);
    const auto token = line.substr(0, tab);
    std::size_t id = 0;
    try {
      id = std::stoul(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw ParseError("bad id", line_no);
    }
    if (id < static_cast<std::size_t>(kNumSpecials)) {
      if (token != kSpecialNames[id]) throw ParseError("special token mismatch", line_no);
      continue;
    }
    if (id != vocab.size()) throw ParseError("ids must be dense and ascending", line_no);
    vocab.add(token);
  }
  return vocab;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open vocabulary " + path.string());
  return read(in);
}

std::string Vocabulary::hash() const {
  std::ostringstream out;
  write(out);
  return sha256_hex(out.str());
}

std::vector<std::vector<std::string>> payload_tokens(const FlowRecord& flow, std::size_t payload_packets) {
  std::vector<std::vector<std::string>> out;
  for (const auto& p : flow.packets) {
    if (out.size() == payload_packets) break;
    if (p.payload.empty()) continue;
    const std::size_t window = std::min(p.payload.size(), kPayloadWindow);
    std::vector<std::string> tokens;
    tokens.reserve(window / kTokenBytes);
    for (std::size_t i = 0; i + kTokenBytes <= window; i += kTokenBytes) {
      tokens.push_back(to_hex(std::string_view(p.payload).substr(i, kTokenBytes)));
    }
    out.push_back(std::move(tokens));
  }
  return out;
}

std::vector<std::string> length_tokens(const FlowRecord& flow, std::size_t length_packets) {
  std::vector<std::string> out;
  const std::size_t n = std::min(flow.packets.size(), length_packets);
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = flow.packets[i];
    out.push_back((p.direction == Direction::kOutbound ? "+" : "-") + std::to_string(p.length_bytes));
  }
  return out;
}

Vocabulary build_vocab(std::span<const FlowRecord> flows, const TokenizerConfig& config) {
  config.validate();
  std::map<std::string, std::size_t> counts;
  for (const auto& flow : flows) {
    for (const auto& packet : payload_tokens(flow, config.payload_packets)) {
      for (const auto& t : packet) ++counts[t];
    }
    for (const auto& t : length_tokens(flow, config.length_packets)) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // counts is already in lexicographic order, so a stable sort by count keeps
  // ties lexicographic.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t keep = std::min(ranked.size(), config.max_vocab - kNumSpecials);
  Vocabulary vocab;
  for (std::size_t i = 0; i < keep; ++i) vocab.add(ranked[i].first);
  return vocab;
}

TokenSequence encode_flow(const FlowRecord& flow, const Vocabulary& vocab, const TokenizerConfig& config,
                          const EncodeOptions& options) {
  TokenSequence seq;
  seq.ids.assign(config.sequence_length(), kPad);
  seq.ids[0] = kCls;
  const std::size_t sep_pos = 1 + config.payload_packets * kTokensPerPacket;
  seq.ids[sep_pos] = kSep;

  if (!options.drop_payload) {
    const auto packets = payload_tokens(flow, config.payload_packets);
    for (std::size_t p = 0; p < packets.size(); ++p) {
      for (std::size_t t = 0; t < packets[p].size(); ++t) {
        seq.ids[1 + p * kTokensPerPacket + t] = vocab.lookup(packets[p][t]);
        ++seq.np_len_used;
      }
    }
  }
  if (!options.drop_lengths) {
    const auto lengths = length_tokens(flow, config.length_packets);
    for (std::size_t i = 0; i < lengths.size(); ++i) {
      seq.ids[sep_pos + 1 + i] = vocab.lookup(lengths[i]);
      ++seq.pl_len_used;
    }
  }
  return seq;
}

std::vector<TokenSequence> encode_flows(std::span<const FlowRecord> flows, const Vocabulary& vocab,
                                        const TokenizerConfig& config, const EncodeOptions& options) {
  std::vector<TokenSequence> out;
  out.reserve(flows.size());
  for (const auto& f : flows) out.push_back(encode_flow(f, vocab, config, options));
  return out;
}

}  // namespace owcp
