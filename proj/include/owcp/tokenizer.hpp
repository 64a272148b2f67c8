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

#ifndef OWCP_TOKENIZER_HPP
#define OWCP_TOKENIZER_HPP

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "owcp/flow_store.hpp"

namespace owcp {

using TokenId = int;

inline constexpr TokenId kCls = 0;
inline constexpr TokenId kSep = 1;
inline constexpr TokenId kPad = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kNumSpecials = 4;

// Payload bytes read per packet for the payload region, and bytes per token.
inline constexpr std::size_t kPayloadWindow = 64;
inline constexpr std::size_t kTokenBytes = 2;
inline constexpr std::size_t kTokensPerPacket = kPayloadWindow / kTokenBytes;

struct TokenizerConfig {
  std::size_t payload_packets = 6;  // M
  std::size_t length_packets = 128;  // N
  std::size_t max_vocab = 30000;

  // Total encoded length: CLS + M*32 payload tokens + SEP + N length tokens.
  std::size_t sequence_length() const {
    return payload_packets * kTokensPerPacket + length_packets + 2;
  }
  void validate() const;
};

// Region switches used by ablations: a dropped region is filled with PAD.
struct EncodeOptions {
  bool drop_payload = false;
  bool drop_lengths = false;
};

// Frequency-ordered coding dictionary. Ids 0-3 are the specials; the rest are
// assigned by descending corpus count with lexicographic tie-breaking.
class Vocabulary {
 public:
  Vocabulary();

  std::size_t size() const { return tokens_.size(); }
  TokenId lookup(const std::string& token) const;
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  // Appends a non-special token. Throws ConfigError on duplicates.
  TokenId add(const std::string& token);

  // "token<TAB>id" per line, specials first.
  void write(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;
  static Vocabulary read(std::istream& in);
  static Vocabulary load(const std::filesystem::path& path);

  // SHA-256 of the serialized form.
  std::string hash() const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  std::size_t np_len_used = 0;
  std::size_t pl_len_used = 0;

  bool operator==(const TokenSequence&) const = default;
};

// Two-byte payload tokens ("1a2b") over the first M payload-bearing packets,
// first 64 bytes each. An odd trailing byte is dropped.
std::vector<std::vector<std::string>> payload_tokens(const FlowRecord& flow, std::size_t payload_packets);
// Signed length tokens ("+328", "-1074") over the first N packets.
std::vector<std::string> length_tokens(const FlowRecord& flow, std::size_t length_packets);

Vocabulary build_vocab(std::span<const FlowRecord> flows, const TokenizerConfig& config);

TokenSequence encode_flow(const FlowRecord& flow, const Vocabulary& vocab, const TokenizerConfig& config,
                          const EncodeOptions& options = {});

std::vector<TokenSequence> encode_flows(std::span<const FlowRecord> flows, const Vocabulary& vocab,
                                        const TokenizerConfig& config, const EncodeOptions& options = {});

}  // namespace owcp

#endif  // OWCP_TOKENIZER_HPP
