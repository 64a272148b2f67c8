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

#include <random>
#include <sstream>

#include "owcp/error.hpp"
#include "owcp/tokenizer.hpp"

using namespace owcp;

namespace {

PacketView packet(Direction dir, std::uint32_t len, std::string payload = {}) {
  return PacketView{dir, len, std::move(payload)};
}

FlowRecord flow_with(std::vector<PacketView> packets, std::string label = "a") {
  FlowRecord f;
  f.flow_id = "f";
  f.label = std::move(label);
  f.packets = std::move(packets);
  f.background.dst_ip = "1.1.1.1";
  f.background.dst_port = 443;
  return f;
}

}  // namespace

TEST_CASE("payload bytes pair into two-byte tokens") {
  auto f = flow_with({packet(Direction::kOutbound, 100, std::string("\x1a\x2b\x03\x45\x62\xaa", 6))});
  auto tokens = payload_tokens(f, 6);
  REQUIRE(tokens.size() == 1);
  CHECK(tokens[0] == std::vector<std::string>{"1a2b", "0345", "62aa"});
}

TEST_CASE("odd trailing byte is dropped and window is 64 bytes") {
  auto f = flow_with({packet(Direction::kOutbound, 200, std::string(5, '\x01')),
                      packet(Direction::kOutbound, 200, std::string(100, '\x02'))});
  auto tokens = payload_tokens(f, 6);
  CHECK(tokens[0].size() == 2);
  CHECK(tokens[1].size() == 32);
}

TEST_CASE("zero-payload packets do not count toward M") {
  auto f = flow_with({packet(Direction::kOutbound, 60), packet(Direction::kInbound, 60, "ab"),
                      packet(Direction::kInbound, 60), packet(Direction::kOutbound, 60, "cd")});
  auto tokens = payload_tokens(f, 1);
  REQUIRE(tokens.size() == 1);
  CHECK(tokens[0][0] == "6162");
}

TEST_CASE("signed length tokens") {
  auto f = flow_with({packet(Direction::kOutbound, 328), packet(Direction::kInbound, 1074),
                      packet(Direction::kInbound, 180), packet(Direction::kOutbound, 328)});
  CHECK(length_tokens(f, 128) == std::vector<std::string>{"+328", "-1074", "-180", "+328"});
  CHECK(length_tokens(f, 2).size() == 2);
}

TEST_CASE("vocabulary ordering by frequency with lexicographic ties") {
  // "1a2b" x10, "0345" x5 in payloads; lengths +7 x1.
  std::string payload;
  for (int i = 0; i < 10; ++i) payload += "\x1a\x2b";
  std::string payload2;
  for (int i = 0; i < 5; ++i) payload2 += std::string("\x03\x45", 2);
  auto f = flow_with({packet(Direction::kOutbound, 7, payload.substr(0, 7)),
                      packet(Direction::kOutbound, 200, payload), packet(Direction::kOutbound, 200, payload2)});
  // The first packet contributes 3 more "1a2b" tokens and its length token.
  auto vocab = build_vocab(std::vector<FlowRecord>{f}, TokenizerConfig{6, 1, 100});
  CHECK(vocab.lookup("1a2b") < vocab.lookup("0345"));
  CHECK(vocab.lookup("1a2b") == kNumSpecials);
  CHECK(vocab.lookup("+7") == kNumSpecials + 2);
  CHECK(vocab.size() == 7);

  // Ties: "+1", "+2", "-1" once each -> lexicographic.
  auto g = flow_with({packet(Direction::kInbound, 1), packet(Direction::kOutbound, 2), packet(Direction::kOutbound, 1)});
  auto v2 = build_vocab(std::vector<FlowRecord>{g}, TokenizerConfig{0, 128, 100});
  CHECK(v2.token(4) == "+1");
  CHECK(v2.token(5) == "+2");
  CHECK(v2.token(6) == "-1");
}

TEST_CASE("vocabulary capacity and config error") {
  auto f = flow_with({packet(Direction::kOutbound, 1), packet(Direction::kOutbound, 2), packet(Direction::kOutbound, 3),
                      packet(Direction::kOutbound, 4), packet(Direction::kOutbound, 5)});
  auto vocab = build_vocab(std::vector<FlowRecord>{f}, TokenizerConfig{6, 128, 6});
  CHECK(vocab.size() == 6);
  CHECK_THROWS_AS(build_vocab(std::vector<FlowRecord>{f}, TokenizerConfig{6, 128, 4}), ConfigError);
}

TEST_CASE("encoded sequence layout with full-size defaults") {
  TokenizerConfig cfg;
  CHECK(cfg.sequence_length() == 322);
  auto f = flow_with({packet(Direction::kOutbound, 328, std::string("\x1a\x2b\x03\x45\x62\xaa", 6)),
                      packet(Direction::kInbound, 1074), packet(Direction::kInbound, 180),
                      packet(Direction::kOutbound, 328)});
  auto vocab = build_vocab(std::vector<FlowRecord>{f}, cfg);
  auto seq = encode_flow(f, vocab, cfg);
  REQUIRE(seq.ids.size() == 322);
  CHECK(seq.ids[0] == kCls);
  CHECK(seq.ids[1 + 6 * 32] == kSep);
  CHECK(vocab.token(seq.ids[1]) == "1a2b");
  CHECK(vocab.token(seq.ids[2]) == "0345");
  CHECK(vocab.token(seq.ids[3]) == "62aa");
  CHECK(seq.ids[4] == kPad);
  CHECK(vocab.token(seq.ids[194]) == "+328");
  CHECK(vocab.token(seq.ids[195]) == "-1074");
  CHECK(vocab.token(seq.ids[196]) == "-180");
  CHECK(vocab.token(seq.ids[197]) == "+328");
  CHECK(seq.ids[198] == kPad);
  CHECK(seq.np_len_used == 3);
  CHECK(seq.pl_len_used == 4);
}

TEST_CASE("zero payload flow has an all-PAD payload region") {
  TokenizerConfig cfg;
  auto f = flow_with({packet(Direction::kOutbound, 40), packet(Direction::kInbound, 40)});
  auto seq = encode_flow(f, Vocabulary{}, cfg);
  CHECK(seq.ids.size() == 322);
  for (std::size_t i = 1; i < 193; ++i) CHECK(seq.ids[i] == kPad);
  CHECK(seq.ids[194] == kUnk);
}

TEST_CASE("ablation switches blank a region") {
  TokenizerConfig cfg{2, 4, 100};
  auto f = flow_with({packet(Direction::kOutbound, 10, "abcd"), packet(Direction::kInbound, 20, "ef")});
  auto vocab = build_vocab(std::vector<FlowRecord>{f}, cfg);
  auto no_np = encode_flow(f, vocab, cfg, {.drop_payload = true});
  auto no_pl = encode_flow(f, vocab, cfg, {.drop_lengths = true});
  CHECK(no_np.np_len_used == 0);
  CHECK(no_np.pl_len_used == 2);
  CHECK(no_pl.pl_len_used == 0);
  CHECK(no_pl.np_len_used == 3);
}

TEST_CASE("encode invariants over random flows") {
  std::mt19937 rng(3);
  TokenizerConfig cfg{3, 20, 50};
  std::vector<FlowRecord> corpus;
  for (int i = 0; i < 40; ++i) {
    std::vector<PacketView> packets;
    const int n = 1 + static_cast<int>(rng() % 40);
    for (int j = 0; j < n; ++j) {
      std::string payload(rng() % 90, '\0');
      for (auto& c : payload) c = static_cast<char>(rng() % 7);
      packets.push_back(packet(rng() % 2 ? Direction::kOutbound : Direction::kInbound,
                               static_cast<std::uint32_t>(payload.size() + 1 + rng() % 5), payload));
    }
    corpus.push_back(flow_with(packets));
  }
  auto vocab = build_vocab(corpus, cfg);
  CHECK(vocab.size() <= cfg.max_vocab);
  for (const auto& f : corpus) {
    auto seq = encode_flow(f, vocab, cfg);
    CHECK(seq.ids.size() == cfg.sequence_length());
    for (auto id : seq.ids) {
      CHECK(id >= 0);
      CHECK(static_cast<std::size_t>(id) < vocab.size());
    }
  }
  // Deterministic, byte-identical vocabulary file.
  std::ostringstream a, b;
  vocab.write(a);
  build_vocab(corpus, cfg).write(b);
  CHECK(a.str() == b.str());
  std::istringstream in(a.str());
  CHECK(Vocabulary::read(in) == vocab);
}
