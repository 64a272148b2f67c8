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
#include "owcp/flow_store.hpp"

using namespace owcp;

namespace {

FlowRecord make_flow(const std::string& id, const std::string& label, std::vector<std::string> payloads) {
  FlowRecord f;
  f.flow_id = id;
  f.label = label;
  for (std::size_t i = 0; i < payloads.size(); ++i) {
    PacketView p;
    p.direction = i % 2 == 0 ? Direction::kOutbound : Direction::kInbound;
    p.payload = payloads[i];
    p.length_bytes = static_cast<std::uint32_t>(payloads[i].size() + 40);
    f.packets.push_back(p);
  }
  f.background.dst_ip = "10.0.0.1";
  f.background.dst_port = 443;
  return f;
}

std::string line(const std::string& id) {
  return R"({"flow_id":")" + id +
         R"(","label":"a","packets":[{"dir":"+","len":10,"payload_hex":"1a2b"}],"dst_ip":"1.2.3.4","dst_port":443,"sni":null,"cert_digest":null})";
}

}  // namespace

TEST_CASE("load_flows keeps input order") {
  std::stringstream in(line("f1") + "\n" + line("f2") + "\n" + line("f3") + "\n");
  auto flows = read_flows(in);
  REQUIRE(flows.size() == 3);
  CHECK(flows[0].flow_id == "f1");
  CHECK(flows[1].flow_id == "f2");
  CHECK(flows[2].flow_id == "f3");
  CHECK(flows[0].packets[0].payload == std::string("\x1a\x2b"));
  CHECK(flows[0].packets[0].signed_length() == 10);
}

TEST_CASE("duplicate flow id names both lines") {
  std::stringstream in(line("a") + "\n" + line("dup") + "\n" + line("b") + "\n" + line("c") + "\n" +
                       line("dup") + "\n");
  try {
    read_flows(in);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("lines 2 and 5") != std::string::npos);
  }
}

TEST_CASE("empty file yields empty list") {
  std::stringstream in("");
  CHECK(read_flows(in).empty());
}

TEST_CASE("malformed line reports line number") {
  std::stringstream in(line("a") + "\n{not json\n");
  try {
    read_flows(in);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  std::stringstream bad_dir(R"({"flow_id":"x","packets":[{"dir":"?","len":3}],"dst_ip":"a","dst_port":1})");
  CHECK_THROWS_AS(read_flows(bad_dir), ParseError);
  std::stringstream long_payload(
      R"({"flow_id":"x","packets":[{"dir":"+","len":1,"payload_hex":"aabb"}],"dst_ip":"a","dst_port":1})");
  CHECK_THROWS_AS(read_flows(long_payload), ParseError);
}

TEST_CASE("sanitize strips the configured prefix") {
  SUBCASE("zero prefix is identity on features") {
    auto f = make_flow("x", "a", {"abcdef", "", "0123456789"});
    auto s = sanitize(f, 0);
    CHECK(s.packets == f.packets);
    CHECK(s.background == f.background);
  }
  SUBCASE("14-byte prefix") {
    // 20, 14 and 30 byte payloads -> 6, 0, 16 bytes left.
    auto f = make_flow("x", "a", {std::string(20, 'a'), std::string(14, 'b'), std::string(30, 'c')});
    auto s = sanitize(f, 14);
    CHECK(s.packets[0].payload.size() == 6);
    CHECK(s.packets[1].payload.empty());
    CHECK(s.packets[2].payload.size() == 16);
    CHECK(s.packets[2].payload == std::string(16, 'c'));
    CHECK(s.packets[0].length_bytes == f.packets[0].length_bytes);
  }
  SUBCASE("payload shorter than prefix becomes empty") {
    auto s = sanitize(make_flow("x", "a", {"abc"}), 14);
    CHECK(s.packets[0].payload.empty());
  }
}

TEST_CASE("sanitize is idempotent") {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> payloads;
    const int n = 1 + static_cast<int>(rng() % 5);
    for (int i = 0; i < n; ++i) payloads.emplace_back(rng() % 40, static_cast<char>('a' + i));
    auto f = make_flow("x", "a", payloads);
    const std::size_t prefix = rng() % 20;
    CHECK(sanitize(sanitize(f, prefix), prefix) == sanitize(f, prefix));
  }
}

TEST_CASE("write then load is identity") {
  std::mt19937 rng(11);
  std::vector<FlowRecord> flows;
  for (int i = 0; i < 30; ++i) {
    std::vector<std::string> payloads;
    const int n = 1 + static_cast<int>(rng() % 6);
    for (int j = 0; j < n; ++j) {
      std::string p(rng() % 50, '\0');
      for (auto& c : p) c = static_cast<char>(rng() & 0xff);
      payloads.push_back(p);
    }
    auto f = make_flow("flow" + std::to_string(i), i % 3 == 0 ? "" : "app" + std::to_string(i % 4), payloads);
    if (rng() % 2) f.background.sni = "host" + std::to_string(i) + ".example";
    if (rng() % 2) f.background.cert_digest = "cd" + std::to_string(i);
    f.background.dst_port = static_cast<std::uint16_t>(rng() % 65536);
    if (i % 5 == 0) f = sanitize(f, 3);
    flows.push_back(f);
  }
  std::stringstream buf;
  write_flows(buf, flows);
  CHECK(read_flows(buf) == flows);
}

TEST_CASE("validate_corpus counts labels and warnings") {
  std::vector<FlowRecord> flows;
  for (int i = 0; i < 10; ++i) flows.push_back(make_flow("f" + std::to_string(i), i < 6 ? "a" : "b", {"xy"}));
  auto report = validate_corpus(flows);
  CHECK(report.per_label.at("a") == 6);
  CHECK(report.per_label.at("b") == 4);
  CHECK(report.ok());
  CHECK(report.missing_sni.size() == 10);

  flows.push_back(make_flow("empty", "a", {"", ""}));
  flows.push_back(make_flow("nolabel", "", {"zz"}));
  report = validate_corpus(flows);
  REQUIRE(report.zero_payload.size() == 1);
  CHECK(report.zero_payload[0] == "empty");
  CHECK(report.unlabeled == 1);

  flows.push_back(make_flow("f1", "a", {"q"}));
  CHECK_FALSE(validate_corpus(flows).ok());
}
