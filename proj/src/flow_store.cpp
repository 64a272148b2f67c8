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

#include "owcp/flow_store.hpp"

#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_map>

#include <json.hpp>

#include "owcp/error.hpp"
#include "owcp/hashing.hpp"

namespace owcp {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::optional<std::string> optional_string(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  return it->get<std::string>();
}

std::string check_packet(const PacketView& p) {
  if (p.length_bytes < 1) return "packet length must be >= 1";
  if (p.payload.size() > p.length_bytes) return "payload longer than packet length";
  return {};
}

}  // namespace

FlowRecord parse_flow_line(const std::string& line, std::size_t line_no) {
  json obj;
  try {
    obj = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
  }
  if (!obj.is_object()) throw ParseError("flow line is not an object", line_no);

  FlowRecord flow;
  try {
    flow.flow_id = obj.at("flow_id").get<std::string>();
    flow.label = obj.value("label", std::string{});
    for (const auto& p : obj.at("packets")) {
      PacketView pv;
      const auto dir = p.at("dir").get<std::string>();
      if (dir == "+") {
        pv.direction = Direction::kOutbound;
      } else if (dir == "-") {
        pv.direction = Direction::kInbound;
      } else {
        throw ParseError("packet dir must be \"+\" or \"-\"", line_no);
      }
      const auto len = p.at("len").get<std::int64_t>();
      if (len < 1 || len > 0xFFFFFFFFLL) throw ParseError("packet len out of range", line_no);
      pv.length_bytes = static_cast<std::uint32_t>(len);
      pv.payload = from_hex(p.value("payload_hex", std::string{}));
      flow.packets.push_back(std::move(pv));
    }
    flow.background.dst_ip = obj.at("dst_ip").get<std::string>();
    const auto port = obj.at("dst_port").get<std::int64_t>();
    if (port < 0 || port > 65535) throw ParseError("dst_port out of range", line_no);
    flow.background.dst_port = static_cast<std::uint16_t>(port);
    flow.background.sni = optional_string(obj, "sni");
    flow.background.cert_digest = optional_string(obj, "cert_digest");
    flow.sanitized = obj.value("sanitized", false);
  } catch (const ParseError& e) {
    if (e.line() == 0 && line_no != 0) throw ParseError(e.what(), line_no);
    throw;
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad field: ") + e.what(), line_no);
  }

  if (flow.flow_id.empty()) throw ParseError("empty flow_id", line_no);
  if (flow.packets.empty()) throw ParseError("flow has no packets", line_no);
  if (flow.background.dst_ip.empty()) throw ParseError("empty dst_ip", line_no);
  for (const auto& p : flow.packets) {
    if (auto msg = check_packet(p); !msg.empty()) throw ParseError(msg, line_no);
  }
  return flow;
}

std::string format_flow_line(const FlowRecord& flow) {
  ordered_json obj;
  obj["flow_id"] = flow.flow_id;
  obj["label"] = flow.label;
  auto packets = ordered_json::array();
  for (const auto& p : flow.packets) {
    ordered_json pj;
    pj["dir"] = p.direction == Direction::kOutbound ? "+" : "-";
    pj["len"] = p.length_bytes;
    pj["payload_hex"] = to_hex(p.payload);
    packets.push_back(std::move(pj));
  }
  obj["packets"] = std::move(packets);
  obj["dst_ip"] = flow.background.dst_ip;
  obj["dst_port"] = flow.background.dst_port;
  obj["sni"] = flow.background.sni ? ordered_json(*flow.background.sni) : ordered_json(nullptr);
  obj["cert_digest"] = flow.background.cert_digest ? ordered_json(*flow.background.cert_digest)
                                                   : ordered_json(nullptr);
  if (flow.sanitized) obj["sanitized"] = true;
  return obj.dump();
}

std::vector<FlowRecord> read_flows(std::istream& in) {
  std::vector<FlowRecord> flows;
  std::unordered_map<std::string, std::size_t> seen;  // flow_id -> line
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto flow = parse_flow_line(line, line_no);
    auto [it, inserted] = seen.emplace(flow.flow_id, line_no);
    if (!inserted) {
      throw ValidationError("duplicate flow_id '" + flow.flow_id + "' on lines " +
                            std::to_string(it->second) + " and " + std::to_string(line_no));
    }
    flows.push_back(std::move(flow));
  }
  return flows;
}

std::vector<FlowRecord> load_flows(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open flow file " + path.string());
  return read_flows(in);
}

void write_flows(std::ostream& out, std::span<const FlowRecord> flows) {
  for (const auto& f : flows) out << format_flow_line(f) << '\n';
}

void write_flows(const std::filesystem::path& path, std::span<const FlowRecord> flows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write flow file " + path.string());
  write_flows(out, flows);
}

FlowRecord sanitize(const FlowRecord& flow, std::size_t strip_prefix) {
  if (flow.sanitized) return flow;
  FlowRecord out = flow;
  for (auto& p : out.packets) {
    p.payload = p.payload.size() <= strip_prefix ? std::string{} : p.payload.substr(strip_prefix);
  }
  out.sanitized = true;
  return out;
}

ValidationReport validate_corpus(std::span<const FlowRecord> flows) {
  ValidationReport report;
  report.total = flows.size();
  std::unordered_map<std::string, std::size_t> ids;
  for (std::size_t i = 0; i < flows.size(); ++i) {
    const auto& f = flows[i];
    if (auto [it, ok] = ids.emplace(f.flow_id, i); !ok) {
      report.errors.push_back("duplicate flow_id '" + f.flow_id + "' at records " +
                              std::to_string(it->second) + " and " + std::to_string(i));
    }
    if (f.label.empty()) {
      ++report.unlabeled;
    } else {
      ++report.per_label[f.label];
    }
    if (f.packets.empty()) report.errors.push_back(f.flow_id + ": no packets");
    if (f.background.dst_ip.empty()) report.errors.push_back(f.flow_id + ": missing dst_ip");
    bool any_payload = false;
    for (const auto& p : f.packets) {
      if (auto msg = check_packet(p); !msg.empty()) report.errors.push_back(f.flow_id + ": " + msg);
      any_payload = any_payload || !p.payload.empty();
    }
    if (!any_payload) report.zero_payload.push_back(f.flow_id);
    if (!f.background.sni) report.missing_sni.push_back(f.flow_id);
    if (!f.background.cert_digest) report.missing_cert.push_back(f.flow_id);
  }
  return report;
}

}  // namespace owcp
