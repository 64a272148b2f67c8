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

#ifndef OWCP_FLOW_STORE_HPP
#define OWCP_FLOW_STORE_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace owcp {

enum class Direction : std::uint8_t {
  kOutbound,  // client -> server, "+"
  kInbound,   // server -> client, "-"
};

struct PacketView {
  Direction direction = Direction::kOutbound;
  std::uint32_t length_bytes = 1;
  // Post-handshake record bytes only; never longer than length_bytes.
  std::string payload;

  // Signed length, positive for outbound.
  std::int64_t signed_length() const {
    return direction == Direction::kOutbound ? static_cast<std::int64_t>(length_bytes)
                                             : -static_cast<std::int64_t>(length_bytes);
  }

  bool operator==(const PacketView&) const = default;
};

// Destination and TLS identity of a flow. Used by background filtering,
// never fed to the encoder.
struct BackgroundMeta {
  std::string dst_ip;
  std::uint16_t dst_port = 0;
  std::optional<std::string> sni;
  std::optional<std::string> cert_digest;

  std::string dst_tuple() const { return dst_ip + ":" + std::to_string(dst_port); }

  bool operator==(const BackgroundMeta&) const = default;
};

struct FlowRecord {
  std::string flow_id;
  // Empty for unlabeled flows.
  std::string label;
  std::vector<PacketView> packets;
  BackgroundMeta background;
  // Set once sanitize() has stripped header bytes; a second call is a no-op.
  bool sanitized = false;

  bool operator==(const FlowRecord&) const = default;
};

// Parses one line of the flow file format. `line_no` only decorates errors.
FlowRecord parse_flow_line(const std::string& line, std::size_t line_no = 0);
std::string format_flow_line(const FlowRecord& flow);

// Reads a line-delimited flow file. Blank lines are skipped. Throws
// ParseError (with line number) on malformed lines and ValidationError on
// duplicate flow ids or invariant violations.
std::vector<FlowRecord> load_flows(const std::filesystem::path& path);
std::vector<FlowRecord> read_flows(std::istream& in);

void write_flows(const std::filesystem::path& path, std::span<const FlowRecord> flows);
void write_flows(std::ostream& out, std::span<const FlowRecord> flows);

// Strips `strip_prefix` bytes of header from every payload. Payloads shorter
// than the prefix become empty. Idempotent through FlowRecord::sanitized.
FlowRecord sanitize(const FlowRecord& flow, std::size_t strip_prefix = 0);

struct ValidationReport {
  std::size_t total = 0;
  std::map<std::string, std::size_t> per_label;
  std::size_t unlabeled = 0;
  std::vector<std::string> zero_payload;
  std::vector<std::string> missing_sni;
  std::vector<std::string> missing_cert;
  // Invariant violations. Empty for a well-formed corpus.
  std::vector<std::string> errors;

  bool ok() const { return errors.empty(); }
};

ValidationReport validate_corpus(std::span<const FlowRecord> flows);

}  // namespace owcp

#endif  // OWCP_FLOW_STORE_HPP
