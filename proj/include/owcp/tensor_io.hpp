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

#ifndef OWCP_TENSOR_IO_HPP
#define OWCP_TENSOR_IO_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "owcp/encoder.hpp"
#include "owcp/nn.hpp"

namespace owcp {

// Self-describing tensor container:
//   8 bytes  magic "OWCPTNS1"
//   u32 LE   format version
//   u64 LE   header length
//   header   JSON {"kind", "meta", "tensors": [{"name", "rows", "cols"}]}
//   payload  row-major little-endian float64 values, tensors in header order
class TensorArchive {
 public:
  static constexpr std::uint32_t kVersion = 1;

  TensorArchive() = default;
  explicit TensorArchive(std::string kind) : kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }
  nlohmann::ordered_json& meta() { return meta_; }
  const nlohmann::ordered_json& meta() const { return meta_; }

  void add(std::string name, Matrix tensor);
  bool has(const std::string& name) const;
  // Throws ParseError when missing.
  const Matrix& get(const std::string& name) const;
  const std::vector<std::pair<std::string, Matrix>>& tensors() const { return tensors_; }

  std::string serialize() const;
  static TensorArchive deserialize(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);

 private:
  std::string kind_;
  nlohmann::ordered_json meta_ = nlohmann::ordered_json::object();
  std::vector<std::pair<std::string, Matrix>> tensors_;
};

nlohmann::ordered_json to_json(const EncoderConfig& config);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

// Encoder checkpoint: config, vocabulary hash and every tensor.
TensorArchive encoder_checkpoint(const EncoderParams& params, const EncoderConfig& config,
                                 const std::string& vocab_hash);
// Restores into params/config. Throws ParseError on kind or shape mismatch.
void read_encoder_checkpoint(const TensorArchive& archive, EncoderParams& params, EncoderConfig& config);

// Stacks row vectors into one matrix and back.
Matrix stack_rows(const std::vector<RowVector>& rows, Eigen::Index cols);
std::vector<RowVector> unstack_rows(const Matrix& m);

}  // namespace owcp

#endif  // OWCP_TENSOR_IO_HPP
