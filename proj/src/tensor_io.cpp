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

#include "owcp/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "owcp/error.hpp"

namespace owcp {

namespace {

constexpr char kMagic[8] = {'O', 'W', 'C', 'P', 'T', 'N', 'S', '1'};

static_assert(std::endian::native == std::endian::little, "tensor container assumes a little-endian host");

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ParseError("truncated tensor container", 0);
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

}  // namespace

void TensorArchive::add(std::string name, Matrix tensor) {
  if (has(name)) throw ConfigError("duplicate tensor " + name);
  tensors_.emplace_back(std::move(name), std::move(tensor));
}

bool TensorArchive::has(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return true;
  return false;
}

const Matrix& TensorArchive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return t;
  throw ParseError("tensor container has no tensor '" + name + "'", 0);
}

std::string TensorArchive::serialize() const {
  nlohmann::ordered_json header;
  header["kind"] = kind_;
  header["meta"] = meta_;
  auto list = nlohmann::ordered_json::array();
  for (const auto& [name, t] : tensors_) {
    list.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  }
  header["tensors"] = std::move(list);
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, t] : tensors_) {
    out.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(double));
  }
  return out;
}

TensorArchive TensorArchive::deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("not a tensor container (bad magic)", 0);
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kVersion) throw ParseError("unsupported tensor container version " + std::to_string(version), 0);
  const auto header_len = take<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size()) throw ParseError("truncated tensor container header", 0);
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad tensor container header: ") + e.what(), 0);
  }
  pos += header_len;

  TensorArchive archive(header.at("kind").get<std::string>());
  archive.meta_ = header.at("meta");
  for (const auto& entry : header.at("tensors")) {
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    const auto n = static_cast<std::size_t>(rows * cols);
    if (pos + n * sizeof(double) > bytes.size()) throw ParseError("truncated tensor payload", 0);
    Matrix t(rows, cols);
    std::memcpy(t.data(), bytes.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    archive.add(entry.at("name").get<std::string>(), std::move(t));
  }
  if (pos != bytes.size()) throw ParseError("trailing bytes in tensor container", 0);
  return archive;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  const auto bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

nlohmann::ordered_json to_json(const EncoderConfig& c) {
  return {{"d_model", c.d_model}, {"heads", c.heads},     {"head_dim", c.head_dim}, {"ffn_dim", c.ffn_dim},
          {"layers", c.layers},   {"max_seq", c.max_seq}, {"dropout", c.dropout}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.heads = j.value("heads", c.heads);
  c.head_dim = j.value("head_dim", c.head_dim);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.layers = j.value("layers", c.layers);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.dropout = j.value("dropout", c.dropout);
  return c;
}

TensorArchive encoder_checkpoint(const EncoderParams& params, const EncoderConfig& config,
                                 const std::string& vocab_hash) {
  TensorArchive archive("encoder");
  archive.meta()["config"] = to_json(config);
  archive.meta()["vocab_hash"] = vocab_hash;
  archive.add("positional", params.positional);
  auto copy = params;
  auto grads = copy.zeros_like();
  for (const auto& ref : encoder_param_refs(copy, grads)) archive.add(ref.name, *ref.value);
  return archive;
}

void read_encoder_checkpoint(const TensorArchive& archive, EncoderParams& params, EncoderConfig& config) {
  if (archive.kind() != "encoder") throw ParseError("expected an encoder checkpoint, got " + archive.kind(), 0);
  config = encoder_config_from_json(archive.meta().at("config"));
  config.validate();
  const auto& embedding = archive.get("embedding");
  params = init_encoder(config, static_cast<std::size_t>(embedding.rows()), 0);
  params.positional = archive.get("positional");
  auto grads = params.zeros_like();
  for (auto& ref : encoder_param_refs(params, grads)) {
    const auto& t = archive.get(ref.name);
    if (t.rows() != ref.value->rows() || t.cols() != ref.value->cols()) {
      throw ParseError("shape mismatch for tensor " + ref.name, 0);
    }
    *ref.value = t;
  }
}

Matrix stack_rows(const std::vector<RowVector>& rows, Eigen::Index cols) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != cols) throw ConfigError("row dimension mismatch");
    m.row(static_cast<Eigen::Index>(i)) = rows[i];
  }
  return m;
}

std::vector<RowVector> unstack_rows(const Matrix& m) {
  std::vector<RowVector> rows;
  rows.reserve(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) rows.emplace_back(m.row(r));
  return rows;
}

}  // namespace owcp
