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

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include "owcp/error.hpp"
#include "owcp/tensor_io.hpp"

using namespace owcp;

namespace {

EncoderConfig tiny() {
  EncoderConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.head_dim = 4;
  c.ffn_dim = 16;
  c.layers = 2;
  c.max_seq = 12;
  return c;
}

}  // namespace

TEST_CASE("archive layout starts with magic, version and header length") {
  TensorArchive a("demo");
  a.meta()["note"] = "x";
  Matrix m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  a.add("m", m);
  const std::string bytes = a.serialize();
  REQUIRE(bytes.size() > 20);
  CHECK(bytes.substr(0, 8) == "OWCPTNS1");
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 8, 4);
  CHECK(version == TensorArchive::kVersion);
  std::uint64_t header = 0;
  std::memcpy(&header, bytes.data() + 12, 8);
  CHECK(bytes.size() == 20 + header + 6 * sizeof(double));
}

TEST_CASE("archive round-trips exactly, including non-finite and signed zero") {
  TensorArchive a("demo");
  Matrix m(2, 2);
  m << -0.0, std::numeric_limits<double>::denorm_min(), 1.0 / 3.0, -1e308;
  a.add("m", m);
  a.add("empty", Matrix(0, 4));
  a.meta()["k"] = 3;
  const auto b = TensorArchive::deserialize(a.serialize());
  CHECK(b.kind() == "demo");
  CHECK(b.meta()["k"] == 3);
  CHECK(b.get("m") == m);
  CHECK(std::signbit(b.get("m")(0, 0)));
  CHECK(b.get("empty").cols() == 4);
  CHECK(b.serialize() == a.serialize());
}

TEST_CASE("corrupt archives are rejected") {
  TensorArchive a("demo");
  a.add("m", Matrix::Ones(2, 2));
  const std::string bytes = a.serialize();
  CHECK_THROWS_AS(TensorArchive::deserialize("NOTMAGIC" + bytes.substr(8)), ParseError);
  CHECK_THROWS_AS(TensorArchive::deserialize(bytes.substr(0, bytes.size() - 1)), ParseError);
  CHECK_THROWS_AS(TensorArchive::deserialize(bytes + "x"), ParseError);
  CHECK_THROWS_AS(a.get("missing"), ParseError);
}

TEST_CASE("encoder checkpoint round-trips through a file") {
  const auto config = tiny();
  const auto params = init_encoder(config, 50, 3);
  const auto path = std::filesystem::temp_directory_path() / "owcp_test_encoder.owt";
  encoder_checkpoint(params, config, "vocabhash").save(path);
  const auto loaded = TensorArchive::load(path);
  std::filesystem::remove(path);
  EncoderParams back;
  EncoderConfig back_config;
  read_encoder_checkpoint(loaded, back, back_config);
  CHECK(back == params);
  CHECK(back_config == config);
  CHECK(loaded.meta()["vocab_hash"] == "vocabhash");
  CHECK(encoder_checkpoint(back, back_config, "vocabhash").serialize() ==
        encoder_checkpoint(params, config, "vocabhash").serialize());
}

TEST_CASE("encoder checkpoint refuses another kind") {
  TensorArchive other("gan");
  EncoderParams p;
  EncoderConfig c;
  CHECK_THROWS_AS(read_encoder_checkpoint(other, p, c), ParseError);
}

TEST_CASE("stack and unstack rows") {
  std::vector<RowVector> rows{RowVector::Constant(3, 1.0), RowVector::LinSpaced(3, 0.0, 2.0)};
  const Matrix m = stack_rows(rows, 3);
  CHECK(m.rows() == 2);
  CHECK(m(1, 2) == 2.0);
  CHECK(unstack_rows(m) == rows);
  CHECK(stack_rows({}, 3).cols() == 3);
}
