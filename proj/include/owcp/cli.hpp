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

#ifndef OWCP_CLI_HPP
#define OWCP_CLI_HPP

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "owcp/synthgen.hpp"

namespace owcp::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kMissingStage = 3,
  kNumericFailure = 4,
};

// Pipeline stages in dependency order.
inline const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> order{"gen-corpus", "build-vocab", "pretrain", "margins",
                                              "train-gan",  "finetune",    "calibrate"};
  return order;
}

// Stages a stage reads artifacts from.
const std::vector<std::string>& stage_inputs(const std::string& stage);

struct ManifestEntry {
  std::string stage;
  std::map<std::string, std::string> inputs;   // artifact -> sha256
  std::map<std::string, std::string> outputs;  // artifact -> sha256
  nlohmann::ordered_json config;
  std::string config_hash;
  std::uint64_t seed = 0;
};

class Manifest {
 public:
  static Manifest load(const std::filesystem::path& workdir);
  void save(const std::filesystem::path& workdir) const;

  const ManifestEntry* find(const std::string& stage) const;
  void put(ManifestEntry entry);
  // Every entry's inputs match the outputs of the stages it depends on.
  bool consistent() const;

  const std::map<std::string, ManifestEntry>& entries() const { return entries_; }

 private:
  std::map<std::string, ManifestEntry> entries_;
};

// "key: old -> new" lines for every leaf that differs.
std::vector<std::string> config_diff(const nlohmann::json& before, const nlohmann::json& after);

// Exclusive writer lock on a workdir, released on destruction. A lock left by
// a process that no longer exists is taken over.
class WorkdirLock {
 public:
  explicit WorkdirLock(const std::filesystem::path& workdir);
  ~WorkdirLock();
  WorkdirLock(const WorkdirLock&) = delete;
  WorkdirLock& operator=(const WorkdirLock&) = delete;

 private:
  std::filesystem::path path_;
};

CorpusSpec corpus_spec_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const CorpusSpec& spec);

// Parses argv-style arguments (without the program name) and runs one
// command. Never throws; errors go to `err` and map to an ExitCode.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace owcp::cli

#endif  // OWCP_CLI_HPP
