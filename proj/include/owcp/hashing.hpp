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

#ifndef OWCP_HASHING_HPP
#define OWCP_HASHING_HPP

#include <filesystem>
#include <string>
#include <string_view>

namespace owcp {

// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

// Lowercase hex SHA-256 of a file's contents. Throws Error if unreadable.
std::string sha256_file(const std::filesystem::path& path);

std::string to_hex(std::string_view bytes);
// Throws ParseError on odd length or non-hex characters.
std::string from_hex(std::string_view hex);

}  // namespace owcp

#endif  // OWCP_HASHING_HPP
