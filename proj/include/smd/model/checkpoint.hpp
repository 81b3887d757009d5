// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>

#include "smd/model/parameters.hpp"

namespace smd::model {

// Binary layout, all integers u64 little-endian:
//   "SMDCKPT1"
//   repeated until EOF: name_len, name bytes, rank, dims[rank], f64 data
inline constexpr char kCheckpointMagic[] = "SMDCKPT1";

void save_checkpoint(const Parameters& params, std::ostream& out);
void save_checkpoint(const Parameters& params, const std::filesystem::path& path);

/// Fills a freshly initialized Parameters for `config` from the stream. Every
/// named array must be present with a matching shape.
Parameters load_checkpoint(const ModelConfig& config, std::istream& in);
Parameters load_checkpoint(const ModelConfig& config, const std::filesystem::path& path);

}  // namespace smd::model
