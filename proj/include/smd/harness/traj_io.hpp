// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "smd/rollout/rollout.hpp"

namespace smd::harness {

/// One trajectory as a single JSON object on one line; the mask uses its
/// compact text form.
std::string trajectory_to_json(const rollout::Trajectory& traj);
rollout::Trajectory trajectory_from_json(const std::string& line);

void write_trajectories(const std::filesystem::path& path, const std::vector<rollout::Trajectory>& trajs);
std::vector<rollout::Trajectory> read_trajectories(const std::filesystem::path& path);

}  // namespace smd::harness
