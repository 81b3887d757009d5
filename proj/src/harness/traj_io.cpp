// SPDX-License-Identifier: Apache-2.0
#include "smd/harness/traj_io.hpp"

#include <fstream>

#include "json.hpp"
#include "smd/common/errors.hpp"

namespace smd::harness {

using nlohmann::json;

std::string trajectory_to_json(const rollout::Trajectory& t) {
  json j;
  j["prompt"] = t.prompt;
  j["generated"] = t.generated;
  j["behavior_logprobs"] = t.behavior_logprobs;
  j["reward"] = t.reward;
  j["seed"] = t.seed;
  j["mask"] = t.mask.serialize();
  j["cache_stored_entries"] = t.cache_stored_entries;
  j["cache_retained_entries"] = t.cache_retained_entries;
  return j.dump();
}

rollout::Trajectory trajectory_from_json(const std::string& line) {
  try {
    const json j = json::parse(line);
    rollout::Trajectory t;
    t.prompt = j.at("prompt").get<std::vector<int>>();
    t.generated = j.at("generated").get<std::vector<int>>();
    t.behavior_logprobs = j.at("behavior_logprobs").get<std::vector<double>>();
    t.reward = j.at("reward").get<double>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.mask = kv::ShadowMask::deserialize(j.at("mask").get<std::string>());
    t.cache_stored_entries = j.at("cache_stored_entries").get<std::uint64_t>();
    t.cache_retained_entries = j.at("cache_retained_entries").get<std::uint64_t>();
    return t;
  } catch (const json::exception& e) {
    throw InputError(std::string("trajectory record: ") + e.what());
  }
}

void write_trajectories(const std::filesystem::path& path, const std::vector<rollout::Trajectory>& trajs) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open " + path.string());
  for (const auto& t : trajs) out << trajectory_to_json(t) << '\n';
}

std::vector<rollout::Trajectory> read_trajectories(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<rollout::Trajectory> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(trajectory_from_json(line));
  }
  return out;
}

}  // namespace smd::harness
