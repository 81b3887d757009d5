// SPDX-License-Identifier: Apache-2.0
#include "smd/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "smd/common/errors.hpp"

namespace smd::model {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

bool get_u64(std::istream& in, std::uint64_t& v) {
  in.read(reinterpret_cast<char*>(&v), 8);
  return static_cast<bool>(in);
}

struct Record {
  num::Shape shape;
  std::vector<double> data;
};

}  // namespace

void save_checkpoint(const Parameters& params, std::ostream& out) {
  out.write(kCheckpointMagic, 8);
  for (const auto& [name, t] : params.named()) {
    put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(out, t.rank());
    for (auto d : t.shape()) put_u64(out, d);
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * 8));
  }
  if (!out) throw InputError("checkpoint: write failed");
}

void save_checkpoint(const Parameters& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("checkpoint: cannot open " + path.string() + " for writing");
  save_checkpoint(params, out);
}

Parameters load_checkpoint(const ModelConfig& config, std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw InputError("checkpoint: bad magic");
  std::map<std::string, Record> records;
  std::uint64_t name_len = 0;
  while (get_u64(in, name_len)) {
    if (name_len > 4096) throw InputError("checkpoint: implausible name length");
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    std::uint64_t rank = 0;
    if (!in || !get_u64(in, rank) || rank > 8) throw InputError("checkpoint: truncated record header");
    Record r;
    for (std::uint64_t i = 0; i < rank; ++i) {
      std::uint64_t d = 0;
      if (!get_u64(in, d)) throw InputError("checkpoint: truncated dims");
      r.shape.push_back(d);
    }
    r.data.resize(num::shape_numel(r.shape));
    in.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size() * 8));
    if (!in) throw InputError("checkpoint: truncated data for " + name);
    records.emplace(std::move(name), std::move(r));
  }
  Parameters params = Parameters::init(config, 0);
  for (auto& [name, t] : params.named()) {
    auto it = records.find(name);
    if (it == records.end()) throw InputError("checkpoint: missing array " + name);
    if (it->second.shape != t.shape()) {
      throw InputError("checkpoint: shape mismatch for " + name + ": " + num::shape_str(it->second.shape) +
                       " vs " + num::shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    std::copy(it->second.data.begin(), it->second.data.end(), dst.begin());
  }
  return params;
}

Parameters load_checkpoint(const ModelConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("checkpoint: cannot open " + path.string());
  return load_checkpoint(config, in);
}

}  // namespace smd::model
