// SPDX-License-Identifier: Apache-2.0
#include "smd/harness/metrics.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

#include "smd/common/errors.hpp"

namespace smd::harness {

namespace {

void append_double(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    parts.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return parts;
}

template <class T>
T parse_field(const std::string& field, const std::string& name) {
  T out{};
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), out);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw InputError("metrics: bad value '" + field + "' for " + name);
  }
  return out;
}

}  // namespace

const std::vector<std::string>& metric_fields() {
  static const std::vector<std::string> fields = {
      "step",      "reward_mean",  "reward_std", "ratio_mean",     "ratio_var", "loss_pg",
      "loss_ref_kl", "loss_distill", "loss_total", "peak_mem_ratio", "consumed",  "generated"};
  return fields;
}

std::string format_header() {
  std::string out;
  for (const auto& f : metric_fields()) {
    if (!out.empty()) out += '\t';
    out += f;
  }
  return out;
}

std::string format_record(const MetricRecord& r) {
  std::string out = std::to_string(r.step);
  for (double v : {r.reward_mean, r.reward_std, r.ratio_mean, r.ratio_var, r.loss_pg, r.loss_ref_kl, r.loss_distill,
                   r.loss_total, r.peak_mem_ratio}) {
    out += '\t';
    append_double(out, v);
  }
  out += '\t' + std::to_string(r.consumed) + '\t' + std::to_string(r.generated);
  return out;
}

MetricRecord parse_record(const std::string& line) {
  const auto parts = split_tabs(line);
  const auto& names = metric_fields();
  if (parts.size() != names.size()) {
    throw InputError("metrics: expected " + std::to_string(names.size()) + " fields, got " +
                     std::to_string(parts.size()));
  }
  MetricRecord r;
  r.step = parse_field<std::uint64_t>(parts[0], names[0]);
  double* doubles[] = {&r.reward_mean, &r.reward_std,  &r.ratio_mean,   &r.ratio_var,     &r.loss_pg,
                       &r.loss_ref_kl, &r.loss_distill, &r.loss_total, &r.peak_mem_ratio};
  for (std::size_t i = 0; i < 9; ++i) *doubles[i] = parse_field<double>(parts[i + 1], names[i + 1]);
  r.consumed = parse_field<std::uint64_t>(parts[10], names[10]);
  r.generated = parse_field<std::uint64_t>(parts[11], names[11]);
  return r;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path) : out_(path) {
  if (!out_) throw InputError("cannot open metrics file " + path.string());
  out_ << format_header() << '\n';
  out_.flush();
}

void MetricsWriter::write(const MetricRecord& record) {
  out_ << format_record(record) << '\n';
  out_.flush();
}

std::vector<MetricRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open metrics file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != format_header()) {
    throw InputError("metrics file " + path.string() + " has an unexpected header");
  }
  std::vector<MetricRecord> out;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(parse_record(line));
  }
  return out;
}

}  // namespace smd::harness
