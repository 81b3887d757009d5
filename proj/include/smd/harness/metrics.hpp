// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace smd::harness {

/// One training step. Doubles are written with 17 significant digits so a
/// reader gets the exact bits back.
struct MetricRecord {
  std::uint64_t step = 0;
  double reward_mean = 0.0;
  double reward_std = 0.0;
  double ratio_mean = 0.0;
  double ratio_var = 0.0;
  double loss_pg = 0.0;
  double loss_ref_kl = 0.0;
  double loss_distill = 0.0;
  double loss_total = 0.0;
  double peak_mem_ratio = 1.0;
  std::uint64_t consumed = 0;
  std::uint64_t generated = 0;

  bool operator==(const MetricRecord&) const = default;
};

/// Tab-separated field names, in write order.
const std::vector<std::string>& metric_fields();

std::string format_header();
std::string format_record(const MetricRecord& record);
/// Throws InputError on a malformed line.
MetricRecord parse_record(const std::string& line);

/// Append-only writer; the header goes out on construction.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  void write(const MetricRecord& record);

 private:
  std::ofstream out_;
};

/// One-pass reader. Checks the header names.
std::vector<MetricRecord> read_metrics(const std::filesystem::path& path);

}  // namespace smd::harness
