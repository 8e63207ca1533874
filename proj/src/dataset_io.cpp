// SPDX-License-Identifier: Apache-2.0
#include "tsub/dataset_io.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <string>

#include "binary_io.hpp"

namespace tsub {

void write_dataset(std::ostream& os, const LabeledDataset& dataset) {
  io::write_magic(os, "TFDS");
  io::write_le<std::uint32_t>(os, kDatasetFormatVersion);
  io::write_le<std::uint64_t>(os, dataset.samples.size());
  io::write_le<std::uint64_t>(os, dataset.num_identities);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(dataset.d_in));
  for (const auto& s : dataset.samples) {
    if (static_cast<std::size_t>(s.features.size()) != dataset.d_in) {
      throw DimensionError("write_dataset: sample feature width differs from d_in");
    }
    io::write_le<std::uint64_t>(os, s.sample_id);
    io::write_le<std::uint32_t>(os, s.identity);
    for (Eigen::Index j = 0; j < s.features.size(); ++j) {
      io::write_le<float>(os, static_cast<float>(s.features[j]));
    }
  }
  if (!os) throw FormatError("write_dataset: stream failure");
}

LabeledDataset read_dataset(std::istream& is) {
  io::expect_magic(is, "TFDS");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kDatasetFormatVersion) {
    throw FormatError("unsupported TFDS version " + std::to_string(version));
  }
  LabeledDataset ds;
  const auto n = io::read_le<std::uint64_t>(is);
  ds.num_identities = io::read_le<std::uint64_t>(is);
  ds.d_in = io::read_le<std::uint32_t>(is);
  ds.samples.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    Sample s;
    s.sample_id = io::read_le<std::uint64_t>(is);
    s.identity = io::read_le<std::uint32_t>(is);
    s.features.resize(static_cast<Eigen::Index>(ds.d_in));
    for (std::size_t j = 0; j < ds.d_in; ++j) s.features[j] = io::read_le<float>(is);
    ds.samples.push_back(std::move(s));
  }
  ds.validate();
  return ds;
}

void save_dataset(const std::filesystem::path& path, const LabeledDataset& dataset) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_dataset(os, dataset);
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_dataset(is);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) {
    while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
    out.push_back(field);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& text, std::size_t line_no) {
  T value{};
  const auto* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), last, value);
  if (ec != std::errc() || ptr != last) {
    throw FormatError("csv line " + std::to_string(line_no) + ": bad value '" + text + "'");
  }
  return value;
}

}  // namespace

LabeledDataset import_csv(std::istream& is, std::size_t num_identities) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("csv: missing header");
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "sample_id" || header[1] != "identity") {
    throw FormatError("csv: header must start with sample_id,identity,f0");
  }
  LabeledDataset ds;
  ds.d_in = header.size() - 2;
  std::size_t line_no = 1;
  std::uint32_t max_identity = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw FormatError("csv line " + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " fields");
    }
    Sample s;
    s.sample_id = parse_number<std::uint64_t>(fields[0], line_no);
    s.identity = parse_number<std::uint32_t>(fields[1], line_no);
    s.features.resize(static_cast<Eigen::Index>(ds.d_in));
    for (std::size_t j = 0; j < ds.d_in; ++j) s.features[j] = parse_number<double>(fields[j + 2], line_no);
    max_identity = std::max(max_identity, s.identity);
    ds.samples.push_back(std::move(s));
  }
  ds.num_identities = num_identities != 0 ? num_identities
                                          : (ds.samples.empty() ? 0 : std::size_t{max_identity} + 1);
  ds.validate();
  return ds;
}

LabeledDataset import_csv(const std::filesystem::path& path, std::size_t num_identities) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  return import_csv(is, num_identities);
}

void round_features_to_float(LabeledDataset& dataset) {
  for (auto& s : dataset.samples) {
    for (Eigen::Index j = 0; j < s.features.size(); ++j) {
      s.features[j] = static_cast<double>(static_cast<float>(s.features[j]));
    }
  }
}

}  // namespace tsub
