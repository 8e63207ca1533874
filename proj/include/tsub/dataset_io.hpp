// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>

#include "tsub/embedding.hpp"

namespace tsub {

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

/// TFDS container: "TFDS", u32 version, u64 N, u64 C, u32 d_in, then N
/// records of (u64 sample_id, u32 identity, d_in little-endian float32).
/// Features are stored as float32, so values are rounded on write.
void write_dataset(std::ostream& os, const LabeledDataset& dataset);
LabeledDataset read_dataset(std::istream& is);
void save_dataset(const std::filesystem::path& path, const LabeledDataset& dataset);
LabeledDataset load_dataset(const std::filesystem::path& path);

/// CSV with header `sample_id,identity,f0,...,f{d_in-1}`. C is taken as
/// max(identity)+1 unless num_identities is given.
LabeledDataset import_csv(std::istream& is, std::size_t num_identities = 0);
LabeledDataset import_csv(const std::filesystem::path& path, std::size_t num_identities = 0);

/// Rounds every feature to the nearest float32 so in-memory data matches
/// what a TFDS round trip would produce.
void round_features_to_float(LabeledDataset& dataset);

}  // namespace tsub
