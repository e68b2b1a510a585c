// SPDX-License-Identifier: Apache-2.0
//
// On-disk artifacts. Dense artifacts (checkpoints, importance maps, corpora)
// are a plain-text key=value manifest at `path` plus one little-endian binary
// blob at `path.bin`, with a CRC-32 per matrix and for the whole blob. Masks
// are a single text file listing sorted (row, col) pairs per matrix. Run
// records are JSON lines with a CSV summary.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "lingreg/corpus.hpp"
#include "lingreg/importance.hpp"
#include "lingreg/mask.hpp"
#include "lingreg/model.hpp"
#include "lingreg/trainer.hpp"

namespace lingreg {

inline constexpr int kFormatVersion = 1;

class ArtifactError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ArtifactKind : std::uint8_t { checkpoint, map, mask, corpus, record };

ArtifactKind parse_artifact_kind(std::string_view s);
std::string_view artifact_kind_name(ArtifactKind k);

void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path);
ParameterStore load_checkpoint(const std::filesystem::path& path);

void save_importance(const ImportanceMap& map, const std::filesystem::path& path);
ImportanceMap load_importance(const std::filesystem::path& path);

void save_mask(const RegionMask& mask, const std::filesystem::path& path);
RegionMask load_mask(const std::filesystem::path& path);

void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

void save_record(const RunRecord& record, const std::filesystem::path& path);
RunRecord load_record(const std::filesystem::path& path);

/// step,sequences,train_loss followed by one PPL column per evaluated corpus.
void write_record_summary(const RunRecord& record, const std::filesystem::path& path);

/// Shared model-config serialisation used by every manifest.
std::string config_lines(const ModelConfig& config);

/// Digest of the raw parameter bytes; equal stores hash equally.
std::uint32_t store_checksum(const ParameterStore& store);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace lingreg
