#pragma once

#include "tokenflow/model.hpp"
#include "tokenflow/scene.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tokenflow {

inline constexpr const char* kDatasetFormat = "MMTD-1";

enum class Split { kTrain, kVal };

/// One tau-frame window ending at frame t of a scenario, labelled at t+1.
/// The t+1 scene is kept so labels can be recomputed from scratch.
struct SampleRecord {
  Index scenario = 0;
  Index t = 0;
  Split split = Split::kTrain;
  std::uint64_t offset = 0;  // byte offset of the window's first frame in records.bin
  Index beam = 0;
  std::vector<int> link;
  SceneState next;
  std::vector<bool> los_blocked;  // per vehicle at t+1
};

struct Dataset {
  ScenarioConfig config;
  // frames[scenario][frame] holds one ModalityFrame per configured modality.
  std::vector<std::vector<std::vector<ModalityFrame>>> frames;
  std::vector<std::vector<std::uint64_t>> frame_offsets;
  std::vector<SampleRecord> samples;

  Index size() const { return Index(samples.size()); }
  /// tau * |modalities| frames with frame_index 0..tau-1, ready for the model.
  std::vector<ModalityFrame> window(Index sample) const;
  Target target(Index sample) const;
  std::vector<Index> indices(Split split) const;
};

/// Windows per scenario = frames - tau. The last 10% of scenarios (at least
/// one when there are two or more) form the validation split.
Dataset build_dataset(const ScenarioConfig& config);

/// Writes manifest.json and records.bin into dir (created if missing).
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);

/// Throws FormatError: kVersionMismatch, kTruncated, kCountMismatch,
/// kOffsetCorrupt or kMalformed.
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace tokenflow
