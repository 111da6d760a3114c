#pragma once

#include <filesystem>
#include <iosfwd>

#include "cflow/config.hpp"
#include "cflow/training.hpp"

namespace cflow {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// CFCK layout: magic "CFCK", u32 version, u32 length + key=value block,
// u32 tensor count, per tensor (u16 name length, name, CFT1 tensor),
// u64 iteration, then the RNG state bytes to end of file.
void write_checkpoint(std::ostream& os, const TrainState& state);
TrainState read_checkpoint(std::istream& is);

void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

// Model architecture and preprocessing as key=value entries.
KeyValues describe_model(const FlowModel& model);
FlowModel model_from_description(const KeyValues& kv);

}  // namespace cflow
