#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "rhm/trainer.hpp"

namespace rhm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: "RHMCKPT\0", u32 version, u64 header length, JSON header
// {model, step, optim_t, rng, run_id, tensors: [{name, rows, cols}]}, then
// every listed tensor as row-major little-endian float32. Optimizer moments
// are stored under "adam.m.<name>" and "adam.v.<name>".
struct CheckpointMeta {
  std::string run_id;
  std::uint64_t train_seed = 0;
};

void write_checkpoint(std::ostream& out, const ModelState& state, const CheckpointMeta& meta = {});
// Throws FormatError on a bad magic, version or truncated payload.
ModelState read_checkpoint(std::istream& in, CheckpointMeta* meta = nullptr);

void save_checkpoint(const std::filesystem::path& path, const ModelState& state,
                     const CheckpointMeta& meta = {});
// Throws MissingArtifactError naming the path.
ModelState load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

// "ckpt_<step padded to 9 digits>.bin".
std::string checkpoint_filename(std::uint64_t step);

}  // namespace rhm
