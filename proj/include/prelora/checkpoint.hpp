#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "prelora/config.hpp"
#include "prelora/orchestrator.hpp"

namespace prelora {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
public:
    using Error::Error;
};

struct Checkpoint {
    RunConfig config;
    TrainState state;
};

/// Layout: "PRELORA\0", u32 version, u64 FNV-1a checksum of the payload,
/// u64 payload length, CBOR payload. Integers are little-endian.
std::vector<std::uint8_t> encode_checkpoint(const RunConfig& config, const TrainState& state);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const TrainState& state);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) noexcept;

}  // namespace prelora
