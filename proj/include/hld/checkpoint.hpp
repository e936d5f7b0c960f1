#pragma once

// "HCKP" checkpoint container and the output-directory lock.
//
// Layout (little-endian): magic "HCKP", u16 version, u32 payload length, payload,
// u32 CRC32 of the payload. The payload holds, in order: schedule spec, denoiser
// config and named parameter blocks, optional hypernetwork, adapter sets keyed by
// subject id (each an embedded HLRA blob), config echo text, and the RNG summary.
// Parameter values are float32; schedule and config scalars are float64.

#include "hld/core_math.hpp"
#include "hld/denoiser.hpp"
#include "hld/hypernet.hpp"
#include "hld/lora.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hld {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    ScheduleSpec schedule;
    DenoiserParams denoiser;
    std::optional<HypernetParams> hypernet;
    std::map<std::string, LoraAdapterSet> adapters;
    std::string config_echo;
    std::uint64_t seed = 0;
    std::string rng_summary;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint &ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt);
Checkpoint load_checkpoint(const std::filesystem::path &path);

// Exclusive lock on an output directory, released on destruction.
class OutputLock {
public:
    explicit OutputLock(const std::filesystem::path &dir);
    ~OutputLock();
    OutputLock(const OutputLock &) = delete;
    OutputLock &operator=(const OutputLock &) = delete;

private:
    std::filesystem::path path_;
};

} // namespace hld
