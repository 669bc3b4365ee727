#pragma once

// Run configuration files and versioned checkpoints.

#include "iresnet/flow.hpp"

#include <cstdint>
#include <string>

namespace iresnet {

/// Parses INI-style text with [model] and [train] sections. Unknown keys and
/// malformed values raise ConfigError naming the field and accepted values.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::string& path);
/// True when the text sets `key` ("section.name") explicitly.
bool config_sets(const std::string& text, const std::string& key);
/// Every field, defaults included, in the format parse_config reads.
std::string config_to_string(const TrainConfig& config);
/// Stable 64-bit hash of the canonical config text, as 16 hex digits.
std::string config_hash(const TrainConfig& config);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  TrainState state;
};

/// Layout: 8-byte magic "IRESNETC", u32 LE version, u64 LE header length, a
/// JSON header, then the little-endian float64 payload the header describes.
void save_checkpoint(const std::string& path, const TrainConfig& config, const TrainState& state);
Checkpoint load_checkpoint(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

}  // namespace iresnet
