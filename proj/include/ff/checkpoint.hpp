#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "ff/engine.hpp"

namespace ff {

constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary container, little-endian throughout; layout in docs/checkpoint_format.md.
std::string serialize_checkpoint(const Network& net);
Network deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace ff
