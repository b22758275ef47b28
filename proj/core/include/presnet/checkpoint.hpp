#pragma once

#include <optional>
#include <string>

#include "presnet/models.hpp"
#include "presnet/optim.hpp"
#include "presnet/rng.hpp"

namespace presnet::ckpt {

// "PRN1" container: magic, u32 version, arch echo, named parameter blobs
// with a shape table, optional optimizer state, epoch and rng state. All
// integers little-endian, all floating point stored as f64.
inline constexpr char kMagic[4] = {'P', 'R', 'N', '1'};
inline constexpr std::uint32_t kVersion = 1;

struct Snapshot {
    models::Model model;
    std::optional<optim::State> opt;
    std::uint64_t epoch = 0;
    std::uint64_t rng_seed = 0;
    std::uint64_t rng_counter = 0;
};

void save_checkpoint(const models::Model& model, const optim::State* opt, std::uint64_t epoch,
                     const Rng& rng, const std::string& path);
Snapshot load_checkpoint(const std::string& path);

} // namespace presnet::ckpt
