#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "presnet/rng.hpp"
#include "presnet/tensor.hpp"

namespace presnet::data {

// Standard CIFAR-10 per-channel normalization constants.
inline constexpr std::array<double, 3> kPixelMean{0.4914, 0.4822, 0.4465};
inline constexpr std::array<double, 3> kPixelStd{0.2470, 0.2435, 0.2616};

inline constexpr std::size_t kCifarImageBytes = 3072; // 3 channel-major planes
inline constexpr std::size_t kCifarRecordBytes = 3073;

struct Dataset {
    // Normalized pixels; sample i occupies rows [i*hw*hw, (i+1)*hw*hw),
    // one row per pixel (row-major spatial order), channels in columns.
    Tensor images;
    std::vector<std::int32_t> labels;
    int hw = 32;
    int channels = 3;
    std::size_t size() const { return labels.size(); }
    Tensor sample(std::size_t i) const;
};

// CIFAR-10 binary layout: records of 3073 bytes (label byte, then 1024 R,
// 1024 G, 1024 B bytes). subset > 0 keeps only the first subset records.
Dataset load_cifar10_file(const std::string& file, std::size_t subset = 0);
// Directory layout: data_batch_1.bin .. data_batch_5.bin (whichever exist).
Dataset load_cifar10_train(const std::string& dir, std::size_t subset = 0);
// Directory layout: test_batch.bin.
Dataset load_cifar10_test(const std::string& dir, std::size_t subset = 0);

// Pad-4 with zeros (the normalized mean pixel), crop at offset (dy, dx)
// relative to center, optional horizontal flip. dy, dx in [-4, 4].
Tensor augment_with(const Tensor& img, int dy, int dx, bool flip, int hw = 32);
Tensor augment(const Tensor& img, Rng& rng, int hw = 32);

// Synthetic datasets written in the exact CIFAR-10 binary layout, for
// desk-scale runs when the real download is unavailable.
void write_synthetic_cifar10(const std::string& dir, std::size_t n_train, std::size_t n_test,
                             std::uint64_t seed);
// Two classes whose pixels embed into opposite half-balls.
void write_two_class_blobs(const std::string& dir, std::size_t n_train, std::size_t n_test,
                           std::uint64_t seed);

} // namespace presnet::data
