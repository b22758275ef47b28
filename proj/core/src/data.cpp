#include "presnet/data.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>

#include "presnet/error.hpp"

namespace presnet::data {

namespace fs = std::filesystem;

Tensor Dataset::sample(std::size_t i) const {
    const std::size_t px = static_cast<std::size_t>(hw) * hw;
    const std::size_t cols = images.cols();
    std::vector<real> d(images.data() + i * px * cols, images.data() + (i + 1) * px * cols);
    return Tensor({px, cols}, std::move(d));
}

namespace {

Dataset parse_records(const std::vector<unsigned char>& bytes, std::size_t n_records) {
    Dataset ds;
    ds.labels.reserve(n_records);
    TensorBuf img({n_records * 1024, 3});
    real* po = img.data();
    for (std::size_t rec = 0; rec < n_records; ++rec) {
        const unsigned char* p = bytes.data() + rec * kCifarRecordBytes;
        ds.labels.push_back(static_cast<std::int32_t>(p[0]));
        const unsigned char* planes = p + 1;
        for (std::size_t px = 0; px < 1024; ++px) {
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const real v = real(planes[ch * 1024 + px]) / real(255);
                po[(rec * 1024 + px) * 3 + ch] =
                    (v - real(kPixelMean[ch])) / real(kPixelStd[ch]);
            }
        }
    }
    ds.images = img.freeze();
    return ds;
}

std::vector<unsigned char> read_file(const std::string& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw FormatError("cifar10: cannot open " + file);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
        throw FormatError("cifar10: " + file + " has size " + std::to_string(bytes.size()) +
                          ", expected a positive multiple of " +
                          std::to_string(kCifarRecordBytes) + " bytes");
    }
    return bytes;
}

Dataset concat(std::vector<Dataset> parts) {
    std::size_t total = 0;
    for (const Dataset& d : parts) total += d.size();
    Dataset out;
    out.labels.reserve(total);
    TensorBuf img({total * 1024, 3});
    real* po = img.data();
    std::size_t off = 0;
    for (const Dataset& d : parts) {
        const std::size_t sz = d.images.size();
        const real* pi = d.images.data();
        for (std::size_t i = 0; i < sz; ++i) po[off + i] = pi[i];
        off += sz;
        out.labels.insert(out.labels.end(), d.labels.begin(), d.labels.end());
    }
    out.images = img.freeze();
    return out;
}

Dataset truncate(Dataset ds, std::size_t subset) {
    if (subset == 0 || subset >= ds.size()) return ds;
    Dataset out;
    out.labels.assign(ds.labels.begin(), ds.labels.begin() + subset);
    std::vector<real> d(ds.images.data(), ds.images.data() + subset * 1024 * 3);
    out.images = Tensor({subset * 1024, 3}, std::move(d));
    return out;
}

} // namespace

Dataset load_cifar10_file(const std::string& file, std::size_t subset) {
    std::vector<unsigned char> bytes = read_file(file);
    std::size_t n = bytes.size() / kCifarRecordBytes;
    if (subset > 0) n = std::min(n, subset);
    return parse_records(bytes, n);
}

Dataset load_cifar10_train(const std::string& dir, std::size_t subset) {
    std::vector<Dataset> parts;
    std::size_t loaded = 0;
    for (int i = 1; i <= 5; ++i) {
        const std::string file = (fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string();
        if (!fs::exists(file)) continue;
        const std::size_t want = subset ? subset - loaded : 0;
        parts.push_back(load_cifar10_file(file, want));
        loaded += parts.back().size();
        if (subset && loaded >= subset) break;
    }
    if (parts.empty()) {
        throw FormatError("cifar10: no data_batch_*.bin files under " + dir);
    }
    return truncate(concat(std::move(parts)), subset);
}

Dataset load_cifar10_test(const std::string& dir, std::size_t subset) {
    const std::string file = (fs::path(dir) / "test_batch.bin").string();
    if (!fs::exists(file)) throw FormatError("cifar10: missing " + file);
    return load_cifar10_file(file, subset);
}

Tensor augment_with(const Tensor& img, int dy, int dx, bool flip, int hw) {
    if (img.rows() != static_cast<std::size_t>(hw) * hw) {
        throw ContractError("augment: expected a " + std::to_string(hw) + "x" + std::to_string(hw) +
                            " image");
    }
    const std::size_t C = img.cols();
    TensorBuf out(img.shape());
    const real* pi = img.data();
    real* po = out.data();
    for (int i = 0; i < hw; ++i) {
        for (int j = 0; j < hw; ++j) {
            const int si = i + dy;
            int sj = j + dx;
            real* o = po + (static_cast<std::size_t>(i) * hw + j) * C;
            if (flip) sj = hw - 1 - sj;
            if (si < 0 || si >= hw || sj < 0 || sj >= hw) continue; // zero padding
            const real* s = pi + (static_cast<std::size_t>(si) * hw + sj) * C;
            for (std::size_t ch = 0; ch < C; ++ch) o[ch] = s[ch];
        }
    }
    return out.freeze();
}

Tensor augment(const Tensor& img, Rng& rng, int hw) {
    const int dy = static_cast<int>(rng.uniform_int(9)) - 4;
    const int dx = static_cast<int>(rng.uniform_int(9)) - 4;
    const bool flip = rng.coin();
    return augment_with(img, dy, dx, flip, hw);
}

// ---------------------------------------------------------------------------
// Synthetic data in the CIFAR-10 binary layout

namespace {

unsigned char clamp_byte(double v) {
    if (v < 0) return 0;
    if (v > 255) return 255;
    return static_cast<unsigned char>(v + 0.5);
}

void write_records(const std::string& file, std::size_t n, Rng& rng,
                   const std::function<void(std::int32_t, std::size_t, double*)>& pixel_fn,
                   int num_classes) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw FormatError("synthetic data: cannot write " + file);
    std::vector<unsigned char> rec(kCifarRecordBytes);
    for (std::size_t i = 0; i < n; ++i) {
        const std::int32_t label = static_cast<std::int32_t>(rng.uniform_int(num_classes));
        rec[0] = static_cast<unsigned char>(label);
        for (std::size_t px = 0; px < 1024; ++px) {
            double rgb[3];
            pixel_fn(label, px, rgb);
            for (std::size_t ch = 0; ch < 3; ++ch) {
                rec[1 + ch * 1024 + px] = clamp_byte(rgb[ch] + 40.0 * rng.normal());
            }
        }
        out.write(reinterpret_cast<const char*>(rec.data()), rec.size());
    }
}

} // namespace

void write_synthetic_cifar10(const std::string& dir, std::size_t n_train, std::size_t n_test,
                             std::uint64_t seed) {
    fs::create_directories(dir);
    // Ten classes separated by mean color plus a class-keyed quadrant
    // brightness pattern, noisy enough that chance accuracy is far below
    // what a trained model reaches.
    auto pixel = [](std::int32_t label, std::size_t px, double* rgb) {
        const double phi = 2.0 * 3.14159265358979323846 * label / 10.0;
        const double z = (label % 2 == 0) ? 0.45 : -0.45;
        const double s = std::sqrt(1.0 - z * z);
        const double u[3] = {std::cos(phi) * s, std::sin(phi) * s, z};
        const int i = static_cast<int>(px) / 32, j = static_cast<int>(px) % 32;
        const int quadrant = (i < 16 ? 0 : 1) * 2 + (j < 16 ? 0 : 1);
        const double bright = ((label >> quadrant) & 1) ? 18.0 : -18.0;
        for (int ch = 0; ch < 3; ++ch) rgb[ch] = 128.0 + 85.0 * u[ch] + bright;
    };
    Rng rng_train(seed);
    write_records((fs::path(dir) / "data_batch_1.bin").string(), n_train, rng_train, pixel, 10);
    Rng rng_test = rng_train.fork(0x7e57);
    write_records((fs::path(dir) / "test_batch.bin").string(), n_test, rng_test, pixel, 10);
}

void write_two_class_blobs(const std::string& dir, std::size_t n_train, std::size_t n_test,
                           std::uint64_t seed) {
    fs::create_directories(dir);
    // Red-dominant vs blue-dominant images; after normalization the pixel
    // tangents point into opposite half-balls.
    auto pixel = [](std::int32_t label, std::size_t, double* rgb) {
        rgb[0] = label == 0 ? 195.0 : 55.0;
        rgb[1] = 125.0;
        rgb[2] = label == 0 ? 55.0 : 195.0;
    };
    Rng rng_train(seed);
    write_records((fs::path(dir) / "data_batch_1.bin").string(), n_train, rng_train, pixel, 2);
    Rng rng_test = rng_train.fork(0x7e57);
    write_records((fs::path(dir) / "test_batch.bin").string(), n_test, rng_test, pixel, 2);
}

} // namespace presnet::data
