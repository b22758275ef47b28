#pragma once

#include <string>
#include <vector>

#include "presnet/data.hpp"
#include "presnet/models.hpp"
#include "presnet/optim.hpp"

namespace presnet::train {

struct TrainConfig {
    models::ArchSpec arch;
    real lr = real(1e-3);
    real weight_decay = real(1e-4);
    optim::Kind optimizer = optim::Kind::kAdam;
    real momentum = real(0.9);
    int batch_size = 32;
    int epochs = 10;
    std::uint64_t seed = 1;
    nn::BnMode bn_mode = nn::BnMode::kMidpoint;
    bool augment = true;
    std::string data_path;
    std::string out_dir;
    std::size_t subset = 0; // cap: train <= subset, test <= subset / 2
    int threads = 1;

    void validate() const; // lr > 0, batch_size >= 2 (batch norm needs two)
};

// Flat "key = value" file mirroring TrainConfig (see README for the keys).
TrainConfig parse_config_file(const std::string& path);
TrainConfig parse_config_text(const std::string& text);

struct EpochRow {
    int epoch = 0;
    real train_loss = 0;
    real train_acc = 0;
    real test_acc = 0;
    double wall_seconds = 0;
    nn::BnMode bn_mode = nn::BnMode::kMidpoint;
};

std::string metrics_csv(const std::vector<EpochRow>& rows);

struct TrainResult {
    std::vector<EpochRow> history;
    std::string metrics_path;
    std::string checkpoint_path;
};

TrainResult train(const TrainConfig& config);

struct EvalResult {
    real loss = 0;
    real accuracy = 0;
};
EvalResult evaluate(models::Model& model, const data::Dataset& ds, int batch_size,
                    nn::BnMode bn_mode);

// Mean negative log-softmax of the true class, max-subtraction stabilized.
real cross_entropy(const Tensor& scores, const std::vector<std::int32_t>& labels);

} // namespace presnet::train
