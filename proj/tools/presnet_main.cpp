#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "presnet/checkpoint.hpp"
#include "presnet/data.hpp"
#include "presnet/error.hpp"
#include "presnet/train.hpp"
#include "presnet/verify.hpp"

namespace {

void emit(const std::string& csv, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << csv;
        return;
    }
    std::ofstream out(out_path);
    if (!out) throw presnet::FormatError("cannot write " + out_path);
    out << csv;
}

std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::string cur;
    for (char ch : s + ",") {
        if (ch == ',') {
            if (!cur.empty()) out.push_back(std::stoi(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Poincare ResNet: hyperbolic layers, training and verification"};
    app.require_subcommand(1);

    // ---- train -------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "Train a model from a key = value config file");
    std::string cfg_path, bn_override, data_override, out_override;
    std::uint64_t seed_override = 0;
    bool has_seed = false;
    std::size_t subset_override = 0;
    bool has_subset = false;
    train_cmd->add_option("--config", cfg_path, "config file")->required();
    train_cmd->add_option("--subset", subset_override, "cap the train set at N records (test at N/2)")
        ->each([&](const std::string&) { has_subset = true; });
    train_cmd->add_option("--bn", bn_override, "batch norm mode: midpoint | frechet");
    train_cmd->add_option("--seed", seed_override, "rng seed")->each([&](const std::string&) {
        has_seed = true;
    });
    train_cmd->callback([&] {
        presnet::train::TrainConfig cfg = presnet::train::parse_config_file(cfg_path);
        if (has_subset) cfg.subset = subset_override;
        if (has_seed) cfg.seed = seed_override;
        if (!bn_override.empty()) {
            if (bn_override == "midpoint") {
                cfg.bn_mode = presnet::nn::BnMode::kMidpoint;
            } else if (bn_override == "frechet") {
                cfg.bn_mode = presnet::nn::BnMode::kFrechet;
            } else {
                throw CLI::ValidationError("--bn must be midpoint or frechet");
            }
        }
        if (!data_override.empty()) cfg.data_path = data_override;
        if (!out_override.empty()) cfg.out_dir = out_override;
        presnet::train::TrainResult res = presnet::train::train(cfg);
        std::cout << presnet::train::metrics_csv(res.history);
        std::cout << "metrics: " << res.metrics_path << "\n";
        std::cout << "checkpoint: " << res.checkpoint_path << "\n";
    });
    train_cmd->add_option("--data", data_override, "override data_path");
    train_cmd->add_option("--out", out_override, "override out_dir");

    // ---- eval --------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string ckpt_path, eval_data;
    int eval_batch = 32;
    eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
    eval_cmd->add_option("--batch", eval_batch, "evaluation batch size");
    eval_cmd->callback([&] {
        presnet::ckpt::Snapshot snap = presnet::ckpt::load_checkpoint(ckpt_path);
        presnet::data::Dataset ds = presnet::data::load_cifar10_test(eval_data);
        presnet::train::EvalResult res =
            presnet::train::evaluate(snap.model, ds, eval_batch, presnet::nn::BnMode::kMidpoint);
        std::printf("samples,%zu\nloss,%.10g\naccuracy,%.10g\n", ds.size(),
                    static_cast<double>(res.loss), static_cast<double>(res.accuracy));
    });

    // ---- verify ------------------------------------------------------------
    auto* verify_cmd = app.add_subcommand("verify", "Reproducibility harness (CSV output)");
    verify_cmd->require_subcommand(1);

    std::string out_path;
    std::uint64_t vseed = 7;
    double tol = 1e-5;
    auto* gc = verify_cmd->add_subcommand("gradcheck",
                                          "certify every manual backward against finite differences");
    gc->add_option("--seed", vseed, "rng seed");
    gc->add_option("--tol", tol, "primitive tolerance (layers use 10x)");
    gc->add_option("--out", out_path, "write CSV here instead of stdout");
    gc->callback([&] {
        auto report = presnet::verify::gradcheck_all(vseed, static_cast<presnet::real>(tol),
                                                     static_cast<presnet::real>(tol * 10));
        emit(presnet::verify::gradcheck_csv(report), out_path);
        if (!report.all_pass()) {
            std::cerr << "gradcheck: FAILURES present\n";
            std::exit(1);
        }
    });

    auto* norms = verify_cmd->add_subcommand("norms", "norm-preservation sweep over stacked FC layers");
    int depth = 10, dim = 20;
    std::string init_name = "identity";
    std::uint64_t nseed = 7;
    std::string nout;
    norms->add_option("--depth", depth, "number of stacked layers");
    norms->add_option("--dim", dim, "feature dimension");
    norms->add_option("--init", init_name, "identity | normal");
    norms->add_option("--seed", nseed, "rng seed");
    norms->add_option("--out", nout, "write CSV here instead of stdout");
    norms->callback([&] {
        const auto scheme = init_name == "normal" ? presnet::models::InitScheme::kNormalBaseline
                                                  : presnet::models::InitScheme::kIdentity;
        auto rows = presnet::verify::norm_sweep(depth, dim, scheme, nseed);
        emit(presnet::verify::norm_sweep_csv(rows, scheme), nout);
    });

    auto* bnb = verify_cmd->add_subcommand("bn-bench", "midpoint vs Frechet-mean timings");
    std::string batches = "32,128", dims = "4,16", bout;
    int iters = 10;
    std::uint64_t bseed = 7;
    bnb->add_option("--batches", batches, "comma-separated batch sizes");
    bnb->add_option("--dims", dims, "comma-separated dimensions");
    bnb->add_option("--iters", iters, "timing repetitions (>= 10)");
    bnb->add_option("--seed", bseed, "rng seed");
    bnb->add_option("--out", bout, "write CSV here instead of stdout");
    bnb->callback([&] {
        auto rows = presnet::verify::bn_bench(split_ints(batches), split_ints(dims), iters, bseed);
        emit(presnet::verify::bn_bench_csv(rows), bout);
    });

    auto* tpb = verify_cmd->add_subcommand("tape-bench", "fused vs naive computation-graph size");
    std::string tout;
    std::uint64_t tseed = 3;
    tpb->add_option("--seed", tseed, "rng seed");
    tpb->add_option("--out", tout, "write CSV here instead of stdout");
    tpb->callback([&] {
        auto rows = presnet::verify::tape_size_bench(tseed);
        emit(presnet::verify::tape_bench_csv(rows), tout);
    });

    // ---- synth-data ----------------------------------------------------------
    auto* synth = app.add_subcommand(
        "synth-data", "write a synthetic dataset in the CIFAR-10 binary layout");
    std::string sdir, kind = "cifar";
    std::size_t n_train = 2000, n_test = 1000;
    std::uint64_t sseed = 1;
    synth->add_option("--out", sdir, "output directory")->required();
    synth->add_option("--train", n_train, "training records");
    synth->add_option("--test", n_test, "test records");
    synth->add_option("--seed", sseed, "rng seed");
    synth->add_option("--kind", kind, "cifar (10-class) | blobs (2-class separable)");
    synth->callback([&] {
        if (kind == "cifar") {
            presnet::data::write_synthetic_cifar10(sdir, n_train, n_test, sseed);
        } else if (kind == "blobs") {
            presnet::data::write_two_class_blobs(sdir, n_train, n_test, sseed);
        } else {
            throw CLI::ValidationError("--kind must be cifar or blobs");
        }
        std::cout << "wrote " << n_train << " train / " << n_test << " test records to " << sdir
                  << "\n";
    });

    try {
        CLI11_PARSE(app, argc, argv);
    } catch (const presnet::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
