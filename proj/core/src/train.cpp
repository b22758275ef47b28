#include "presnet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "presnet/checkpoint.hpp"
#include "presnet/elem_ops.hpp"
#include "presnet/error.hpp"
#include "presnet/parallel.hpp"

namespace presnet::train {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    arch.validate();
    if (!(lr > 0)) throw ContractError("TrainConfig: lr must be positive");
    if (batch_size < 2) throw ContractError("TrainConfig: batch_size must be >= 2");
    if (epochs < 1) throw ContractError("TrainConfig: epochs must be >= 1");
    if (weight_decay < 0) throw ContractError("TrainConfig: weight_decay must be >= 0");
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    throw FormatError("config: bad boolean for " + key + ": " + v);
}

std::vector<int> parse_int_list(const std::string& v) {
    std::vector<int> out;
    std::string cur;
    for (char ch : v + ",") {
        if (ch == ',') {
            if (!trim(cur).empty()) out.push_back(std::stoi(trim(cur)));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    return out;
}

} // namespace

TrainConfig parse_config_text(const std::string& text) {
    TrainConfig cfg;
    std::string line;
    std::istringstream in(text);
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("config: expected key = value, got: " + line);
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "arch") {
            if (val == "resnet20") {
                cfg.arch.kind = models::ArchSpec::Kind::kResNet;
                cfg.arch.depth = 20;
            } else if (val == "resnet32") {
                cfg.arch.kind = models::ArchSpec::Kind::kResNet;
                cfg.arch.depth = 32;
            } else if (val == "tiny") {
                cfg.arch.kind = models::ArchSpec::Kind::kConvNet;
                cfg.arch.convnet_stages = {{8, 2}, {16, 2}};
            } else if (val == "convnet") {
                cfg.arch.kind = models::ArchSpec::Kind::kConvNet;
            } else {
                throw FormatError("config: unknown arch " + val);
            }
        } else if (key == "depth") {
            cfg.arch.depth = std::stoi(val);
        } else if (key == "widths") {
            const auto w = parse_int_list(val);
            if (w.size() != 3) throw FormatError("config: widths needs three values");
            cfg.arch.widths = {w[0], w[1], w[2]};
        } else if (key == "convnet_stages") {
            cfg.arch.convnet_stages.clear();
            for (const std::string& part : [&] {
                     std::vector<std::string> ps;
                     std::string cur;
                     for (char ch : val + ",") {
                         if (ch == ',') {
                             if (!trim(cur).empty()) ps.push_back(trim(cur));
                             cur.clear();
                         } else {
                             cur += ch;
                         }
                     }
                     return ps;
                 }()) {
                const auto colon = part.find(':');
                models::ConvStage st;
                st.c_out = std::stoi(part.substr(0, colon));
                st.stride = colon == std::string::npos ? 1 : std::stoi(part.substr(colon + 1));
                cfg.arch.convnet_stages.push_back(st);
            }
        } else if (key == "curvature") {
            cfg.arch.curvature = static_cast<real>(std::stod(val));
        } else if (key == "num_classes") {
            cfg.arch.num_classes = std::stoi(val);
        } else if (key == "init") {
            if (val == "identity") {
                cfg.arch.init = models::InitScheme::kIdentity;
            } else if (val == "normal") {
                cfg.arch.init = models::InitScheme::kNormalBaseline;
            } else {
                throw FormatError("config: unknown init " + val);
            }
        } else if (key == "gamma") {
            cfg.arch.gamma_mode = val == "per_channel" ? nn::GammaMode::kPerChannel
                                                       : nn::GammaMode::kScalar;
        } else if (key == "lr") {
            cfg.lr = static_cast<real>(std::stod(val));
        } else if (key == "weight_decay") {
            cfg.weight_decay = static_cast<real>(std::stod(val));
        } else if (key == "optimizer") {
            if (val == "adam") {
                cfg.optimizer = optim::Kind::kAdam;
            } else if (val == "sgd") {
                cfg.optimizer = optim::Kind::kSgd;
            } else {
                throw FormatError("config: unknown optimizer " + val);
            }
        } else if (key == "momentum") {
            cfg.momentum = static_cast<real>(std::stod(val));
        } else if (key == "batch_size") {
            cfg.batch_size = std::stoi(val);
        } else if (key == "epochs") {
            cfg.epochs = std::stoi(val);
        } else if (key == "seed") {
            cfg.seed = std::stoull(val);
        } else if (key == "bn") {
            if (val == "midpoint") {
                cfg.bn_mode = nn::BnMode::kMidpoint;
            } else if (val == "frechet") {
                cfg.bn_mode = nn::BnMode::kFrechet;
            } else {
                throw FormatError("config: unknown bn mode " + val);
            }
        } else if (key == "augment") {
            cfg.augment = parse_bool(val, key);
        } else if (key == "data_path") {
            cfg.data_path = val;
        } else if (key == "out_dir") {
            cfg.out_dir = val;
        } else if (key == "subset") {
            cfg.subset = static_cast<std::size_t>(std::stoull(val));
        } else if (key == "threads") {
            cfg.threads = std::stoi(val);
        } else {
            throw FormatError("config: unknown key " + key);
        }
    }
    return cfg;
}

TrainConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

real cross_entropy(const Tensor& scores, const std::vector<std::int32_t>& labels) {
    return elem::softmax_xent(scores, labels, nullptr).at(0);
}

namespace {

const char* bn_name(nn::BnMode m) { return m == nn::BnMode::kMidpoint ? "midpoint" : "frechet"; }

std::string fmt_real(real v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", static_cast<double>(v));
    return buf;
}

std::size_t argmax_row(const Tensor& t, std::size_t row) {
    const real* p = t.row_ptr(row);
    std::size_t best = 0;
    for (std::size_t i = 1; i < t.cols(); ++i) {
        if (p[i] > p[best]) best = i;
    }
    return best;
}

Tensor assemble_batch(const data::Dataset& ds, const std::vector<std::size_t>& order,
                      std::size_t begin, std::size_t count, bool do_augment, Rng& rng) {
    const std::size_t px = static_cast<std::size_t>(ds.hw) * ds.hw;
    const std::size_t C = ds.images.cols();
    TensorBuf out({count * px, C});
    real* po = out.data();
    for (std::size_t b = 0; b < count; ++b) {
        Tensor img = ds.sample(order[begin + b]);
        if (do_augment) img = data::augment(img, rng, ds.hw);
        const real* pi = img.data();
        for (std::size_t i = 0; i < px * C; ++i) po[b * px * C + i] = pi[i];
    }
    return out.freeze();
}

} // namespace

std::string metrics_csv(const std::vector<EpochRow>& rows) {
    std::string out = "epoch,train_loss,train_acc,test_acc,wall_seconds,bn_mode\n";
    for (const EpochRow& r : rows) {
        char wall[32];
        std::snprintf(wall, sizeof(wall), "%.3f", r.wall_seconds);
        out += std::to_string(r.epoch) + "," + fmt_real(r.train_loss) + "," + fmt_real(r.train_acc) +
               "," + fmt_real(r.test_acc) + "," + wall + "," + bn_name(r.bn_mode) + "\n";
    }
    return out;
}

EvalResult evaluate(models::Model& model, const data::Dataset& ds, int batch_size,
                    nn::BnMode bn_mode) {
    const std::size_t n = ds.size();
    if (n < 2) throw ContractError("evaluate: need at least 2 samples (batch statistics)");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng no_rng(0);
    real loss_sum = 0;
    std::size_t correct = 0, seen = 0;
    std::size_t begin = 0;
    while (begin < n) {
        std::size_t count = std::min<std::size_t>(batch_size, n - begin);
        if (n - begin - count == 1) count += 1; // batch norm needs >= 2 points
        Tensor batch = assemble_batch(ds, order, begin, count, false, no_rng);
        Tensor scores = models::forward(model, batch, static_cast<int>(count), bn_mode);
        std::vector<std::int32_t> labels(ds.labels.begin() + begin,
                                         ds.labels.begin() + begin + count);
        loss_sum += cross_entropy(scores, labels) * real(count);
        for (std::size_t b = 0; b < count; ++b) {
            if (static_cast<std::int32_t>(argmax_row(scores, b)) == labels[b]) ++correct;
        }
        seen += count;
        begin += count;
    }
    return {loss_sum / real(seen), real(correct) / real(seen)};
}

TrainResult train(const TrainConfig& config) {
    config.validate();
    set_num_threads(config.threads);
    if (!config.out_dir.empty()) fs::create_directories(config.out_dir);
    const auto out_path = [&](const std::string& name) {
        return config.out_dir.empty() ? name : (fs::path(config.out_dir) / name).string();
    };

    data::Dataset train_ds = data::load_cifar10_train(config.data_path, config.subset);
    data::Dataset test_ds =
        data::load_cifar10_test(config.data_path, config.subset ? config.subset / 2 : 0);

    Rng rng(config.seed);
    models::Model model = models::build_model(config.arch, rng);

    // Run metadata: artifact choices that the metrics CSV cannot carry.
    {
        std::ofstream meta(out_path("run_meta.txt"));
        meta << "bn_mode = " << bn_name(config.bn_mode) << "\n";
        meta << "loss = cross_entropy_on_mlr_scores\n";
        meta << "global_pooling = poincare_midpoint_over_spatial_positions\n";
        meta << "running_statistics = disabled (eval reuses batch statistics)\n";
        meta << "gamma_mode = "
             << (config.arch.gamma_mode == nn::GammaMode::kScalar ? "scalar" : "per_channel")
             << "\n";
        meta << "parameters = " << models::count_params(model) << "\n";
        for (const std::string& note : model.init_notes) meta << "init_note: " << note << "\n";
    }

    optim::Options oopt;
    oopt.kind = config.optimizer;
    oopt.lr = config.lr;
    oopt.weight_decay = config.weight_decay;
    oopt.momentum = config.momentum;
    optim::State ostate = optim::State::make(config.optimizer, model.params);

    TrainResult result;
    result.metrics_path = out_path("metrics.csv");
    result.checkpoint_path = out_path("checkpoint.prn");

    const std::size_t n = train_ds.size();
    const std::size_t steps = n / static_cast<std::size_t>(config.batch_size);
    if (steps == 0) throw ContractError("train: subset smaller than one batch");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    bool have_checkpoint = false;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        // Fisher-Yates with the run rng; the draw order is part of the
        // determinism contract.
        for (std::size_t i = n - 1; i > 0; --i) {
            const std::size_t j = rng.uniform_int(i + 1);
            std::swap(order[i], order[j]);
        }
        real loss_sum = 0;
        std::size_t correct = 0, seen = 0;
        for (std::size_t s = 0; s < steps; ++s) {
            const std::size_t begin = s * config.batch_size;
            Tensor batch =
                assemble_batch(train_ds, order, begin, config.batch_size, config.augment, rng);
            auto labels = std::make_shared<std::vector<std::int32_t>>();
            for (int b = 0; b < config.batch_size; ++b) {
                labels->push_back(train_ds.labels[order[begin + b]]);
            }
            Tape tape;
            Graph g(&tape);
            std::vector<Var> pvars;
            Var scores = models::forward_scores(g, model, batch, config.batch_size, config.bn_mode,
                                                &pvars);
            Var loss = g.softmax_xent(scores, labels);
            const real loss_v = loss.v.at(0);
            if (!std::isfinite(loss_v)) {
                throw DivergedError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                    " step " + std::to_string(s) + "; last good checkpoint: " +
                                    (have_checkpoint ? result.checkpoint_path : "<none>"));
            }
            GradMap grads = tape.backward(loss.id);
            std::vector<Tensor> pgrads(model.params.size());
            for (std::size_t pi = 0; pi < pvars.size(); ++pi) {
                if (const Tensor* gt = grads.find(pvars[pi].id)) pgrads[pi] = *gt;
            }
            optim::StepResult sr = optim::step(model.params, pgrads, ostate, oopt);
            if (!sr.applied) {
                std::fprintf(stderr, "[train] %s (epoch %d step %zu)\n", sr.diagnostic.c_str(),
                             epoch, s);
            }
            loss_sum += loss_v * real(config.batch_size);
            for (int b = 0; b < config.batch_size; ++b) {
                if (static_cast<std::int32_t>(argmax_row(scores.v, b)) == (*labels)[b]) ++correct;
            }
            seen += config.batch_size;
        }
        for (const auto& p : model.params) {
            if (!p.value.all_finite()) {
                throw DivergedError("train: parameter " + p.name + " left the finite range");
            }
        }
        EvalResult ev = evaluate(model, test_ds, config.batch_size, config.bn_mode);
        const auto t1 = std::chrono::steady_clock::now();
        EpochRow row;
        row.epoch = epoch;
        row.train_loss = loss_sum / real(seen);
        row.train_acc = real(correct) / real(seen);
        row.test_acc = ev.accuracy;
        row.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
        row.bn_mode = config.bn_mode;
        result.history.push_back(row);

        std::ofstream csv(result.metrics_path);
        csv << metrics_csv(result.history);
        ckpt::save_checkpoint(model, &ostate, static_cast<std::uint64_t>(epoch), rng,
                              result.checkpoint_path);
        have_checkpoint = true;
    }
    return result;
}

} // namespace presnet::train
