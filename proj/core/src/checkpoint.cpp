#include "presnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "presnet/error.hpp"

namespace presnet::ckpt {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

struct Writer {
    std::ofstream out;
    explicit Writer(const std::string& path) : out(path, std::ios::binary) {
        if (!out) throw FormatError("checkpoint: cannot write " + path);
    }
    template <typename T>
    void pod(T v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void str(const std::string& s) {
        pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        out.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    void f64_block(const Tensor& t) {
        for (std::size_t i = 0; i < t.size(); ++i) pod<double>(static_cast<double>(t.at(i)));
    }
};

struct Reader {
    std::ifstream in;
    std::string path;
    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw FormatError("checkpoint: cannot open " + p);
    }
    template <typename T>
    T pod() {
        T v{};
        in.read(reinterpret_cast<char*>(&v), sizeof(T));
        if (!in) throw FormatError("checkpoint: truncated file " + path);
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint32_t>();
        std::string s(n, '\0');
        in.read(s.data(), n);
        if (!in) throw FormatError("checkpoint: truncated file " + path);
        return s;
    }
    Tensor f64_block(Shape shape) {
        const std::size_t n = shape_numel(shape);
        std::vector<real> d(n);
        for (std::size_t i = 0; i < n; ++i) d[i] = static_cast<real>(pod<double>());
        return Tensor(std::move(shape), std::move(d));
    }
};

void write_arch(Writer& w, const models::ArchSpec& a) {
    w.pod<std::uint32_t>(a.kind == models::ArchSpec::Kind::kResNet ? 0u : 1u);
    w.pod<std::int32_t>(a.depth);
    for (int wi : a.widths) w.pod<std::int32_t>(wi);
    w.pod<double>(static_cast<double>(a.curvature));
    w.pod<std::int32_t>(a.num_classes);
    w.pod<std::uint32_t>(a.init == models::InitScheme::kIdentity ? 0u : 1u);
    w.pod<std::uint32_t>(a.gamma_mode == nn::GammaMode::kScalar ? 0u : 1u);
    w.pod<std::int32_t>(a.image_hw);
    w.pod<std::int32_t>(a.image_channels);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(a.convnet_stages.size()));
    for (const auto& s : a.convnet_stages) {
        w.pod<std::int32_t>(s.c_out);
        w.pod<std::int32_t>(s.stride);
    }
}

models::ArchSpec read_arch(Reader& r) {
    models::ArchSpec a;
    a.kind = r.pod<std::uint32_t>() == 0 ? models::ArchSpec::Kind::kResNet
                                         : models::ArchSpec::Kind::kConvNet;
    a.depth = r.pod<std::int32_t>();
    for (int& wi : a.widths) wi = r.pod<std::int32_t>();
    a.curvature = static_cast<real>(r.pod<double>());
    a.num_classes = r.pod<std::int32_t>();
    a.init = r.pod<std::uint32_t>() == 0 ? models::InitScheme::kIdentity
                                         : models::InitScheme::kNormalBaseline;
    a.gamma_mode = r.pod<std::uint32_t>() == 0 ? nn::GammaMode::kScalar : nn::GammaMode::kPerChannel;
    a.image_hw = r.pod<std::int32_t>();
    a.image_channels = r.pod<std::int32_t>();
    const auto ns = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < ns; ++i) {
        models::ConvStage s;
        s.c_out = r.pod<std::int32_t>();
        s.stride = r.pod<std::int32_t>();
        a.convnet_stages.push_back(s);
    }
    return a;
}

} // namespace

void save_checkpoint(const models::Model& model, const optim::State* opt, std::uint64_t epoch,
                     const Rng& rng, const std::string& path) {
    Writer w(path);
    w.out.write(kMagic, 4);
    w.pod<std::uint32_t>(kVersion);
    write_arch(w, model.arch);
    w.pod<std::uint64_t>(model.params.size());
    for (const auto& p : model.params) {
        w.str(p.name);
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(p.value.shape().size()));
        for (std::size_t d : p.value.shape()) w.pod<std::uint64_t>(d);
        w.f64_block(p.value);
    }
    w.pod<std::uint8_t>(opt ? 1 : 0);
    if (opt) {
        w.pod<std::uint32_t>(opt->kind == optim::Kind::kAdam ? 0u : 1u);
        w.pod<std::int64_t>(opt->t);
        for (const Tensor& t : opt->m) w.f64_block(t);
        if (opt->kind == optim::Kind::kAdam) {
            for (const Tensor& t : opt->v) w.f64_block(t);
        }
    }
    w.pod<std::uint64_t>(epoch);
    w.pod<std::uint64_t>(rng.seed());
    w.pod<std::uint64_t>(rng.counter());
    if (!w.out) throw FormatError("checkpoint: write failed for " + path);
}

Snapshot load_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.in.read(magic, 4);
    if (!r.in || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("checkpoint: bad magic in " + path);
    }
    const auto version = r.pod<std::uint32_t>();
    if (version != kVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " in " +
                          path);
    }
    models::ArchSpec arch = read_arch(r);
    Rng dummy(0);
    Snapshot snap;
    snap.model = models::build_model(arch, dummy);
    const auto n_params = r.pod<std::uint64_t>();
    if (n_params != snap.model.params.size()) {
        throw FormatError("checkpoint: parameter count mismatch in " + path);
    }
    for (auto& p : snap.model.params) {
        const std::string name = r.str();
        if (name != p.name) throw FormatError("checkpoint: parameter order mismatch at " + name);
        const auto ndim = r.pod<std::uint32_t>();
        Shape shape(ndim);
        for (auto& d : shape) d = static_cast<std::size_t>(r.pod<std::uint64_t>());
        if (shape != p.value.shape()) throw FormatError("checkpoint: shape mismatch at " + name);
        p.value = r.f64_block(std::move(shape));
    }
    if (r.pod<std::uint8_t>()) {
        optim::State st;
        st.kind = r.pod<std::uint32_t>() == 0 ? optim::Kind::kAdam : optim::Kind::kSgd;
        st.t = r.pod<std::int64_t>();
        for (const auto& p : snap.model.params) st.m.push_back(r.f64_block(p.value.shape()));
        if (st.kind == optim::Kind::kAdam) {
            for (const auto& p : snap.model.params) st.v.push_back(r.f64_block(p.value.shape()));
        }
        snap.opt = std::move(st);
    }
    snap.epoch = r.pod<std::uint64_t>();
    snap.rng_seed = r.pod<std::uint64_t>();
    snap.rng_counter = r.pod<std::uint64_t>();
    return snap;
}

} // namespace presnet::ckpt
