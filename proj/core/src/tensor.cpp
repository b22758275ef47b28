#include "presnet/tensor.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <mutex>
#include <thread>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "presnet/error.hpp"
#include "presnet/parallel.hpp"

namespace presnet {

#ifdef __GLIBC__
// Layer tensors are megabyte-sized and recreated every step; without this
// glibc serves them via mmap/munmap and every pass refaults the pages.
namespace {
const bool malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
    return true;
}();
} // namespace
#endif

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape, std::vector<real> data, bool requires_grad)
    : shape_(std::move(shape)), size_(data.size()), requires_grad_(requires_grad) {
    if (shape_numel(shape_) != size_) {
        throw ContractError("Tensor: shape " + shape_str(shape_) + " does not match data length " +
                            std::to_string(size_));
    }
    std::shared_ptr<real[]> buf(new real[size_]);
    for (std::size_t i = 0; i < size_; ++i) buf[i] = data[i];
    data_ = std::move(buf);
}

Tensor::Tensor(Shape shape, std::shared_ptr<const real[]> data, std::size_t size)
    : shape_(std::move(shape)), data_(std::move(data)), size_(size) {
    if (shape_numel(shape_) != size_) {
        throw ContractError("Tensor: shape/payload mismatch");
    }
}

Tensor Tensor::zeros(Shape shape) {
    const std::size_t n = shape_numel(shape);
    std::shared_ptr<real[]> buf(new real[n]());
    return Tensor(std::move(shape), std::move(buf), n);
}

Tensor Tensor::full(Shape shape, real value) {
    const std::size_t n = shape_numel(shape);
    std::shared_ptr<real[]> buf(new real[n]);
    for (std::size_t i = 0; i < n; ++i) buf[i] = value;
    return Tensor(std::move(shape), std::move(buf), n);
}

Tensor Tensor::scalar(real value) { return Tensor({1, 1}, {value}); }

Tensor Tensor::row(std::vector<real> v) {
    Shape s{1, v.size()};
    return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::with_requires_grad(bool rg) const {
    Tensor t = *this;
    t.requires_grad_ = rg;
    return t;
}

bool Tensor::all_finite() const {
    for (std::size_t i = 0; i < size_; ++i) {
        if (!std::isfinite(data_[i])) return false;
    }
    return true;
}

Tensor Tensor::reshaped(Shape s) const {
    if (shape_numel(s) != size()) {
        throw ContractError("Tensor::reshaped: numel mismatch " + shape_str(shape_) + " -> " + shape_str(s));
    }
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
}

TensorBuf::TensorBuf(Shape shape) : shape_(std::move(shape)) {
    size_ = shape_numel(shape_);
    cols_ = shape_.empty() ? 1 : shape_.back();
    buf_ = std::shared_ptr<real[]>(new real[size_]());
}

TensorBuf::TensorBuf(Shape shape, uninit_t) : shape_(std::move(shape)) {
    size_ = shape_numel(shape_);
    cols_ = shape_.empty() ? 1 : shape_.back();
    buf_ = std::shared_ptr<real[]>(new real[size_]);
}

Tensor TensorBuf::freeze(bool requires_grad) {
    Tensor t(std::move(shape_), std::shared_ptr<const real[]>(std::move(buf_)), size_);
    return requires_grad ? t.with_requires_grad(true) : t;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ContractError("add: shape mismatch");
    TensorBuf out(a.shape(), kUninit);
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.at(i) + b.at(i);
    return out.freeze();
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ContractError("sub: shape mismatch");
    TensorBuf out(a.shape(), kUninit);
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.at(i) - b.at(i);
    return out.freeze();
}

Tensor scale(const Tensor& a, real s) {
    TensorBuf out(a.shape(), kUninit);
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.at(i) * s;
    return out.freeze();
}

real max_abs(const Tensor& a) {
    real m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.at(i)));
    return m;
}

real max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ContractError("max_abs_diff: shape mismatch");
    real m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
    return m;
}

// ---------------------------------------------------------------------------
// Row-parallel execution. A tiny persistent pool; see parallel.hpp for the
// determinism contract.

namespace {

#if defined(__x86_64__) || defined(__i386__)
inline void cpu_pause() { __builtin_ia32_pause(); }
#else
inline void cpu_pause() { std::this_thread::yield(); }
#endif

// Jobs are published through an epoch-stamped counter: the high half is the
// job generation, the low half the next chunk index. A claim through this
// counter always refers to the descriptor of the generation it carries, so
// a late-waking worker can never run a stale function on a fresh chunk.
class Pool {
public:
    static Pool& instance() {
        static Pool p;
        return p;
    }

    void resize(int n) {
        std::unique_lock lk(api_mu_);
        stop_workers();
        workers_target_ = n < 1 ? 1 : n;
        start_workers();
    }

    int size() {
        std::unique_lock lk(api_mu_);
        return workers_target_;
    }

    void run(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn, bool force) {
        std::unique_lock lk(api_mu_);
        const int nw = workers_target_;
        if (nw <= 1 || (!force && n < 2048)) {
            fn(0, n);
            return;
        }
        const std::uint32_t gen = static_cast<std::uint32_t>((ctr_.load() >> 32) + 1);
        Job& job = jobs_[gen & 1];
        job.fn = &fn;
        job.n = n;
        job.chunks = std::min<std::size_t>(static_cast<std::size_t>(nw) * 4, n);
        job.done.store(0, std::memory_order_relaxed);
        ctr_.store(static_cast<std::uint64_t>(gen) << 32, std::memory_order_release);
        if (sleepers_.load(std::memory_order_acquire) > 0) {
            std::lock_guard g(mu_);
            cv_.notify_all();
        }
        work();
        while (job.done.load(std::memory_order_acquire) != job.chunks) cpu_pause();
        job.fn = nullptr;
    }

private:
    struct Job {
        const std::function<void(std::size_t, std::size_t)>* fn = nullptr;
        std::size_t n = 0;
        std::size_t chunks = 0;
        std::atomic<std::size_t> done{0};
    };

    Pool() { start_workers(); }
    ~Pool() { stop_workers(); }

    void start_workers() {
        if (workers_target_ <= 1) return;
        stopping_.store(false);
        for (int i = 1; i < workers_target_; ++i) {
            threads_.emplace_back([this] { worker_main(); });
        }
    }

    void stop_workers() {
        stopping_.store(true);
        {
            std::lock_guard g(mu_);
            cv_.notify_all();
        }
        for (auto& t : threads_) t.join();
        threads_.clear();
        stopping_.store(false);
    }

    void worker_main() {
        std::uint32_t seen = 0;
        for (;;) {
            int spins = 0;
            for (;;) {
                if (stopping_.load(std::memory_order_relaxed)) return;
                const std::uint32_t gen =
                    static_cast<std::uint32_t>(ctr_.load(std::memory_order_acquire) >> 32);
                if (gen != seen) {
                    seen = gen;
                    break;
                }
                if (++spins > 20000) {
                    sleepers_.fetch_add(1);
                    std::unique_lock lk(mu_);
                    cv_.wait_for(lk, std::chrono::milliseconds(50), [&] {
                        return stopping_.load() ||
                               static_cast<std::uint32_t>(ctr_.load() >> 32) != seen;
                    });
                    sleepers_.fetch_sub(1);
                    spins = 0;
                }
                cpu_pause();
            }
            work();
        }
    }

    void work() {
        for (;;) {
            std::uint64_t cur = ctr_.load(std::memory_order_acquire);
            const std::uint32_t gen = static_cast<std::uint32_t>(cur >> 32);
            const std::uint32_t chunk = static_cast<std::uint32_t>(cur);
            Job& job = jobs_[gen & 1];
            const auto* fn = job.fn;
            const std::size_t n = job.n;
            const std::size_t chunks = job.chunks;
            if (!fn || chunk >= chunks) return;
            if (!ctr_.compare_exchange_weak(cur, cur + 1, std::memory_order_acq_rel)) continue;
            const std::size_t b = n * chunk / chunks;
            const std::size_t e = n * (chunk + 1) / chunks;
            if (b < e) (*fn)(b, e);
            job.done.fetch_add(1, std::memory_order_release);
        }
    }

    std::mutex api_mu_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::vector<std::thread> threads_;
    int workers_target_ = 1;
    std::atomic<bool> stopping_{false};
    std::atomic<std::uint64_t> ctr_{0};
    std::atomic<int> sleepers_{0};
    Job jobs_[2];
};

} // namespace

void set_num_threads(int n) { Pool::instance().resize(n); }
int num_threads() { return Pool::instance().size(); }

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                  bool force) {
    Pool::instance().run(n, fn, force);
}

} // namespace presnet
