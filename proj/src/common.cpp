#include "spi/common.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace spi {

namespace {

int env_thread_count() {
    if (const char* env = std::getenv("SPI_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

std::atomic<int> g_max_threads{0}; // 0 = not yet initialized

// A tiny persistent pool. Jobs are (begin, end) block pairs computed up
// front; workers pull blocks by index so the partition never depends on
// scheduling.
class Pool {
  public:
    explicit Pool(int workers) {
        for (int i = 0; i < workers; ++i) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::unique_lock lk(m_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void run(const std::vector<std::pair<std::int64_t, std::int64_t>>& blocks,
             const std::function<void(std::int64_t, std::int64_t)>& fn) {
        std::unique_lock lk(m_);
        blocks_ = &blocks;
        fn_ = &fn;
        next_block_ = 0;
        pending_ = static_cast<int>(blocks.size());
        ++generation_;
        cv_.notify_all();
        done_cv_.wait(lk, [this] { return pending_ == 0; });
        blocks_ = nullptr;
        fn_ = nullptr;
    }

  private:
    void worker_loop() {
        std::uint64_t seen_gen = 0;
        while (true) {
            std::unique_lock lk(m_);
            cv_.wait(lk, [&] { return stop_ || (blocks_ && generation_ != seen_gen); });
            if (stop_) return;
            seen_gen = generation_;
            while (true) {
                std::size_t idx = next_block_;
                if (idx >= blocks_->size()) break;
                next_block_ = idx + 1;
                auto blk = (*blocks_)[idx];
                auto* fn = fn_;
                lk.unlock();
                (*fn)(blk.first, blk.second);
                lk.lock();
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::mutex m_;
    std::condition_variable cv_, done_cv_;
    std::vector<std::thread> threads_;
    const std::vector<std::pair<std::int64_t, std::int64_t>>* blocks_ = nullptr;
    const std::function<void(std::int64_t, std::int64_t)>* fn_ = nullptr;
    std::size_t next_block_ = 0;
    int pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

Pool* pool_instance(int workers) {
    static Pool* pool = new Pool(workers); // leaked on purpose; lives for the process
    return pool;
}

thread_local bool tl_inside_parallel = false;

} // namespace

int max_threads() {
    int v = g_max_threads.load(std::memory_order_relaxed);
    if (v == 0) {
        v = env_thread_count();
        g_max_threads.store(v, std::memory_order_relaxed);
    }
    return v;
}

void set_max_threads(int n) {
    SPI_CHECK(n >= 1, "thread count must be >= 1");
    g_max_threads.store(n, std::memory_order_relaxed);
}

namespace {

std::vector<std::pair<std::int64_t, std::int64_t>> make_blocks(std::int64_t n, int workers) {
    std::vector<std::pair<std::int64_t, std::int64_t>> blocks;
    std::int64_t chunk = (n + workers - 1) / workers;
    for (std::int64_t b = 0; b < n; b += chunk) blocks.emplace_back(b, std::min(n, b + chunk));
    return blocks;
}

} // namespace

int parallel_block_count(std::int64_t n) {
    if (n <= 0) return 0;
    int workers = max_threads();
    if (workers <= 1 || n == 1 || tl_inside_parallel) return 1;
    return static_cast<int>(make_blocks(n, workers).size());
}

void parallel_for_blocks(std::int64_t n,
                         const std::function<void(int, std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    int workers = max_threads();
    if (workers <= 1 || n == 1 || tl_inside_parallel) {
        fn(0, 0, n);
        return;
    }
    auto blocks = make_blocks(n, workers);
    Pool* pool = pool_instance(workers);
    std::function<void(std::int64_t, std::int64_t)> wrapped =
        [&fn, &blocks](std::int64_t lo, std::int64_t hi) {
            int index = 0;
            for (std::size_t i = 0; i < blocks.size(); ++i) {
                if (blocks[i].first == lo) {
                    index = static_cast<int>(i);
                    break;
                }
            }
            tl_inside_parallel = true;
            fn(index, lo, hi);
            tl_inside_parallel = false;
        };
    pool->run(blocks, wrapped);
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    parallel_for_blocks(n, [&fn](int, std::int64_t lo, std::int64_t hi) { fn(lo, hi); });
}

std::uint64_t fnv1a(const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

} // namespace spi
