#pragma once

#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "ddl/common.hpp"

namespace ddl {

// Minimal fork-join pool for data-parallel loops inside ops. Work is split
// into fixed index ranges with disjoint outputs, so results are bitwise
// identical for any worker count (including 1). Worker count comes from
// DDL_THREADS, default min(hardware, 4).
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    int workers() const { return static_cast<int>(threads_.size()) + 1; }

    // Runs fn(chunk_begin, chunk_end) over [begin, end) split into one
    // contiguous chunk per worker (calling thread included).
    void parallel_for(i64 begin, i64 end, const std::function<void(i64, i64)>& fn) {
        i64 total = end - begin;
        int n = workers();
        if (total <= 0) return;
        if (n == 1 || total == 1) {
            fn(begin, end);
            return;
        }
        if (static_cast<i64>(n) > total) n = static_cast<int>(total);
        i64 chunk = (total + n - 1) / n;
        {
            std::unique_lock<std::mutex> lock(mu_);
            job_ = &fn;
            job_begin_ = begin;
            job_end_ = end;
            job_chunk_ = chunk;
            next_chunk_ = 1; // chunk 0 belongs to the calling thread
            pending_ = static_cast<int>((total + chunk - 1) / chunk) - 1;
            ++epoch_;
        }
        cv_.notify_all();
        fn(begin, std::min(end, begin + chunk));
        std::unique_lock<std::mutex> lock(mu_);
        done_cv_.wait(lock, [&] { return pending_ == 0; });
        job_ = nullptr;
    }

private:
    ThreadPool() {
        int n = 0;
        if (const char* env = std::getenv("DDL_THREADS")) n = std::atoi(env);
        if (n <= 0) {
            unsigned hw = std::thread::hardware_concurrency();
            n = static_cast<int>(hw == 0 ? 1 : std::min(hw, 4u));
        }
        for (int i = 1; i < n; ++i)
            threads_.emplace_back([this] { worker_loop(); });
    }

    ~ThreadPool() {
        {
            std::unique_lock<std::mutex> lock(mu_);
            stop_ = true;
            ++epoch_;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void worker_loop() {
        u64 seen = 0;
        while (true) {
            std::unique_lock<std::mutex> lock(mu_);
            cv_.wait(lock, [&] { return stop_ || epoch_ != seen; });
            if (stop_) return;
            seen = epoch_;
            while (job_ && pending_ > 0) {
                i64 idx = next_chunk_++;
                i64 b = job_begin_ + idx * job_chunk_;
                if (b >= job_end_) break;
                i64 e = std::min(job_end_, b + job_chunk_);
                const auto* fn = job_;
                lock.unlock();
                (*fn)(b, e);
                lock.lock();
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(i64, i64)>* job_ = nullptr;
    i64 job_begin_ = 0, job_end_ = 0, job_chunk_ = 0, next_chunk_ = 0;
    int pending_ = 0;
    u64 epoch_ = 0;
    bool stop_ = false;
};

inline void parallel_for(i64 begin, i64 end, const std::function<void(i64, i64)>& fn) {
    ThreadPool::instance().parallel_for(begin, end, fn);
}

} // namespace ddl
