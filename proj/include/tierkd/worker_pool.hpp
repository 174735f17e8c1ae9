#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace tierkd {

/// Fixed-size pool that runs indexed task batches to completion.
///
/// `run(n, fn)` calls fn(i) for every i in [0, n) across the pool (the
/// calling thread participates) and returns when all calls finished. The
/// first exception thrown by a task is rethrown from `run`.
class WorkerPool {
  public:
    explicit WorkerPool(std::size_t workers) : workers_(std::max<std::size_t>(1, workers)) {
        threads_.reserve(workers_ - 1);
        for (std::size_t i = 0; i + 1 < workers_; ++i) threads_.emplace_back([this] { loop(); });
    }

    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;

    ~WorkerPool() {
        {
            std::lock_guard lock(mutex_);
            stopping_ = true;
        }
        wake_.notify_all();
        for (auto& t : threads_) t.join();
    }

    [[nodiscard]] std::size_t size() const noexcept { return workers_; }

    void run(std::size_t count, const std::function<void(std::size_t)>& fn) {
        if (count == 0) return;
        if (workers_ == 1 || count == 1) {
            for (std::size_t i = 0; i < count; ++i) fn(i);
            return;
        }
        std::unique_lock lock(mutex_);
        job_ = &fn;
        job_count_ = count;
        next_ = 0;
        pending_ = count;
        error_ = nullptr;
        ++generation_;
        lock.unlock();
        wake_.notify_all();

        drain();

        lock.lock();
        done_.wait(lock, [this] { return pending_ == 0; });
        job_ = nullptr;
        if (error_) std::rethrow_exception(std::exchange(error_, nullptr));
    }

    /// Splits [0, n) into one contiguous chunk per worker: fn(chunk, begin, end).
    void run_chunks(std::size_t n, const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
        const std::size_t chunks = std::min(workers_, std::max<std::size_t>(1, n));
        run(chunks, [&](std::size_t c) { fn(c, n * c / chunks, n * (c + 1) / chunks); });
    }

  private:
    void loop() {
        std::size_t seen = 0;
        std::unique_lock lock(mutex_);
        for (;;) {
            wake_.wait(lock, [&] { return stopping_ || (job_ != nullptr && generation_ != seen); });
            if (stopping_) return;
            seen = generation_;
            lock.unlock();
            drain();
            lock.lock();
        }
    }

    void drain() {
        for (;;) {
            std::unique_lock lock(mutex_);
            if (job_ == nullptr || next_ >= job_count_) return;
            const std::size_t i = next_++;
            const auto* fn = job_;
            lock.unlock();
            try {
                (*fn)(i);
            } catch (...) {
                std::lock_guard guard(mutex_);
                if (!error_) error_ = std::current_exception();
            }
            lock.lock();
            if (--pending_ == 0) done_.notify_all();
        }
    }

    std::size_t workers_;
    std::vector<std::thread> threads_;
    std::mutex mutex_;
    std::condition_variable wake_;
    std::condition_variable done_;
    const std::function<void(std::size_t)>* job_ = nullptr;
    std::size_t job_count_ = 0;
    std::size_t next_ = 0;
    std::size_t pending_ = 0;
    std::size_t generation_ = 0;
    std::exception_ptr error_;
    bool stopping_ = false;
};

}  // namespace tierkd
