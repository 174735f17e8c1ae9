#pragma once

#include <chrono>
#include <ctime>

namespace tierkd {

class Stopwatch {
  public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}

    [[nodiscard]] double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

    /// Seconds since construction or the previous lap.
    double lap() {
        const auto now = std::chrono::steady_clock::now();
        const double s = std::chrono::duration<double>(now - start_).count();
        start_ = now;
        return s;
    }

  private:
    std::chrono::steady_clock::time_point start_;
};

/// CPU seconds consumed by the calling thread. Time spent blocked or
/// preempted does not count, so stage costs stay meaningful when more
/// threads than cores are running.
inline double thread_cpu_seconds() noexcept {
    timespec ts{};
    clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
    return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

/// Stopwatch over the calling thread's CPU time. Must be used from one thread.
class CpuStopwatch {
  public:
    CpuStopwatch() : start_(thread_cpu_seconds()) {}

    [[nodiscard]] double seconds() const noexcept { return thread_cpu_seconds() - start_; }

    double lap() noexcept {
        const double now = thread_cpu_seconds();
        const double s = now - start_;
        start_ = now;
        return s;
    }

  private:
    double start_;
};

}  // namespace tierkd
