// Copyright (c) the timeweave authors. All rights reserved.
// Licensed under the Apache 2.0 License.

#pragma once

#include <cstdint>

namespace timeweave {

/// Maintenance cost counters. Wall time is deliberately not part of this
/// set; costs are measured in counted operations so runs are comparable
/// across machines and transcripts stay deterministic.
struct CostCounters {
    std::uint64_t hash_ops = 0;
    std::uint64_t hashed_bytes = 0;
    std::uint64_t disk_blocks = 0;
    std::uint64_t bytes_sent = 0;

    CostCounters& operator+=(const CostCounters& o) {
        hash_ops += o.hash_ops;
        hashed_bytes += o.hashed_bytes;
        disk_blocks += o.disk_blocks;
        bytes_sent += o.bytes_sent;
        return *this;
    }
    CostCounters operator-(const CostCounters& o) const {
        return {hash_ops - o.hash_ops, hashed_bytes - o.hashed_bytes,
                disk_blocks - o.disk_blocks, bytes_sent - o.bytes_sent};
    }
};

namespace detail {
inline CostCounters*& counter_sink() {
    thread_local CostCounters* sink = nullptr;
    return sink;
}
}  // namespace detail

inline void count_hash(std::uint64_t bytes) {
    if (auto* s = detail::counter_sink()) {
        s->hash_ops += 1;
        s->hashed_bytes += bytes;
    }
}
inline void count_disk_blocks(std::uint64_t n) {
    if (auto* s = detail::counter_sink()) s->disk_blocks += n;
}
inline void count_bytes_sent(std::uint64_t n) {
    if (auto* s = detail::counter_sink()) s->bytes_sent += n;
}

/// Installs a counter sink for the current thread while alive.
class CounterScope {
public:
    explicit CounterScope(CostCounters& c) : prev_(detail::counter_sink()) {
        detail::counter_sink() = &c;
    }
    ~CounterScope() { detail::counter_sink() = prev_; }
    CounterScope(const CounterScope&) = delete;
    CounterScope& operator=(const CounterScope&) = delete;

private:
    CostCounters* prev_;
};

}  // namespace timeweave
