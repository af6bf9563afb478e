// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <optional>
#include <thread>
#include <vector>

namespace ira {

/// Outcome of one task: either a value or the exception it threw.
template <typename T>
struct Outcome {
    std::optional<T> value;
    std::exception_ptr error;

    [[nodiscard]] bool ok() const { return value.has_value(); }
};

/// Runs fn(0..n-1) on up to `workers` threads. Results come back in index
/// order regardless of completion order, so reductions stay deterministic.
template <typename T>
std::vector<Outcome<T>> parallel_map(std::size_t n, std::size_t workers, const std::function<T(std::size_t)>& fn) {
    std::vector<Outcome<T>> out(n);
    auto run = [&](std::size_t i) {
        try {
            out[i].value.emplace(fn(i));
        } catch (...) {
            out[i].error = std::current_exception();
        }
    };
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) run(i);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) run(i);
        });
    }
    for (auto& t : pool) t.join();
    return out;
}

}  // namespace ira
