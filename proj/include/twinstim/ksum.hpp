#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <thread>
#include <vector>

namespace twinstim {

// Neumaier compensated accumulator.
struct Ksum {
    double sum = 0.0;
    double comp = 0.0;

    void add(double x) {
        const double t = sum + x;
        if (std::abs(sum) >= std::abs(x))
            comp += (sum - t) + x;
        else
            comp += (x - t) + sum;
        sum = t;
    }

    double value() const { return sum + comp; }
};

namespace detail {
constexpr std::size_t kBlock = 256;

template <class Fn>
void run_blocks(std::size_t n_blocks, int threads, Fn&& block_fn) {
    if (threads <= 1 || n_blocks <= 1) {
        for (std::size_t b = 0; b < n_blocks; ++b) block_fn(b);
        return;
    }
    std::vector<std::thread> pool;
    const std::size_t nt = std::min<std::size_t>(threads, n_blocks);
    for (std::size_t w = 0; w < nt; ++w) {
        pool.emplace_back([=, &block_fn] {
            for (std::size_t b = w; b < n_blocks; b += nt) block_fn(b);
        });
    }
    for (auto& t : pool) t.join();
}
} // namespace detail

// Deterministic reduction: fixed blocks of 256 indices, each block summed
// in index order with compensation, block partials combined in block order.
// The result is machine-identical for any thread count.
template <class Fn>
double det_sum(std::size_t n, int threads, Fn&& term) {
    if (n == 0) return 0.0;
    const std::size_t n_blocks = (n + detail::kBlock - 1) / detail::kBlock;
    std::vector<double> partial(n_blocks);
    detail::run_blocks(n_blocks, threads, [&](std::size_t b) {
        Ksum acc;
        const std::size_t lo = b * detail::kBlock;
        const std::size_t hi = std::min(n, lo + detail::kBlock);
        for (std::size_t i = lo; i < hi; ++i) acc.add(term(i));
        partial[b] = acc.value();
    });
    Ksum total;
    for (double p : partial) total.add(p);
    return total.value();
}

// Same contract for a vector-valued accumulation: `term(i, out)` adds
// index i's contribution into a zero-initialized scratch row.
template <class Fn>
std::vector<double> det_sum_vec(std::size_t n, std::size_t dim, int threads, Fn&& term) {
    std::vector<double> result(dim, 0.0);
    if (n == 0) return result;
    const std::size_t n_blocks = (n + detail::kBlock - 1) / detail::kBlock;
    std::vector<std::vector<double>> partial(n_blocks);
    detail::run_blocks(n_blocks, threads, [&](std::size_t b) {
        std::vector<Ksum> acc(dim);
        std::vector<double> row(dim);
        const std::size_t lo = b * detail::kBlock;
        const std::size_t hi = std::min(n, lo + detail::kBlock);
        for (std::size_t i = lo; i < hi; ++i) {
            std::fill(row.begin(), row.end(), 0.0);
            term(i, row.data());
            for (std::size_t d = 0; d < dim; ++d) acc[d].add(row[d]);
        }
        partial[b].resize(dim);
        for (std::size_t d = 0; d < dim; ++d) partial[b][d] = acc[d].value();
    });
    std::vector<Ksum> total(dim);
    for (const auto& p : partial)
        for (std::size_t d = 0; d < dim; ++d) total[d].add(p[d]);
    for (std::size_t d = 0; d < dim; ++d) result[d] = total[d].value();
    return result;
}

// Plain parallel loop (no reduction); used where outputs go to disjoint slots.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& body) {
    detail::run_blocks(n, threads, body);
}

} // namespace twinstim
