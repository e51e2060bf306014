#pragma once

#include <cstdint>
#include <random>

#include "stabletd/tensor.hpp"

namespace stabletd {

using Rng = std::mt19937_64;

// Derives an independent stream for sub-task `stream` (restart, trial, ...).
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return Rng(seq);
}

inline Matrix gaussian_matrix(Index rows, Index cols, Rng& rng, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
    return m;
}

inline DenseTensor gaussian_tensor(const Shape& shape, Rng& rng, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    DenseTensor t(shape);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

}  // namespace stabletd
