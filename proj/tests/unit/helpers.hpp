#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "fencepipe/raster.hpp"
#include "fencepipe/rng.hpp"
#include "fencepipe/tensor.hpp"

namespace testutil {

inline fencepipe::Tensor random_tensor(fencepipe::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    fencepipe::Rng rng(seed);
    fencepipe::Tensor t(std::move(shape));
    for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
    return t;
}

inline fencepipe::BinaryMask random_mask(std::size_t w, std::size_t h, fencepipe::Rng& rng, double p = 0.5) {
    fencepipe::BinaryMask m(w, h, 1);
    for (auto& v : m.data) v = rng.bernoulli(p) ? 1 : 0;
    return m;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("fencepipe_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testutil
