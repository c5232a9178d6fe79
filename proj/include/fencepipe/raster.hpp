#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fencepipe/error.hpp"
#include "fencepipe/tensor.hpp"

namespace fencepipe {

/// Interleaved row-major pixel grid: index (y * width + x) * channels + c.
/// The memory layout matches an [height, width, channels] Tensor.
template <typename T>
struct Raster {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;
    std::vector<T> data;

    Raster() = default;
    Raster(std::size_t w, std::size_t h, std::size_t c = 1, T fill = T{})
        : width(w), height(h), channels(c), data(w * h * c, fill) {}

    bool empty() const { return data.empty(); }
    std::size_t pixels() const { return width * height; }

    T& at(std::size_t x, std::size_t y, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
    const T& at(std::size_t x, std::size_t y, std::size_t c = 0) const {
        return data[(y * width + x) * channels + c];
    }

    bool same_dims(const Raster& other) const {
        return width == other.width && height == other.height && channels == other.channels;
    }

    friend bool operator==(const Raster&, const Raster&) = default;
};

/// RGB (or gray) pixels normalized to [0, 1].
using Image = Raster<double>;
/// Single channel, values in {0, 1}; 1 marks an insulator.
using BinaryMask = Raster<std::uint8_t>;
/// Single channel network output in [0, 1].
using ProbabilityMask = Raster<double>;

template <typename A, typename B>
void require_same_size(const Raster<A>& a, const Raster<B>& b, const char* what) {
    if (a.width != b.width || a.height != b.height) {
        throw DataError(std::string(what) + ": dimension mismatch " + std::to_string(a.width) + "x" +
                        std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                        std::to_string(b.height));
    }
}

std::size_t count_positive(const BinaryMask& mask);

/// [H, W, C] tensor view of a raster (copied).
template <typename T>
Tensor to_tensor(const Raster<T>& r) {
    std::vector<double> values(r.data.begin(), r.data.end());
    return Tensor(Shape{r.height, r.width, r.channels}, std::move(values));
}

Image image_from_tensor(const Tensor& t);

}  // namespace fencepipe
