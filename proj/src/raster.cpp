#include "fencepipe/raster.hpp"

#include <algorithm>

namespace fencepipe {

std::size_t count_positive(const BinaryMask& mask) {
    std::size_t n = 0;
    for (auto v : mask.data) {
        n += v != 0 ? 1 : 0;
    }
    return n;
}

Image image_from_tensor(const Tensor& t) {
    if (t.rank() != 3) {
        throw DimensionError("image_from_tensor: expected [H, W, C], got " + shape_str(t.shape()));
    }
    Image img(t.dim(1), t.dim(0), t.dim(2));
    std::copy(t.data().begin(), t.data().end(), img.data.begin());
    return img;
}

}  // namespace fencepipe
