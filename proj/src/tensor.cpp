#include "adaptsr/tensor.hpp"

#include <algorithm>

#include "adaptsr/errors.hpp"

namespace adaptsr {

Tensor4 Tensor4::stack(const std::vector<Image>& images) {
    if (images.empty()) {
        throw DimensionError("cannot stack an empty image list");
    }
    const Image& first = images.front();
    Tensor4 t(static_cast<int>(images.size()), first.c, first.h, first.w);
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (!images[i].same_shape(first)) {
            throw DimensionError("stacked images must share a shape");
        }
        std::copy(images[i].px.begin(), images[i].px.end(),
                  t.data.begin() + static_cast<std::ptrdiff_t>(i * images[i].px.size()));
    }
    return t;
}

Image Tensor4::image(int index) const {
    Image img(c, h, w);
    const std::size_t len = img.px.size();
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(len * index), len, img.px.begin());
    return img;
}

void Param::zero_grad() {
    grad.setZero(value.rows(), value.cols());
}

void Param::ensure_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
        zero_grad();
    }
}

} // namespace adaptsr
