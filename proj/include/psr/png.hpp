#pragma once

#include <string>

#include "psr/tensor.hpp"

namespace psr {

// 8-bit grayscale PNG of a [H, W] or [1, H, W] frame, linearly normalized
// per frame (min -> black, max -> white). Deterministic bytes.
void write_gray_png(const std::string& path, const Tensor& frame);

}  // namespace psr
