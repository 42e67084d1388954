#pragma once

#include "histo/common.hpp"

namespace histo::image {

/// Decodes a PNG file into a float tensor of shape 3×H×W with values in
/// [0,1]. Grayscale and alpha inputs are converted to RGB. Throws UserError
/// naming the file when it cannot be decoded.
torch::Tensor read_png(const fs::path& path);

/// Encodes a uint8 tensor of shape H×W×3 (or a float tensor in [0,1], which
/// is quantized) as an RGB PNG.
void write_png(const fs::path& path, const torch::Tensor& rgb);

}  // namespace histo::image
