#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "adaptsr/tensor.hpp"

namespace adaptsr {

/// Reads an 8-bit PNG (gray, RGB or RGBA; alpha dropped, gray replicated) into [0,1] RGB.
Image read_png(const std::filesystem::path& path);
/// Writes an RGB (or single-channel) image as 8-bit PNG, rounding and clamping to [0,255].
void write_png(const Image& img, const std::filesystem::path& path);

/// 8-bit interleaved RGB, rounded and clamped.
std::vector<std::uint8_t> to_rgb8(const Image& img);
Image from_rgb8(const std::vector<std::uint8_t>& rgb, int h, int w);

/// Encodes to baseline JPEG at `quality` with libjpeg and decodes it back.
Image jpeg_roundtrip(const Image& img, int quality);

} // namespace adaptsr
