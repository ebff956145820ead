#pragma once

#include <filesystem>
#include <vector>

#include "layercake/image.hpp"

namespace layercake {

// 8-bit RGBA PNG. Quantization is round-half-up: q = floor(255*v + 0.5);
// loading maps q back to q/255. Output bytes depend only on pixel content.
void write_png(const std::filesystem::path& path, const RgbaImage& img);
RgbaImage read_png(const std::filesystem::path& path);

// The same encoder, to memory.
std::vector<unsigned char> encode_png(const RgbaImage& img);

}  // namespace layercake
