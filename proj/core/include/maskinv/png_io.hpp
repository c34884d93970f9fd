// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "maskinv/types.hpp"

namespace maskinv {

// Strict 8-bit PNG I/O. Readers throw LoadError on unreadable files and
// ArgumentError when the color type or bit depth does not match.
GrayImage read_png_gray(const std::string& path);
RgbImage read_png_rgb(const std::string& path);
void write_png_gray(const std::string& path, const GrayImage& image);
void write_png_rgb(const std::string& path, const RgbImage& image);

}  // namespace maskinv
