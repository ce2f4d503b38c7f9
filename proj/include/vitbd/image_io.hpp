#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vitbd/tensor.hpp"

namespace vitbd {

// 8-bit binary PGM (P5). Values map [0,1] -> 0..255 with rounding; reading
// maps back as v/255.
void write_pgm(const std::string& path, const Tensor& image);  // [h,w]
Tensor read_pgm(const std::string& path);

// ASCII PBM (P1) for exact 0/1 masks.
void write_pbm(const std::string& path, const Tensor& mask);  // [h,w]
Tensor read_pbm(const std::string& path);

// 8-bit PNG: grayscale from [h,w], RGB from [3,h,w], values in [0,1].
// Each text pair lands in its own tEXt chunk (provenance, e.g. config hash).
void write_png(
    const std::string& path, const Tensor& image,
    const std::vector<std::pair<std::string, std::string>>& text = {});

}  // namespace vitbd
