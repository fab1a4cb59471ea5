#pragma once

#include <string>

#include "dpnet/tensor.hpp"

namespace dpnet {

// Binary netpbm I/O: P5 (PGM, 1 channel) and P6 (PPM, 3 channels), maxval 255
// only. Pixel values map linearly to [0,1]. Parse errors report the byte
// offset of the failure.
Tensor4 read_image(const std::string& path);
void write_pgm(const std::string& path, const Tensor4& t);  // (1,1,h,w)
void write_ppm(const std::string& path, const Tensor4& t);  // (1,3,h,w)

}  // namespace dpnet
