#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fern {

// Interleaved RGB rows, 8-bit, as stored in a binary P6 file.
struct PpmImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;  // height*width*3
};

PpmImage read_ppm(const std::string& path);
void write_ppm(const std::string& path, const PpmImage& img);

// 8-bit grayscale P5.
void write_pgm(const std::string& path, int width, int height, const std::vector<uint8_t>& gray);

// interleaved HWC -> planar CHW and back
std::vector<uint8_t> interleaved_to_chw(const PpmImage& img);
PpmImage chw_to_interleaved(const std::vector<uint8_t>& chw, int height, int width);

// Nearest-neighbor resize of a CHW u8 image.
std::vector<uint8_t> resize_nearest_chw(const std::vector<uint8_t>& chw, int channels, int h_in,
                                        int w_in, int h_out, int w_out);

}  // namespace fern
