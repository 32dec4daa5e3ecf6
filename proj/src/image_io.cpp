#include "fern/image_io.hpp"

#include <fstream>

#include "fern/common.hpp"

namespace fern {

namespace {

// skips whitespace and '#' comment lines between header tokens
int read_header_int(std::istream& in, const std::string& path) {
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (std::isspace(ch)) {
      ch = in.get();
    } else {
      break;
    }
  }
  if (ch == EOF || !std::isdigit(ch)) throw DataError(path + ": malformed PPM header");
  int value = 0;
  while (ch != EOF && std::isdigit(ch)) {
    value = value * 10 + (ch - '0');
    ch = in.get();
  }
  return value;
}

}  // namespace

PpmImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open");
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '6') throw DataError(path + ": not a binary P6 PPM");
  PpmImage img;
  img.width = read_header_int(in, path);
  img.height = read_header_int(in, path);
  const int maxval = read_header_int(in, path);
  if (maxval != 255) throw DataError(path + ": only 8-bit PPM (maxval 255) supported");
  if (img.width <= 0 || img.height <= 0) throw DataError(path + ": bad dimensions");
  // the digit loop consumed the single whitespace after maxval; the stream is
  // now at the first pixel byte
  img.rgb.resize(static_cast<size_t>(img.width) * img.height * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size()))
    throw DataError(path + ": truncated pixel data");
  return img;
}

void write_ppm(const std::string& path, const PpmImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot open for writing");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw DataError(path + ": write failed");
}

void write_pgm(const std::string& path, int width, int height, const std::vector<uint8_t>& gray) {
  if (static_cast<size_t>(width) * height != gray.size())
    contract_fail("write_pgm: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot open for writing");
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()),
            static_cast<std::streamsize>(gray.size()));
  if (!out) throw DataError(path + ": write failed");
}

std::vector<uint8_t> interleaved_to_chw(const PpmImage& img) {
  const size_t hw = static_cast<size_t>(img.width) * img.height;
  std::vector<uint8_t> chw(hw * 3);
  for (size_t i = 0; i < hw; ++i)
    for (size_t c = 0; c < 3; ++c) chw[c * hw + i] = img.rgb[i * 3 + c];
  return chw;
}

PpmImage chw_to_interleaved(const std::vector<uint8_t>& chw, int height, int width) {
  PpmImage img;
  img.width = width;
  img.height = height;
  const size_t hw = static_cast<size_t>(width) * height;
  if (chw.size() != hw * 3) contract_fail("chw_to_interleaved: size mismatch");
  img.rgb.resize(hw * 3);
  for (size_t i = 0; i < hw; ++i)
    for (size_t c = 0; c < 3; ++c) img.rgb[i * 3 + c] = chw[c * hw + i];
  return img;
}

std::vector<uint8_t> resize_nearest_chw(const std::vector<uint8_t>& chw, int channels, int h_in,
                                        int w_in, int h_out, int w_out) {
  if (chw.size() != static_cast<size_t>(channels) * h_in * w_in)
    contract_fail("resize_nearest_chw: size mismatch");
  std::vector<uint8_t> out(static_cast<size_t>(channels) * h_out * w_out);
  for (int c = 0; c < channels; ++c) {
    const uint8_t* src = chw.data() + static_cast<size_t>(c) * h_in * w_in;
    uint8_t* dst = out.data() + static_cast<size_t>(c) * h_out * w_out;
    for (int i = 0; i < h_out; ++i) {
      const int si = static_cast<int>((static_cast<int64_t>(i) * h_in) / h_out);
      for (int j = 0; j < w_out; ++j) {
        const int sj = static_cast<int>((static_cast<int64_t>(j) * w_in) / w_out);
        dst[static_cast<size_t>(i) * w_out + j] = src[static_cast<size_t>(si) * w_in + sj];
      }
    }
  }
  return out;
}

}  // namespace fern
