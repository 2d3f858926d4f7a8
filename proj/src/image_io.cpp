#include "iip/image_io.hpp"

#include <algorithm>
#include <cmath>

#include "iip/binio.hpp"

namespace iip::imageio {

void write_ppm(const sim::Frame& frame, const std::string& path) {
  io::ByteWriter w;
  const std::string header =
      "P6\n" + std::to_string(frame.width) + " " + std::to_string(frame.height) + "\n255\n";
  w.raw(header.data(), header.size());
  for (int i = 0; i < frame.height; ++i)
    for (int j = 0; j < frame.width; ++j)
      for (int c = 0; c < 3; ++c) {
        const float v = frame.at(i, j, std::min(c, frame.channels - 1));
        w.u8(static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
      }
  io::write_file(path, w.buf);
}

sim::Frame hstrip(const std::vector<const sim::Frame*>& frames, int gutter) {
  if (frames.empty()) return {};
  const sim::Frame& f0 = *frames.front();
  sim::Frame out;
  out.height = f0.height;
  out.channels = f0.channels;
  out.width = static_cast<int>(frames.size()) * f0.width + (static_cast<int>(frames.size()) - 1) * gutter;
  out.pixels.assign(static_cast<size_t>(out.height) * out.width * out.channels, 0.1f);
  int x = 0;
  for (const sim::Frame* f : frames) {
    for (int i = 0; i < f->height; ++i)
      for (int j = 0; j < f->width; ++j)
        for (int c = 0; c < f->channels; ++c)
          out.pixels[(static_cast<size_t>(i) * out.width + x + j) * out.channels + c] =
              f->at(i, j, c);
    x += f->width + gutter;
  }
  return out;
}

sim::Frame diff_frame(const sim::Frame& a, const sim::Frame& b, float gain) {
  sim::Frame out = a;
  for (size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = std::clamp(std::abs(a.pixels[i] - b.pixels[i]) * gain, 0.0f, 1.0f);
  return out;
}

}  // namespace iip::imageio
