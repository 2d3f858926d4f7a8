#pragma once

#include <string>
#include <vector>

#include "iip/sim.hpp"

namespace iip::imageio {

// binary P6, 8-bit; grayscale frames are replicated across channels
void write_ppm(const sim::Frame& frame, const std::string& path);

// side-by-side strip with a separator gutter
sim::Frame hstrip(const std::vector<const sim::Frame*>& frames, int gutter = 2);

// |a-b| amplified into the visible range
sim::Frame diff_frame(const sim::Frame& a, const sim::Frame& b, float gain = 4.0f);

}  // namespace iip::imageio
