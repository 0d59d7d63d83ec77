#pragma once

#include <array>
#include <string>

#include "clipdecomp/model.hpp"
#include "clipdecomp/tensor.hpp"

namespace clipdecomp {

// Per-channel normalization applied after scaling bytes to [0, 1]. Defaults
// are the standard CLIP preprocessing constants.
struct PpmOptions {
    std::array<double, 3> mean = {0.48145466, 0.4578275, 0.40821073};
    std::array<double, 3> std = {0.26862954, 0.26130258, 0.27577711};
};

// Binary P6, maxval 255 only; dims must match what the model expects.
ImageInput read_ppm(const std::string& path, std::size_t expected_height,
                    std::size_t expected_width, const PpmOptions& options = {});

// 8-bit binary P5, min-max scaled; a constant grid renders as mid-gray.
void write_pgm(const std::string& path, const Tensor& grid);

}  // namespace clipdecomp
