#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace mcfnet {

enum class Split { train, val, test };

std::string to_string(Split split);
Split split_from_string(const std::string& s);

/// One (image, text, label) triple. The image is [H x W x C] row-major in [0, 1].
struct Sample {
  std::vector<float> image;
  std::vector<std::size_t> tokens;
  std::size_t label = 0;
  Split split = Split::train;

  friend bool operator==(const Sample&, const Sample&) = default;
};

}  // namespace mcfnet
