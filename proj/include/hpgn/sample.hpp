#pragma once

#include <cstdint>
#include <string>

namespace hpgn {

// One image record: identity and camera ids are nonnegative; split is
// "train", "probe", "gallery" or empty.
struct Sample {
  std::string path;
  std::int64_t identity = 0;
  std::int64_t camera = 0;
  std::string split;

  bool operator==(const Sample&) const = default;
};

}  // namespace hpgn
