#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "affectkit/tensor.hpp"

namespace affectkit {

/// A block of B fixed-length frame sequences with one (valence, arousal) label each.
struct SequenceBatch {
  Tensor frames;                                ///< [B,T,H,W,C], values in [-1,1]
  std::vector<std::array<double, 2>> labels;    ///< per sequence
  std::vector<std::string> source;              ///< utterance id per sequence
  std::vector<std::uint8_t> pad_mask;           ///< [B*T], 1 on repeated-pad frames

  std::size_t batch() const { return frames.rank() > 0 ? frames.dim(0) : 0; }
  std::size_t time() const { return frames.rank() > 1 ? frames.dim(1) : 0; }
};

}  // namespace affectkit
