#pragma once

#include <optional>
#include <vector>

#include "hpgn/tape.hpp"

namespace hpgn {

// Everything one forward pass hands to the losses and to retrieval.
template <class T>
struct ForwardOutput {
  std::optional<Var<T>> embed1;  // CBR1 over the summed branch GAPs; absent for baseline
  std::optional<Var<T>> logits1;
  Var<T> embed2;                 // CBR2 over the global max pool
  Var<T> logits2;
  std::vector<Var<T>> branch_pooled;  // per pyramid branch GAP output [b, c0]
  Var<T> max_pooled;                  // GMP output [b, c0]
};

}  // namespace hpgn
