#pragma once

#include <string>

#include "sdopf/nets.hpp"

namespace sdopf {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Binary parameter snapshot: versioned header, then per tensor the name,
/// shape, dtype flag and row-major doubles (real plane first, imaginary
/// plane after it for complex tensors).
void save_checkpoint(const std::string& path, const NamedParams& params);

/// Loads values into existing parameters; every stored name must match an
/// entry with identical shape and dtype.
void load_checkpoint(const std::string& path, NamedParams& params);

}  // namespace sdopf
