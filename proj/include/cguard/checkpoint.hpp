#pragma once

#include <string>

#include "cguard/layers.hpp"

namespace cguard {

/// Everything needed to rebuild and evaluate a trained model.
struct ModelBundle {
  Network net;
  NormMode norm_mode = NormMode::None;
  bool with_intercept = true;
};

/// Binary checkpoint: "PMDN" magic, version, layer specs as
/// tag-length-value records, then little-endian float32 blobs for every
/// persistent tensor in layer order.
void save_checkpoint(Network& net, NormMode norm_mode, bool with_intercept,
                     const std::string& path);

ModelBundle load_checkpoint(const std::string& path);

}  // namespace cguard
