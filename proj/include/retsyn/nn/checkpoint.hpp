#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "retsyn/nn/layers.hpp"

namespace retsyn::nn {

// Self-describing checkpoint: a JSON header (model kind, architecture config,
// named parameter shapes, free-form extras such as schedule parameters)
// followed by one raw little-endian float32 blob.
//
//   RETSYN_CKPT 1
//   <header byte count>\n
//   <header json>\n
//   <float32 data>
void save_checkpoint(const std::string& path, const nlohmann::json& header,
                     const std::vector<Param*>& params);

// Returns the header; loads parameter values into `params` (matched by name,
// shapes must agree).
nlohmann::json load_checkpoint(const std::string& path, const std::vector<Param*>& params);

// Header-only peek (for model reconstruction before loading weights).
nlohmann::json read_checkpoint_header(const std::string& path);

}  // namespace retsyn::nn
