#pragma once

#include <optional>
#include <string>

#include "cat/contrastive.hpp"
#include "cat/encoder.hpp"

namespace cat {

struct LoadedCheckpoint {
    EncoderParams encoder;
    std::optional<ProjectionParams> projection;
};

// Binary checkpoint of model weights: the encoder config, the class count,
// every named encoder array in canonical order, and optionally the
// contrastive projection head, all with raw double payloads so a save/load
// cycle reproduces the parameters bit for bit.
void save_checkpoint(const std::string& path, const EncoderParams& params,
                     const ProjectionParams* projection = nullptr);
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace cat
