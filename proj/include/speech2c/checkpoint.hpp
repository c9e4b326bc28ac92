#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "speech2c/model.hpp"
#include "speech2c/tensor.hpp"

namespace s2c {

// Single-file binary checkpoint: magic + version header, config fingerprint,
// step counter, string metadata, named tensors (row-major 64-bit values),
// optional Adam state aligned with the tensors in name order. Round-trips
// bit-exactly.
struct Checkpoint {
    std::uint32_t version = 1;
    std::uint64_t fingerprint = 0;
    std::uint64_t step = 0;
    std::map<std::string, std::string> metadata;
    std::map<std::string, TensorPtr> tensors;
    bool has_opt = false;
    AdamState opt;  // m/v in tensor name order
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint make_checkpoint(const ModelParams& params, std::uint64_t fingerprint, std::uint64_t step,
                           std::map<std::string, std::string> metadata, const AdamState* opt = nullptr);

// Copies checkpoint tensors into an existing model; every model tensor must
// be present with a matching shape.
void restore_params(const Checkpoint& ckpt, ModelParams& params);

}  // namespace s2c
