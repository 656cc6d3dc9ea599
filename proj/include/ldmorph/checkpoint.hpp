#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ldmorph::ckpt {

namespace fs = std::filesystem;

/// Named tensors plus string metadata (config snapshot, metric history,
/// best-epoch marker). Stored as a versioned little-endian binary file:
///   "LDMCKPT\0", u32 version, u32 n_meta, {u32 len, key, u32 len, value}*,
///   u32 n_records, {u32 len, name, u8 dtype, u32 ndim, i64 dims[ndim], raw}*
struct Checkpoint {
    std::map<std::string, torch::Tensor> tensors;
    std::map<std::string, std::string> meta;

    void save(const fs::path& path) const;
    static Checkpoint load(const fs::path& path);

    /// Adds every parameter and buffer of `module` under "prefix.name".
    void add_module(const std::string& prefix, const torch::nn::Module& module);
    /// Copies "prefix.*" records into `module`; every parameter and buffer
    /// must be present with a matching shape.
    void load_module(const std::string& prefix, torch::nn::Module& module) const;
    bool has_module(const std::string& prefix) const;
};

inline constexpr uint32_t kCheckpointVersion = 1;

/// FNV-1a over parameter names and raw bytes; used to assert frozen weights.
uint64_t hash_module(const torch::nn::Module& module);

/// Deep copy of all parameters and buffers, in registration order.
std::vector<torch::Tensor> snapshot(const torch::nn::Module& module);
void restore(torch::nn::Module& module, const std::vector<torch::Tensor>& state);

} // namespace ldmorph::ckpt
