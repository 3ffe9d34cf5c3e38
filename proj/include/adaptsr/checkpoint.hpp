#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaptsr/tensor.hpp"

namespace adaptsr::ckpt {

struct StoredTensor {
    std::vector<int> shape;
    std::vector<float> data;
};

/// Keyed tensor container: 8-byte magic, little-endian u64 header length, JSON header
/// {"meta": ..., "tensors": {name: {"shape", "offset", "numel"}}}, then raw float32 data.
struct Container {
    nlohmann::json meta;
    std::vector<std::string> order;
    std::map<std::string, StoredTensor> tensors;

    void put(const std::string& name, const Param& p);
    const StoredTensor& get(const std::string& name) const;
};

void write(const Container& c, const std::filesystem::path& path);
Container read(const std::filesystem::path& path);

} // namespace adaptsr::ckpt
