#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "natpatch/tensor.hpp"

namespace natpatch {

/// Named tensors plus a JSON descriptor, stored in a single binary file.
///
/// Layout: 8-byte magic "NATPATCH", little-endian u64 header length, JSON
/// header {meta, tensors:[{name, shape}], digest}, then the float64 payload
/// of every tensor in header order.  The digest is FNV-1a over the payload.
struct Archive {
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, Tensor> tensors;

    const Tensor& tensor(const std::string& name) const;
    bool has(const std::string& name) const { return tensors.contains(name); }
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
/// Throws std::runtime_error naming the path on a missing file, bad magic,
/// truncated payload or digest mismatch.
Archive read_archive(const std::filesystem::path& path);

std::uint64_t archive_digest(const Archive& archive);

}  // namespace natpatch
