#include "natpatch/archive.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "natpatch/rng.hpp"

namespace natpatch {

namespace {

constexpr char kMagic[8] = {'N', 'A', 'T', 'P', 'A', 'T', 'C', 'H'};

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& what) {
    throw std::runtime_error("archive " + path.string() + ": " + what);
}

}  // namespace

const Tensor& Archive::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw std::runtime_error("archive has no tensor named '" + name + "'");
    }
    return it->second;
}

std::uint64_t archive_digest(const Archive& archive) {
    std::uint64_t hash = fnv1a64(std::string_view{});
    for (const auto& [name, t] : archive.tensors) {
        hash = fnv1a64(name, hash);
        hash = fnv1a64(t.values(), hash);
    }
    return hash;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
    nlohmann::json header;
    header["meta"] = archive.meta;
    header["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : archive.tensors) {
        header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
    }
    header["digest"] = hex64(archive_digest(archive));
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(path, "cannot open for writing");
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t length = text.size();
    out.write(reinterpret_cast<const char*>(&length), sizeof(length));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : archive.tensors) {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!out) fail(path, "write failed");
}

Archive read_archive(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) fail(path, "file does not exist");
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "cannot open for reading");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) fail(path, "bad magic");
    std::uint64_t length = 0;
    in.read(reinterpret_cast<char*>(&length), sizeof(length));
    if (!in || length > (1ULL << 32)) fail(path, "bad header length");
    std::string text(length, '\0');
    in.read(text.data(), static_cast<std::streamsize>(length));
    if (!in) fail(path, "truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(path, std::string("malformed header: ") + e.what());
    }

    Archive archive;
    archive.meta = header.value("meta", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
        Tensor t(entry.at("shape").get<std::vector<std::size_t>>());
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in) fail(path, "truncated payload for tensor '" + entry.at("name").get<std::string>() + "'");
        archive.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
    const std::string expected = header.at("digest").get<std::string>();
    const std::string actual = hex64(archive_digest(archive));
    if (expected != actual) {
        fail(path, "digest mismatch (header " + expected + ", payload " + actual + ")");
    }
    return archive;
}

}  // namespace natpatch
