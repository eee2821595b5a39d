// package.hpp - on-disk plugin packages: <dir>/manifest.txt + <dir>/weights.tmpl
#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <utility>

#include "templet/archive.hpp"
#include "templet/errors.hpp"
#include "templet/manifest.hpp"
#include "templet/sha256.hpp"
#include "templet/template_model.hpp"

namespace templet {

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline void write_binary_file(const std::string& path, const void* data, size_t len) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    if (!f) throw IoError("write failed: " + path);
}

// Serializes the archive, stamps its digest into the manifest, writes both.
inline void save_package(const std::string& dir, Manifest manifest, const TensorMap& tensors) {
    std::filesystem::create_directories(dir);
    std::vector<uint8_t> weights = archive_encode(tensors);
    manifest.weights_sha256 = sha256_hex(weights);
    if (manifest.weights_file.empty()) manifest.weights_file = "weights.tmpl";
    std::string text = manifest_serialize(manifest);
    write_binary_file(dir + "/manifest.txt", text.data(), text.size());
    write_binary_file(dir + "/" + manifest.weights_file, weights.data(), weights.size());
}

// Verifies the weights digest before deserializing; a checksum failure is an
// IntegrityError, distinct from malformed-content ParseErrors.
inline std::pair<Manifest, TensorMap> load_package(const std::string& dir) {
    Manifest manifest = manifest_parse(read_text_file(dir + "/manifest.txt"));
    std::string wpath = dir + "/" + manifest.weights_file;
    std::ifstream f(wpath, std::ios::binary);
    if (!f) throw IoError("cannot open: " + wpath);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    std::string digest = sha256_hex(bytes);
    if (digest != manifest.weights_sha256)
        throw IntegrityError("package " + dir + ": weights digest " + digest +
                             " does not match manifest " + manifest.weights_sha256);
    return {std::move(manifest), archive_decode(bytes)};
}

inline std::unique_ptr<TemplateModel> load_template(const std::string& dir) {
    auto [manifest, tensors] = load_package(dir);
    return TemplateRegistry::instance().instantiate(manifest, std::move(tensors));
}

}  // namespace templet
