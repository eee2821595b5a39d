// hub.hpp - remote package resolution with a content-addressed local cache
//
// Remote refs carry the expected weights digest (no trust-on-first-use).
// Downloads land in a temp directory and are renamed into place, so readers
// never observe partial state; concurrent resolves of one digest serialize
// through an advisory lock file.
#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <thread>

#include "templet/errors.hpp"
#include "templet/manifest.hpp"
#include "templet/package.hpp"
#include "templet/sha256.hpp"

#include <httplib.h>

namespace templet {

struct PackageRef {
    std::string local_path;
    std::string manifest_url;
    std::string weights_url;
    std::string expected_sha256;

    bool is_local() const { return !local_path.empty(); }

    static PackageRef local(std::string path) {
        PackageRef r;
        r.local_path = std::move(path);
        return r;
    }
    static PackageRef remote(std::string manifest_url, std::string weights_url,
                             std::string sha256) {
        PackageRef r;
        r.manifest_url = std::move(manifest_url);
        r.weights_url = std::move(weights_url);
        r.expected_sha256 = std::move(sha256);
        return r;
    }
};

struct ResolveStats {
    int http_requests = 0;
    int downloads = 0;
};

namespace detail_hub {

constexpr int kRetries = 3;
constexpr int kRetrySpacingMs = 500;

struct ParsedUrl {
    std::string host;
    int port = 80;
    std::string path;
};

inline ParsedUrl parse_url(const std::string& url) {
    const std::string scheme = "http://";
    if (url.rfind(scheme, 0) != 0) throw TransportError("unsupported url: " + url);
    std::string rest = url.substr(scheme.size());
    size_t slash = rest.find('/');
    ParsedUrl out;
    std::string hostport = slash == std::string::npos ? rest : rest.substr(0, slash);
    out.path = slash == std::string::npos ? "/" : rest.substr(slash);
    size_t colon = hostport.find(':');
    if (colon == std::string::npos) {
        out.host = hostport;
    } else {
        out.host = hostport.substr(0, colon);
        out.port = std::stoi(hostport.substr(colon + 1));
    }
    return out;
}

inline std::string http_get(const std::string& url, ResolveStats* stats) {
    ParsedUrl u = parse_url(url);
    std::string last_error;
    for (int attempt = 0; attempt < kRetries; ++attempt) {
        if (attempt > 0)
            std::this_thread::sleep_for(std::chrono::milliseconds(kRetrySpacingMs));
        httplib::Client client(u.host, u.port);
        client.set_connection_timeout(5);
        client.set_read_timeout(30);
        if (stats) ++stats->http_requests;
        httplib::Result res = client.Get(u.path);
        if (!res) {
            last_error = "connection failed";
            continue;
        }
        if (res->status != 200) {
            last_error = "status " + std::to_string(res->status);
            continue;
        }
        return res->body;
    }
    throw TransportError("GET " + url + " failed after " + std::to_string(kRetries) +
                         " attempts: " + last_error);
}

// Advisory lock via O_CREAT|O_EXCL; waits for a concurrent resolver of the
// same digest rather than downloading twice.
class DigestLock {
public:
    explicit DigestLock(std::string path) : path_(std::move(path)) {
        using namespace std::chrono;
        auto deadline = steady_clock::now() + seconds(30);
        while (true) {
            fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
            if (fd_ >= 0) return;
            if (steady_clock::now() > deadline)
                throw TransportError("timed out waiting for lock " + path_);
            std::this_thread::sleep_for(milliseconds(20));
        }
    }
    ~DigestLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }
    DigestLock(const DigestLock&) = delete;
    DigestLock& operator=(const DigestLock&) = delete;

private:
    std::string path_;
    int fd_ = -1;
};

}  // namespace detail_hub

inline std::string hub_cache_root(const std::string& explicit_dir = "") {
    if (!explicit_dir.empty()) return explicit_dir;
    if (const char* env = std::getenv("TEMPLET_CACHE_DIR")) return env;
    return ".templet-cache";
}

// Local refs pass through; remote refs hit the cache or download-verify-store.
// Resolution is idempotent: n calls produce at most one download.
inline std::string resolve(const PackageRef& ref, const std::string& cache_dir = "",
                           ResolveStats* stats = nullptr) {
    if (ref.is_local()) return ref.local_path;
    if (ref.expected_sha256.empty())
        throw ParseError("remote ref must carry the expected sha256 digest");

    const std::string root = hub_cache_root(cache_dir);
    std::filesystem::create_directories(root);
    const std::string entry = root + "/" + ref.expected_sha256;
    if (std::filesystem::exists(entry + "/manifest.txt")) return entry;

    detail_hub::DigestLock lock(entry + ".lock");
    if (std::filesystem::exists(entry + "/manifest.txt")) return entry;  // raced, now cached

    std::string manifest_text = detail_hub::http_get(ref.manifest_url, stats);
    std::string weights_body = detail_hub::http_get(ref.weights_url, stats);

    Manifest manifest = manifest_parse(manifest_text);
    if (manifest.weights_sha256 != ref.expected_sha256)
        throw ConflictError("ref digest " + ref.expected_sha256 +
                            " disagrees with manifest digest " + manifest.weights_sha256);
    std::string actual = sha256_hex(weights_body.data(), weights_body.size());
    if (actual != ref.expected_sha256)
        throw IntegrityError("weights digest " + actual + " does not match expected " +
                             ref.expected_sha256);

    const std::string tmp =
        root + "/tmp." + std::to_string(::getpid()) + "." + ref.expected_sha256;
    std::filesystem::remove_all(tmp);
    std::filesystem::create_directories(tmp);
    write_binary_file(tmp + "/manifest.txt", manifest_text.data(), manifest_text.size());
    write_binary_file(tmp + "/" + manifest.weights_file, weights_body.data(),
                      weights_body.size());
    std::filesystem::rename(tmp, entry);
    if (stats) ++stats->downloads;
    return entry;
}

}  // namespace templet
