#pragma once

#include <atomic>
#include <map>
#include <string>
#include <unistd.h>

#include "ira/util.hpp"

namespace ira::test {

inline fs::path fixture(const std::string& rel) { return fs::path(IRA_FIXTURE_DIR) / rel; }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag = "ira") {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& rel) const { return path_ / rel; }

  private:
    fs::path path_;
};

/// Relative path -> sha256 of contents, for every regular file under `root`.
inline std::map<std::string, std::string> tree_digest(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = sha256_hex(read_file(e.path()));
    }
    return out;
}

}  // namespace ira::test
