#pragma once

#include <filesystem>
#include <string>

#include <unistd.h>

#include "armtrig/dataset.hpp"

namespace armtrig::test {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("armtrig-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

/// Small PickPlace dataset at 16x16, shared across tests in one binary.
inline const Dataset& small_dataset() {
  static const Dataset d = collect(default_task(TaskId::PickPlace), default_geometry(), {16, 16}, 10, 99);
  return d;
}

}  // namespace armtrig::test
