#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace spf {

/// File-system failure (unreadable input, unwritable output).
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Writes `content` to `path + ".tmp"`, flushes, then renames over `path`.
void write_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

/// Worker thread budget: hardware concurrency, capped by SPF_LAB_THREADS when set.
std::size_t worker_count();

}  // namespace spf
