#pragma once

#include <filesystem>
#include <string>

namespace pcisr {

// Entry point of the `pcisr` command. Returns the process exit status; on
// failure a one-line diagnostic goes to stderr.
int run_cli(int argc, const char* const* argv);

// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

}  // namespace pcisr
