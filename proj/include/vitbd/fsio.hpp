#pragma once

#include <string>
#include <string_view>

namespace vitbd {

// Whole-file helpers. Writes go to a temporary sibling and are renamed into
// place, so readers never observe a half-written artifact.
std::string read_binary_file(const std::string& path);
void write_file_atomic(const std::string& path, std::string_view content);
bool file_exists(const std::string& path);
void ensure_dir(const std::string& path);

}  // namespace vitbd
