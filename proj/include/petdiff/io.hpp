#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace petdiff {

// Raw little-endian arrays with sidecar text headers, and ordered key=value
// text files. Everything under dataset/checkpoint directories goes through
// these helpers so round-trips stay bit-exact.

void write_f32raw(const std::filesystem::path& file, const std::vector<float>& data);
void write_i32raw(const std::filesystem::path& file, const std::vector<int32_t>& data);

// Readers check the on-disk byte count against expected_count (elements);
// a size mismatch is a FormatError, a missing file an IoError.
std::vector<float> read_f32raw(const std::filesystem::path& file, size_t expected_count);
std::vector<int32_t> read_i32raw(const std::filesystem::path& file, size_t expected_count);

struct KvFile {
    // Insertion-ordered key=value pairs; duplicate keys rejected.
    std::vector<std::pair<std::string, std::string>> entries;

    void set(const std::string& key, const std::string& value);
    void set_i64(const std::string& key, int64_t v);
    void set_f64(const std::string& key, double v);

    bool has(const std::string& key) const;
    const std::string& get(const std::string& key) const;  // FormatError if absent
    int64_t get_i64(const std::string& key) const;
    double get_f64(const std::string& key) const;

    void save(const std::filesystem::path& file) const;
    static KvFile load(const std::filesystem::path& file);
};

// Full-precision decimal round-trip formats (shortest form would do too,
// but %.17g / %.9g are simple and exact for f64 / f32).
std::string format_f64(double v);
std::string format_f32(float v);

void write_text_file(const std::filesystem::path& file, const std::string& content);
std::string read_text_file(const std::filesystem::path& file);

// Write to <file>.tmp then rename over the target.
void write_text_file_atomic(const std::filesystem::path& file, const std::string& content);

}  // namespace petdiff
