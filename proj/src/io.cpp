#include "petdiff/io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "petdiff/errors.hpp"

namespace petdiff {

namespace fs = std::filesystem;

namespace {

void write_bytes(const fs::path& file, const void* data, size_t n) {
    std::ofstream os(file, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + file.string());
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!os) throw IoError("write failed: " + file.string());
}

std::vector<char> read_bytes(const fs::path& file, size_t expected) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw IoError("cannot open: " + file.string());
    is.seekg(0, std::ios::end);
    const auto size = static_cast<size_t>(is.tellg());
    if (size != expected) {
        throw FormatError(file.string() + ": expected " + std::to_string(expected) +
                          " bytes, file has " + std::to_string(size));
    }
    is.seekg(0);
    std::vector<char> buf(size);
    is.read(buf.data(), static_cast<std::streamsize>(size));
    if (!is) throw IoError("read failed: " + file.string());
    return buf;
}

}  // namespace

void write_f32raw(const fs::path& file, const std::vector<float>& data) {
    write_bytes(file, data.data(), data.size() * sizeof(float));
}

void write_i32raw(const fs::path& file, const std::vector<int32_t>& data) {
    write_bytes(file, data.data(), data.size() * sizeof(int32_t));
}

std::vector<float> read_f32raw(const fs::path& file, size_t expected_count) {
    const auto bytes = read_bytes(file, expected_count * sizeof(float));
    std::vector<float> out(expected_count);
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

std::vector<int32_t> read_i32raw(const fs::path& file, size_t expected_count) {
    const auto bytes = read_bytes(file, expected_count * sizeof(int32_t));
    std::vector<int32_t> out(expected_count);
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

void KvFile::set(const std::string& key, const std::string& value) {
    if (has(key)) throw ContractError("duplicate key: " + key);
    if (key.find('=') != std::string::npos || key.find('\n') != std::string::npos) {
        throw ContractError("invalid key: " + key);
    }
    if (value.find('\n') != std::string::npos) {
        throw ContractError("value may not contain newlines (key " + key + ")");
    }
    entries.emplace_back(key, value);
}

void KvFile::set_i64(const std::string& key, int64_t v) { set(key, std::to_string(v)); }
void KvFile::set_f64(const std::string& key, double v) { set(key, format_f64(v)); }

bool KvFile::has(const std::string& key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return true;
    return false;
}

const std::string& KvFile::get(const std::string& key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return v;
    throw FormatError("missing key: " + key);
}

int64_t KvFile::get_i64(const std::string& key) const {
    const std::string& s = get(key);
    size_t pos = 0;
    int64_t v = 0;
    try {
        v = std::stoll(s, &pos);
    } catch (const std::exception&) {
        throw FormatError("key " + key + ": not an integer: " + s);
    }
    if (pos != s.size()) throw FormatError("key " + key + ": not an integer: " + s);
    return v;
}

double KvFile::get_f64(const std::string& key) const {
    const std::string& s = get(key);
    size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw FormatError("key " + key + ": not a number: " + s);
    }
    if (pos != s.size()) throw FormatError("key " + key + ": not a number: " + s);
    return v;
}

void KvFile::save(const fs::path& file) const {
    std::string out;
    for (const auto& [k, v] : entries) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    write_text_file(file, out);
}

KvFile KvFile::load(const fs::path& file) {
    const std::string text = read_text_file(file);
    KvFile kv;
    size_t line_no = 0;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError(file.string() + ":" + std::to_string(line_no) +
                              ": expected key=value");
        }
        const std::string key = line.substr(0, eq);
        if (kv.has(key)) {
            throw FormatError(file.string() + ":" + std::to_string(line_no) +
                              ": duplicate key " + key);
        }
        kv.entries.emplace_back(key, line.substr(eq + 1));
    }
    return kv;
}

std::string format_f64(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string format_f32(float v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
    return buf;
}

void write_text_file(const fs::path& file, const std::string& content) {
    write_bytes(file, content.data(), content.size());
}

std::string read_text_file(const fs::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw IoError("cannot open: " + file.string());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_text_file_atomic(const fs::path& file, const std::string& content) {
    const fs::path tmp = file.string() + ".tmp";
    write_text_file(tmp, content);
    std::error_code ec;
    fs::rename(tmp, file, ec);
    if (ec) throw IoError("rename " + tmp.string() + " -> " + file.string() + ": " + ec.message());
}

}  // namespace petdiff
