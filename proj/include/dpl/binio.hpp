#pragma once

#include <dpl/tensor.hpp>

#include "json.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Container layout shared by checkpoints, datasets and run-state files:
//   8-byte ASCII magic | uint64 LE header length | UTF-8 JSON header | raw little-endian payload

namespace dpl::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

/// File-system or format failure; the message always names the path.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
void append_le(std::string& out, T v)
{
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(bytes.begin(), bytes.end());
    out.append(bytes.data(), bytes.size());
}

template <class T>
T read_le(const char* p)
{
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(bytes.begin(), bytes.end());
    T v;
    std::memcpy(&v, bytes.data(), sizeof(T));
    return v;
}

} // namespace detail

inline void append_f64(std::string& out, std::span<const double> values)
{
    for (double v : values)
        detail::append_le(out, v);
}

inline void append_f32(std::string& out, std::span<const double> values)
{
    for (double v : values)
        detail::append_le(out, static_cast<float>(v));
}

inline void append_i32(std::string& out, std::span<const int> values)
{
    for (int v : values)
        detail::append_le(out, static_cast<std::int32_t>(v));
}

/// Sequential reader over a payload buffer.
class PayloadReader {
public:
    PayloadReader(const std::string& payload, std::string path) : data_(payload), path_(std::move(path)) {}

    std::vector<double> f64(std::size_t count) { return read<double, double>(count); }
    std::vector<double> f32(std::size_t count) { return read<float, double>(count); }
    std::vector<int> i32(std::size_t count) { return read<std::int32_t, int>(count); }

    bool exhausted() const { return pos_ == data_.size(); }

private:
    template <class Stored, class Out>
    std::vector<Out> read(std::size_t count)
    {
        if (data_.size() - pos_ < count * sizeof(Stored))
            throw IoError(path_ + ": truncated payload");
        std::vector<Out> out(count);
        for (std::size_t i = 0; i < count; ++i)
            out[i] = static_cast<Out>(detail::read_le<Stored>(data_.data() + pos_ + i * sizeof(Stored)));
        pos_ += count * sizeof(Stored);
        return out;
    }

    const std::string& data_;
    std::string path_;
    std::size_t pos_ = 0;
};

struct Container {
    nlohmann::json header;
    std::string payload;
};

inline void write_container(const std::filesystem::path& path, std::string_view magic, const nlohmann::json& header,
                            const std::string& payload)
{
    if (magic.size() != 8)
        throw std::invalid_argument("container magic must be 8 bytes");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError(path.string() + ": cannot open for writing");
    const std::string h = header.dump();
    std::string prefix(magic);
    detail::append_le(prefix, static_cast<std::uint64_t>(h.size()));
    out.write(prefix.data(), static_cast<std::streamsize>(prefix.size()));
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out)
        throw IoError(path.string() + ": write failed");
}

inline Container read_container(const std::filesystem::path& path, std::string_view magic)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError(path.string() + ": cannot open for reading");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16 || bytes.compare(0, 8, magic) != 0)
        throw IoError(path.string() + ": bad magic, expected " + std::string(magic));
    const auto len = detail::read_le<std::uint64_t>(bytes.data() + 8);
    if (bytes.size() - 16 < len)
        throw IoError(path.string() + ": truncated header");
    Container c;
    try {
        c.header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": malformed header: " + e.what());
    }
    c.payload = bytes.substr(16 + len);
    return c;
}

} // namespace dpl::io
