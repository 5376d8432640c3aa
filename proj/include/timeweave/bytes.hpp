// Copyright (c) the timeweave authors. All rights reserved.
// Licensed under the Apache 2.0 License.

#pragma once

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

namespace timeweave {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CodecError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline Bytes to_bytes(std::string_view s) {
    return Bytes(s.begin(), s.end());
}

inline std::string to_string(ByteView b) {
    return std::string(b.begin(), b.end());
}

inline std::string hex(ByteView b) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(b.size() * 2);
    for (auto c : b) {
        out.push_back(digits[c >> 4]);
        out.push_back(digits[c & 0xf]);
    }
    return out;
}

inline Bytes from_hex(std::string_view s) {
    auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        return -1;
    };
    if (s.size() % 2) throw CodecError("hex: odd length");
    Bytes out(s.size() / 2);
    for (size_t i = 0; i < out.size(); ++i) {
        int hi = nib(s[2 * i]), lo = nib(s[2 * i + 1]);
        if (hi < 0 || lo < 0) throw CodecError("hex: bad digit");
        out[i] = static_cast<std::uint8_t>(hi << 4 | lo);
    }
    return out;
}

/// POSIX file handle with positional reads, used by the on-disk stores.
/// A store instance owns its files; readers use pread so a single writer
/// and concurrent readers never share a file offset.
class FdFile {
public:
    FdFile() = default;

    static FdFile open_rw(const std::filesystem::path& p, bool create) {
        int flags = O_RDWR | (create ? O_CREAT : 0);
        int fd = ::open(p.c_str(), flags, 0644);
        if (fd < 0) throw IoError("open " + p.string() + ": " + std::strerror(errno));
        return FdFile(fd, p.string());
    }
    static FdFile open_ro(const std::filesystem::path& p) {
        int fd = ::open(p.c_str(), O_RDONLY);
        if (fd < 0) throw IoError("open " + p.string() + ": " + std::strerror(errno));
        return FdFile(fd, p.string());
    }

    FdFile(FdFile&& o) noexcept : fd_(o.fd_), name_(std::move(o.name_)) { o.fd_ = -1; }
    FdFile& operator=(FdFile&& o) noexcept {
        if (this != &o) {
            close();
            fd_ = o.fd_;
            name_ = std::move(o.name_);
            o.fd_ = -1;
        }
        return *this;
    }
    FdFile(const FdFile&) = delete;
    FdFile& operator=(const FdFile&) = delete;
    ~FdFile() { close(); }

    bool valid() const { return fd_ >= 0; }

    std::uint64_t size() const {
        struct stat st{};
        if (::fstat(fd_, &st) != 0) throw IoError(name_ + ": fstat failed");
        return static_cast<std::uint64_t>(st.st_size);
    }

    void read_at(std::uint64_t off, std::uint8_t* buf, size_t len) const {
        size_t done = 0;
        while (done < len) {
            ssize_t n = ::pread(fd_, buf + done, len - done, static_cast<off_t>(off + done));
            if (n < 0) {
                if (errno == EINTR) continue;
                throw IoError(name_ + ": pread failed");
            }
            if (n == 0) throw IoError(name_ + ": short read");
            done += static_cast<size_t>(n);
        }
    }

    Bytes read_at(std::uint64_t off, size_t len) const {
        Bytes b(len);
        if (len) read_at(off, b.data(), len);
        return b;
    }

    void write_at(std::uint64_t off, ByteView data) {
        size_t done = 0;
        while (done < data.size()) {
            ssize_t n = ::pwrite(fd_, data.data() + done, data.size() - done,
                                 static_cast<off_t>(off + done));
            if (n < 0) {
                if (errno == EINTR) continue;
                throw IoError(name_ + ": pwrite failed");
            }
            done += static_cast<size_t>(n);
        }
    }

    void sync() {
        if (::fsync(fd_) != 0) throw IoError(name_ + ": fsync failed");
    }

    void truncate(std::uint64_t len) {
        if (::ftruncate(fd_, static_cast<off_t>(len)) != 0)
            throw IoError(name_ + ": ftruncate failed");
    }

private:
    FdFile(int fd, std::string name) : fd_(fd), name_(std::move(name)) {}
    void close() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }
    int fd_ = -1;
    std::string name_;
};

inline Bytes read_file(const std::filesystem::path& p) {
    FdFile f = FdFile::open_ro(p);
    return f.read_at(0, f.size());
}

inline void write_file(const std::filesystem::path& p, ByteView data) {
    FdFile f = FdFile::open_rw(p, true);
    f.truncate(0);
    f.write_at(0, data);
    f.sync();
}

}  // namespace timeweave
