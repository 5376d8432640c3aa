// Copyright (c) the timeweave authors. All rights reserved.
// Licensed under the Apache 2.0 License.

#pragma once

#include <cstdint>
#include <string_view>

#include "timeweave/bytes.hpp"

namespace timeweave {

// Canonical byte encoding shared by every store, message and hash preimage.
// Each field is emitted as [1-octet type tag][8-octet big-endian length]
// [payload]; integers are 8-octet big-endian. The encoding is injective:
// two distinct structured values never serialize to the same byte string,
// so hashing or signing an encoding is unambiguous.
enum class Tag : std::uint8_t {
    u64 = 0x01,
    bytes = 0x02,
    str = 0x03,
    digest = 0x04,
    seq = 0x05,
};

inline void put_be64(Bytes& out, std::uint64_t v) {
    for (int i = 7; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Encoder {
public:
    Encoder& u64(std::uint64_t v) {
        header(Tag::u64, 8);
        put_be64(buf_, v);
        return *this;
    }
    Encoder& bytes(ByteView b) {
        header(Tag::bytes, b.size());
        buf_.insert(buf_.end(), b.begin(), b.end());
        return *this;
    }
    Encoder& str(std::string_view s) {
        header(Tag::str, s.size());
        buf_.insert(buf_.end(), s.begin(), s.end());
        return *this;
    }
    Encoder& raw_digest(ByteView d) {
        header(Tag::digest, d.size());
        buf_.insert(buf_.end(), d.begin(), d.end());
        return *this;
    }
    /// Wraps an already-encoded body as one nested field.
    Encoder& seq(ByteView body) {
        header(Tag::seq, body.size());
        buf_.insert(buf_.end(), body.begin(), body.end());
        return *this;
    }

    const Bytes& view() const { return buf_; }
    Bytes take() { return std::move(buf_); }

private:
    void header(Tag t, std::uint64_t len) {
        buf_.push_back(static_cast<std::uint8_t>(t));
        put_be64(buf_, len);
    }
    Bytes buf_;
};

/// Strict reader for the canonical encoding. Throws CodecError on any
/// malformed input; verification paths catch and turn that into a reject.
class Decoder {
public:
    explicit Decoder(ByteView data) : data_(data) {}

    bool done() const { return pos_ == data_.size(); }
    size_t remaining() const { return data_.size() - pos_; }
    Bytes rest() const { return Bytes(data_.begin() + pos_, data_.end()); }

    std::uint64_t u64() {
        expect(Tag::u64, 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v = v << 8 | data_[pos_++];
        return v;
    }
    Bytes bytes() { return payload(Tag::bytes); }
    std::string str() {
        Bytes b = payload(Tag::str);
        return std::string(b.begin(), b.end());
    }
    Bytes raw_digest() { return payload(Tag::digest); }
    /// Returns the body of a nested field as a sub-decoder view.
    Decoder seq() {
        std::uint64_t len = head(Tag::seq);
        ByteView body = data_.subspan(pos_, len);
        pos_ += len;
        return Decoder(body);
    }

private:
    std::uint64_t head(Tag t) {
        if (remaining() < 9) throw CodecError("decode: truncated header");
        if (data_[pos_] != static_cast<std::uint8_t>(t)) throw CodecError("decode: wrong tag");
        ++pos_;
        std::uint64_t len = 0;
        for (int i = 0; i < 8; ++i) len = len << 8 | data_[pos_++];
        if (len > remaining()) throw CodecError("decode: length past end");
        return len;
    }
    void expect(Tag t, std::uint64_t want) {
        if (head(t) != want) throw CodecError("decode: bad fixed length");
    }
    Bytes payload(Tag t) {
        std::uint64_t len = head(t);
        Bytes out(data_.begin() + pos_, data_.begin() + pos_ + len);
        pos_ += len;
        return out;
    }

    ByteView data_;
    size_t pos_ = 0;
};

}  // namespace timeweave
