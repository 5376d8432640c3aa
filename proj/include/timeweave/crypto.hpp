// Copyright (c) the timeweave authors. All rights reserved.
// Licensed under the Apache 2.0 License.

#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <memory>
#include <string>

#include <openssl/evp.h>

#include "timeweave/bytes.hpp"
#include "timeweave/counters.hpp"
#include "timeweave/encode.hpp"

namespace timeweave {

// ---------------------------------------------------------------------------
// One-way hash

enum class HashAlg : std::uint16_t {
    sha256 = 1,
    // 160-bit output, selectable to compare proof sizes bit-for-bit against
    // deployments sized for 20-octet digests. Not suitable for production.
    sha1 = 2,
};

struct HashConfig {
    HashAlg alg = HashAlg::sha256;
    std::uint8_t width = 32;  // octets; all digests in one deployment share it

    static HashConfig sha256_default() { return {HashAlg::sha256, 32}; }
    static HashConfig sha1_compat() { return {HashAlg::sha1, 20}; }
    bool operator==(const HashConfig&) const = default;
};

/// Fixed-width one-way hash output; the universal currency of all proofs.
struct Digest {
    static constexpr size_t kMaxWidth = 32;
    std::array<std::uint8_t, kMaxWidth> data{};
    std::uint8_t width = 0;

    ByteView bytes() const { return ByteView(data.data(), width); }
    bool is_zero() const {
        for (size_t i = 0; i < width; ++i)
            if (data[i]) return false;
        return true;
    }
    static Digest zero(std::uint8_t width) {
        Digest d;
        d.width = width;
        return d;
    }
    static Digest from(ByteView b) {
        if (b.size() > kMaxWidth) throw CodecError("digest: width too large");
        Digest d;
        d.width = static_cast<std::uint8_t>(b.size());
        std::copy(b.begin(), b.end(), d.data.begin());
        return d;
    }
    std::string hex() const { return timeweave::hex(bytes()); }
    static Digest from_hex(std::string_view s) { return from(timeweave::from_hex(s)); }

    auto operator<=>(const Digest&) const = default;
};

inline const EVP_MD* evp_md(HashAlg alg) {
    switch (alg) {
        case HashAlg::sha256: return EVP_sha256();
        case HashAlg::sha1: return EVP_sha1();
    }
    throw CodecError("unknown hash algorithm");
}

inline Digest hash_bytes(const HashConfig& cfg, ByteView data) {
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned int out_len = 0;
    if (EVP_Digest(data.data(), data.size(), out, &out_len, evp_md(cfg.alg), nullptr) != 1)
        throw IoError("EVP_Digest failed");
    count_hash(data.size());
    // width is the full output of the configured function by construction
    return Digest::from(ByteView(out, cfg.width));
}

inline Encoder& operator<<(Encoder& e, const Digest& d) {
    e.raw_digest(d.bytes());
    return e;
}

inline Digest read_digest(Decoder& d, const HashConfig& cfg) {
    Bytes b = d.raw_digest();
    if (b.size() != cfg.width) throw CodecError("digest: wrong width");
    return Digest::from(b);
}

// ---------------------------------------------------------------------------
// Signatures

enum class SigScheme : std::uint16_t {
    ed25519 = 1,
};

/// Identifies a service by the canonical encoding of its verification key:
/// 2 octets big-endian scheme tag followed by the raw public key.
struct ServiceId {
    Bytes id;
    std::string name;  // display only; never hashed or signed

    auto operator<=>(const ServiceId& o) const { return id <=> o.id; }
    bool operator==(const ServiceId& o) const { return id == o.id; }
};

struct Signature {
    SigScheme scheme = SigScheme::ed25519;
    Bytes bytes;
};

namespace detail {
struct PkeyDeleter {
    void operator()(EVP_PKEY* p) const { EVP_PKEY_free(p); }
};
using PkeyPtr = std::unique_ptr<EVP_PKEY, PkeyDeleter>;

inline Bytes raw_public_key(EVP_PKEY* key) {
    size_t len = 0;
    if (EVP_PKEY_get_raw_public_key(key, nullptr, &len) != 1)
        throw IoError("get_raw_public_key failed");
    Bytes out(len);
    if (EVP_PKEY_get_raw_public_key(key, out.data(), &len) != 1)
        throw IoError("get_raw_public_key failed");
    out.resize(len);
    return out;
}
}  // namespace detail

inline Bytes service_id_bytes(SigScheme scheme, ByteView pubkey) {
    Bytes id;
    id.push_back(static_cast<std::uint8_t>(static_cast<std::uint16_t>(scheme) >> 8));
    id.push_back(static_cast<std::uint8_t>(static_cast<std::uint16_t>(scheme) & 0xff));
    id.insert(id.end(), pubkey.begin(), pubkey.end());
    return id;
}

class SigningKey {
public:
    static SigningKey generate(SigScheme scheme = SigScheme::ed25519) {
        require_ed25519(scheme);
        EVP_PKEY* key = nullptr;
        EVP_PKEY_CTX* ctx = EVP_PKEY_CTX_new_id(EVP_PKEY_ED25519, nullptr);
        if (!ctx || EVP_PKEY_keygen_init(ctx) != 1 || EVP_PKEY_keygen(ctx, &key) != 1) {
            EVP_PKEY_CTX_free(ctx);
            throw IoError("ed25519 keygen failed");
        }
        EVP_PKEY_CTX_free(ctx);
        return SigningKey(detail::PkeyPtr(key), scheme);
    }

    /// Deterministic key from a 32-octet seed; used by the simulator so a
    /// scenario seed fixes every identity in the run.
    static SigningKey from_seed(ByteView seed, SigScheme scheme = SigScheme::ed25519) {
        require_ed25519(scheme);
        if (seed.size() != 32) throw CodecError("ed25519 seed must be 32 octets");
        EVP_PKEY* key =
            EVP_PKEY_new_raw_private_key(EVP_PKEY_ED25519, nullptr, seed.data(), seed.size());
        if (!key) throw IoError("ed25519 key import failed");
        return SigningKey(detail::PkeyPtr(key), scheme);
    }

    static SigningKey from_private_bytes(ByteView raw, SigScheme scheme = SigScheme::ed25519) {
        return from_seed(raw, scheme);
    }

    SigningKey(const SigningKey& o) : scheme_(o.scheme_) {
        *this = SigningKey::from_private_bytes(o.private_bytes(), o.scheme_);
    }
    SigningKey& operator=(const SigningKey& o) {
        if (this != &o) *this = SigningKey::from_private_bytes(o.private_bytes(), o.scheme_);
        return *this;
    }
    SigningKey(SigningKey&&) = default;
    SigningKey& operator=(SigningKey&&) = default;

    Bytes private_bytes() const {
        size_t len = 0;
        if (EVP_PKEY_get_raw_private_key(key_.get(), nullptr, &len) != 1)
            throw IoError("get_raw_private_key failed");
        Bytes out(len);
        if (EVP_PKEY_get_raw_private_key(key_.get(), out.data(), &len) != 1)
            throw IoError("get_raw_private_key failed");
        out.resize(len);
        return out;
    }

    SigScheme scheme() const { return scheme_; }
    Bytes public_key() const { return detail::raw_public_key(key_.get()); }

    ServiceId service_id(std::string name) const {
        return ServiceId{service_id_bytes(scheme_, public_key()), std::move(name)};
    }

    Signature sign(ByteView body) const {
        EVP_MD_CTX* ctx = EVP_MD_CTX_new();
        if (!ctx) throw IoError("MD_CTX alloc failed");
        Signature sig;
        sig.scheme = scheme_;
        size_t len = 0;
        if (EVP_DigestSignInit(ctx, nullptr, nullptr, nullptr, key_.get()) != 1 ||
            EVP_DigestSign(ctx, nullptr, &len, body.data(), body.size()) != 1) {
            EVP_MD_CTX_free(ctx);
            throw IoError("sign failed");
        }
        sig.bytes.resize(len);
        if (EVP_DigestSign(ctx, sig.bytes.data(), &len, body.data(), body.size()) != 1) {
            EVP_MD_CTX_free(ctx);
            throw IoError("sign failed");
        }
        sig.bytes.resize(len);
        EVP_MD_CTX_free(ctx);
        return sig;
    }

private:
    static void require_ed25519(SigScheme scheme) {
        if (scheme != SigScheme::ed25519) throw CodecError("unsupported signature scheme");
    }
    SigningKey(detail::PkeyPtr key, SigScheme scheme) : key_(std::move(key)), scheme_(scheme) {}
    detail::PkeyPtr key_;
    SigScheme scheme_;
};

/// Verification never throws on malformed input; any failure is `false`.
inline bool verify_sig(const ServiceId& signer, ByteView body, const Signature& sig) {
    if (signer.id.size() < 2) return false;
    auto scheme = static_cast<SigScheme>(signer.id[0] << 8 | signer.id[1]);
    if (scheme != sig.scheme || scheme != SigScheme::ed25519) return false;
    ByteView pub(signer.id.data() + 2, signer.id.size() - 2);
    EVP_PKEY* key =
        EVP_PKEY_new_raw_public_key(EVP_PKEY_ED25519, nullptr, pub.data(), pub.size());
    if (!key) return false;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    bool ok = ctx != nullptr &&
              EVP_DigestVerifyInit(ctx, nullptr, nullptr, nullptr, key) == 1 &&
              EVP_DigestVerify(ctx, sig.bytes.data(), sig.bytes.size(), body.data(),
                               body.size()) == 1;
    EVP_MD_CTX_free(ctx);
    EVP_PKEY_free(key);
    return ok;
}

}  // namespace timeweave
