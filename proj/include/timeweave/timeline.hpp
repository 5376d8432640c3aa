// Copyright (c) the timeweave authors. All rights reserved.
// Licensed under the Apache 2.0 License.

#pragma once

#include <filesystem>

#include "timeweave/crypto.hpp"
#include "timeweave/skiplist.hpp"

namespace timeweave {

/// Signed (owner, step, authenticator) tuple; the unit a service publishes
/// to clients and embeds in protocol messages.
struct SignedTimeMark {
    Bytes owner;  // ServiceId encoding
    std::uint64_t step = 0;
    Digest authenticator;
    Signature sig;

    static Bytes body(ByteView owner, std::uint64_t step, const Digest& auth) {
        Encoder e;
        e.bytes(owner).u64(step);
        e << auth;
        return e.take();
    }
    Bytes signed_body() const { return body(owner, step, authenticator); }

    Bytes encode() const {
        Encoder e;
        e.bytes(owner).u64(step);
        e << authenticator;
        e.u64(static_cast<std::uint64_t>(sig.scheme)).bytes(sig.bytes);
        return e.take();
    }
    static SignedTimeMark decode(Decoder& d, const HashConfig& cfg) {
        SignedTimeMark m;
        m.owner = d.bytes();
        m.step = d.u64();
        m.authenticator = read_digest(d, cfg);
        m.sig.scheme = static_cast<SigScheme>(d.u64());
        m.sig.bytes = d.bytes();
        return m;
    }

    bool verify(const ServiceId& signer) const {
        if (owner != signer.id) return false;
        return verify_sig(signer, signed_body(), sig);
    }
};

/// A service's secure timeline: an authenticated append-only skip list whose
/// element values are system digests. Appending value d as element i makes
/// the new authenticator depend one-way on i, T_{i-1} and d through the
/// level-0 link, so each tick extends the one-way chain over all prior
/// states.
class Timeline {
public:
    static Timeline create(const std::filesystem::path& path, const HashConfig& cfg,
                           const Digest& genesis, ServiceId owner, SkipListOptions opts = {}) {
        return Timeline(SkipListStore::create(path, cfg, genesis, opts), std::move(owner));
    }
    static Timeline open(const std::filesystem::path& path, ServiceId owner,
                         SkipListOptions opts = {}) {
        return Timeline(SkipListStore::open(path, opts), std::move(owner));
    }

    const ServiceId& owner() const { return owner_; }
    const HashConfig& hash_config() const { return list_.hash_config(); }
    std::uint64_t step() const { return list_.size(); }
    Digest head() const { return list_.head(); }
    Digest authenticator(std::uint64_t i) const { return list_.authenticator(i); }
    Digest value(std::uint64_t i) const { return list_.value(i); }
    const SkipListStore& store() const { return list_; }

    /// Advances one logical step: d = H(f_S || g_E) appended to the list,
    /// returning the signed mark for the new step. Standalone timelines
    /// pass the genesis digest for g_E.
    SignedTimeMark tick(const SigningKey& key, const Digest& f_state, const Digest& g_archive) {
        Encoder e;
        e << f_state << g_archive;
        Digest d = hash_bytes(hash_config(), e.view());
        return tick_raw(key, d);
    }

    /// Appends a precomputed system digest.
    SignedTimeMark tick_raw(const SigningKey& key, const Digest& d) {
        auto [i, t] = list_.append(d);
        SignedTimeMark m;
        m.owner = owner_.id;
        m.step = i;
        m.authenticator = t;
        m.sig = key.sign(m.signed_body());
        return m;
    }

    SkipListProof prove_precedence(std::uint64_t i, std::uint64_t j) const {
        return list_.prove_precedence(i, j);
    }
    SkipListProof prove_existence(std::uint64_t i) const { return list_.prove_existence(i); }

private:
    Timeline(SkipListStore list, ServiceId owner) : list_(std::move(list)), owner_(std::move(owner)) {}
    SkipListStore list_;
    ServiceId owner_;
};

}  // namespace timeweave
