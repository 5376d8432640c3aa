// Copyright (c) the timeweave authors. All rights reserved.
// Licensed under the Apache 2.0 License.

#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "timeweave/bytes.hpp"
#include "timeweave/counters.hpp"
#include "timeweave/crypto.hpp"
#include "timeweave/encode.hpp"

namespace timeweave {

// Authenticated append-only deterministic skip list.
//
// Elements are numbered from 1. Element i participates in hash chains at
// levels 0..l, where l is the exponent of 2 in the factorization of i.
// Its links are
//     L_i^j = H( i, j, d_i, T_{i-2^j} )        0 <= j <= l
// and its authenticator is
//     T_i = H( L_i^0 || ... || L_i^l )          for even i
//     T_i = L_i^0                               for odd i (single link)
// T_0 is a configured genesis digest. A precedence proof from i to j is a
// sequence of hops; each hop jumps 2^z forward and carries the target's
// value and all of its links except the one at level z, which the verifier
// recomputes from the running authenticator. Proofs from index 0 are legal
// and anchor at genesis; first-contact protocol proofs use them.

inline int skiplist_level(std::uint64_t i) {
    return i == 0 ? 63 : std::countr_zero(i);
}

inline Digest skiplist_link_hash(const HashConfig& cfg, std::uint64_t index, std::uint64_t level,
                                 const Digest& value, const Digest& prev_auth) {
    Encoder e;
    e.u64(index).u64(level);
    e << value << prev_auth;
    return hash_bytes(cfg, e.view());
}

inline Digest skiplist_auth_from_links(const HashConfig& cfg, std::uint64_t index,
                                       const std::vector<Digest>& links) {
    if (index % 2 == 1) return links.at(0);
    Encoder e;
    for (const auto& l : links) e << l;
    return hash_bytes(cfg, e.view());
}

struct SkipListElement {
    std::uint64_t index = 0;
    Digest value;
    std::vector<Digest> links;
    Digest authenticator;

    Bytes encode() const {
        Encoder e;
        e.u64(index);
        e << value;
        e.u64(links.size());
        for (const auto& l : links) e << l;
        e << authenticator;
        return e.take();
    }
    static SkipListElement decode(Decoder& d, const HashConfig& cfg) {
        SkipListElement el;
        el.index = d.u64();
        el.value = read_digest(d, cfg);
        std::uint64_t n = d.u64();
        if (n > 64) throw CodecError("element: too many links");
        el.links.reserve(n);
        for (std::uint64_t i = 0; i < n; ++i) el.links.push_back(read_digest(d, cfg));
        el.authenticator = read_digest(d, cfg);
        return el;
    }
};

struct ProofHop {
    std::uint64_t index = 0;
    Digest value;
    std::uint64_t level = 0;            // level of the link recomputed by the verifier
    std::vector<Digest> links;          // all links of `index` except `level`
};

struct SkipListProof {
    std::uint64_t start = 0;
    std::uint64_t end = 0;
    std::vector<ProofHop> hops;

    std::uint64_t digest_count() const {
        std::uint64_t n = 0;
        for (const auto& h : hops) n += 1 + h.links.size();
        return n;
    }
    std::vector<std::uint64_t> visited() const {
        std::vector<std::uint64_t> v;
        v.reserve(hops.size());
        for (const auto& h : hops) v.push_back(h.index);
        return v;
    }

    Bytes encode() const {
        Encoder e;
        e.u64(start).u64(end).u64(hops.size());
        for (const auto& h : hops) {
            e.u64(h.index);
            e << h.value;
            e.u64(h.level).u64(h.links.size());
            for (const auto& l : h.links) e << l;
        }
        return e.take();
    }
    static SkipListProof decode(Decoder& d, const HashConfig& cfg) {
        SkipListProof p;
        p.start = d.u64();
        p.end = d.u64();
        std::uint64_t n = d.u64();
        if (n > 1u << 20) throw CodecError("proof: absurd hop count");
        for (std::uint64_t i = 0; i < n; ++i) {
            ProofHop h;
            h.index = d.u64();
            h.value = read_digest(d, cfg);
            h.level = d.u64();
            std::uint64_t m = d.u64();
            if (m > 64) throw CodecError("proof: too many links");
            for (std::uint64_t j = 0; j < m; ++j) h.links.push_back(read_digest(d, cfg));
            p.hops.push_back(std::move(h));
        }
        return p;
    }
};

/// Replays a proof from `t_start` and returns the resulting authenticator,
/// or nullopt if the proof is structurally malformed (wrong link counts,
/// non-monotone indices, illegal jumps). Does not compare endpoints.
inline std::optional<Digest> skiplist_replay(const HashConfig& cfg, const SkipListProof& p,
                                             const Digest& t_start) {
    std::uint64_t c = p.start;
    Digest t = t_start;
    for (const auto& hop : p.hops) {
        if (hop.level > 62) return std::nullopt;
        std::uint64_t jump = 1ull << hop.level;
        if (c > 0 && c % jump != 0) return std::nullopt;  // 2^z must divide c
        std::uint64_t k = c + jump;
        if (hop.index != k || k > p.end) return std::nullopt;
        int top = skiplist_level(k);
        if (hop.level > static_cast<std::uint64_t>(top)) return std::nullopt;
        if (hop.links.size() != static_cast<size_t>(top)) return std::nullopt;
        Digest lz = skiplist_link_hash(cfg, k, hop.level, hop.value, t);
        if (top == 0) {
            t = lz;  // odd element: the single link is the authenticator
        } else {
            std::vector<Digest> links;
            links.reserve(hop.links.size() + 1);
            links.insert(links.end(), hop.links.begin(), hop.links.begin() + hop.level);
            links.push_back(lz);
            links.insert(links.end(), hop.links.begin() + hop.level, hop.links.end());
            t = skiplist_auth_from_links(cfg, k, links);
        }
        c = k;
    }
    if (c != p.end) return std::nullopt;
    return t;
}

/// Full verification: replay from `t_start` must reach exactly `t_end`.
/// All failures, including malformed proofs, return false.
inline bool skiplist_verify(const HashConfig& cfg, const SkipListProof& p, const Digest& t_start,
                            const Digest& t_end) {
    auto t = skiplist_replay(cfg, p, t_start);
    return t.has_value() && *t == t_end;
}

struct SkipListOptions {
    bool write_through = true;  // fsync data and index on every append
};

/// On-disk store. Files: `<path>` holds the header and element records,
/// `<path>.idx` holds one u64 big-endian end-offset per element. An element
/// becomes visible only once its index record is written, which makes an
/// interrupted append invisible; recovery truncates the data file to the
/// last indexed record.
class SkipListStore {
public:
    static constexpr char kMagic[4] = {'T', 'W', 'S', 'L'};
    static constexpr std::uint16_t kFormatVersion = 1;

    static SkipListStore create(const std::filesystem::path& path, const HashConfig& cfg,
                                const Digest& genesis, SkipListOptions opts = {}) {
        if (genesis.width != cfg.width) throw CodecError("genesis width mismatch");
        SkipListStore s(cfg, genesis, opts);
        s.data_ = FdFile::open_rw(path, true);
        s.index_ = FdFile::open_rw(index_path(path), true);
        s.data_.truncate(0);
        s.index_.truncate(0);
        Bytes hdr;
        hdr.insert(hdr.end(), kMagic, kMagic + 4);
        hdr.push_back(kFormatVersion >> 8);
        hdr.push_back(kFormatVersion & 0xff);
        hdr.push_back(static_cast<std::uint16_t>(cfg.alg) >> 8);
        hdr.push_back(static_cast<std::uint16_t>(cfg.alg) & 0xff);
        hdr.push_back(cfg.width);
        hdr.insert(hdr.end(), genesis.bytes().begin(), genesis.bytes().end());
        s.data_.write_at(0, hdr);
        if (opts.write_through) {
            s.data_.sync();
            s.index_.sync();
        }
        s.header_size_ = hdr.size();
        s.data_end_ = hdr.size();
        return s;
    }

    static SkipListStore open(const std::filesystem::path& path, SkipListOptions opts = {}) {
        FdFile data = FdFile::open_rw(path, false);
        Bytes fixed = data.read_at(0, 9);
        if (std::memcmp(fixed.data(), kMagic, 4) != 0) throw CodecError("not a skip list store");
        std::uint16_t ver = fixed[4] << 8 | fixed[5];
        if (ver != kFormatVersion) throw CodecError("unsupported store version");
        HashConfig cfg;
        cfg.alg = static_cast<HashAlg>(fixed[6] << 8 | fixed[7]);
        cfg.width = fixed[8];
        Digest genesis = Digest::from(data.read_at(9, cfg.width));
        SkipListStore s(cfg, genesis, opts);
        s.data_ = std::move(data);
        s.index_ = FdFile::open_rw(index_path(path), false);
        s.header_size_ = 9 + cfg.width;
        std::uint64_t n = s.index_.size() / 8;
        s.ends_.resize(n);
        Bytes raw = s.index_.read_at(0, n * 8);
        for (std::uint64_t i = 0; i < n; ++i) {
            std::uint64_t v = 0;
            for (int b = 0; b < 8; ++b) v = v << 8 | raw[i * 8 + b];
            s.ends_[i] = v;
        }
        s.data_end_ = n ? s.ends_.back() : s.header_size_;
        // recovery from an interrupted append: drop unindexed tail bytes
        if (s.data_.size() > s.data_end_) s.data_.truncate(s.data_end_);
        return s;
    }

    std::uint64_t size() const { return ends_.size(); }
    const HashConfig& hash_config() const { return cfg_; }
    const Digest& genesis() const { return genesis_; }

    /// T_i; index 0 is the genesis digest.
    Digest authenticator(std::uint64_t i) const {
        if (i == 0) return genesis_;
        if (auto c = cache_get(i)) return *c;
        Digest t = element(i).authenticator;
        cache_put(i, t);
        return t;
    }
    Digest head() const { return authenticator(size()); }
    Digest value(std::uint64_t i) const { return element(i).value; }

    SkipListElement element(std::uint64_t i) const {
        if (i == 0 || i > size()) throw CodecError("element index out of range");
        std::uint64_t start = i == 1 ? header_size_ : ends_[i - 2];
        std::uint64_t end = ends_[i - 1];
        Bytes rec = data_.read_at(start, end - start);
        count_disk_blocks(1);
        Decoder d(rec);
        SkipListElement el = SkipListElement::decode(d, cfg_);
        if (el.index != i) throw CodecError("element index mismatch");
        return el;
    }

    /// Appends a value, persisting the new element before returning.
    std::pair<std::uint64_t, Digest> append(const Digest& d) {
        std::uint64_t i = size() + 1;
        int top = skiplist_level(i);
        SkipListElement el;
        el.index = i;
        el.value = d;
        for (int j = 0; j <= top; ++j) {
            Digest prev = authenticator(i - (1ull << j));
            el.links.push_back(skiplist_link_hash(cfg_, i, j, d, prev));
        }
        el.authenticator = skiplist_auth_from_links(cfg_, i, el.links);

        Bytes rec = el.encode();
        data_.write_at(data_end_, rec);
        count_disk_blocks(1);
        if (opts_.write_through) data_.sync();
        std::uint64_t new_end = data_end_ + rec.size();
        Bytes idx;
        put_be64(idx, new_end);
        index_.write_at(size() * 8, idx);
        count_disk_blocks(1);
        if (opts_.write_through) index_.sync();
        data_end_ = new_end;
        ends_.push_back(new_end);
        cache_put(i, el.authenticator);
        return {i, el.authenticator};
    }

    /// Proof that element i precedes element j. Start index 0 anchors at
    /// genesis. Proof for i == j is empty.
    SkipListProof prove_precedence(std::uint64_t i, std::uint64_t j) const {
        if (i > j || j > size()) throw CodecError("precedence range out of bounds");
        SkipListProof p;
        p.start = i;
        p.end = j;
        std::uint64_t c = i;
        while (c < j) {
            int z;
            if (c == 0) {
                z = 62;
                while ((1ull << z) > j) --z;
            } else {
                z = skiplist_level(c);
                while ((1ull << z) > j - c) --z;
            }
            std::uint64_t k = c + (1ull << z);
            SkipListElement el = element(k);
            ProofHop hop;
            hop.index = k;
            hop.value = el.value;
            hop.level = static_cast<std::uint64_t>(z);
            for (size_t lv = 0; lv < el.links.size(); ++lv)
                if (lv != static_cast<size_t>(z)) hop.links.push_back(el.links[lv]);
            p.hops.push_back(std::move(hop));
            c = k;
        }
        return p;
    }

    /// Existence proof: precedence from i to the current last element.
    SkipListProof prove_existence(std::uint64_t i) const { return prove_precedence(i, size()); }

private:
    SkipListStore(const HashConfig& cfg, const Digest& genesis, SkipListOptions opts)
        : cfg_(cfg), genesis_(genesis), opts_(opts), cache_(kCacheSlots) {}

    static std::filesystem::path index_path(const std::filesystem::path& p) {
        auto q = p;
        q += ".idx";
        return q;
    }

    // Direct-mapped authenticator cache; deterministic, bounded.
    static constexpr size_t kCacheSlots = 1 << 16;
    std::optional<Digest> cache_get(std::uint64_t i) const {
        const auto& slot = cache_[i % kCacheSlots];
        if (slot.first == i && slot.second.width) return slot.second;
        return std::nullopt;
    }
    void cache_put(std::uint64_t i, const Digest& d) const {
        cache_[i % kCacheSlots] = {i, d};
    }

    HashConfig cfg_;
    Digest genesis_;
    SkipListOptions opts_;
    FdFile data_;
    FdFile index_;
    std::uint64_t header_size_ = 0;
    std::uint64_t data_end_ = 0;
    std::vector<std::uint64_t> ends_;
    mutable std::vector<std::pair<std::uint64_t, Digest>> cache_;
};

}  // namespace timeweave
