// Copyright (c) the timeweave authors. All rights reserved.
// Licensed under the Apache 2.0 License.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <unordered_map>
#include <vector>

#include "timeweave/bytes.hpp"
#include "timeweave/counters.hpp"
#include "timeweave/crypto.hpp"
#include "timeweave/encode.hpp"
#include "timeweave/skiplist.hpp"

namespace timeweave {

// Disk-based persistent authenticated dictionary.
//
// Keys live in disk blocks arranged as a B-tree of order r (each non-root
// block holds r-1..2r-1 keys). Within a block the keys form a balanced
// binary search tree; stitched through the child-block gaps, the per-block
// trees make one virtual binary search tree over the whole key set. That
// virtual tree is what gets authenticated: the label of a key node is
//     H( label(left), H(key), H(value), label(right) )
// where the label of an absent (NIL) child is the freshness authenticator
// that was in effect when the node version was created. Proofs are descent
// paths in the virtual tree and verify against the snapshot root label.
//
// Mutations accumulate in an open delta; close_snapshot() writes one new
// immutable version of every block on a path to a change (up to V versions
// per block, after which the block is re-allocated under a fresh id) and
// appends the new root label to an authenticated skip list of snapshot
// roots. The head of that list digests the dictionary's entire history.
//
// The in-block tree is rebuilt to a canonical balanced shape at every
// close, so labels depend only on key order and commit history, never on
// rotation order. A node version is carried over (keeping its freshness)
// only when its key, value and both child identities are unchanged.

struct RbbOptions {
    std::uint32_t block_size = 16384;
    std::uint32_t order = 0;          // r; 0 derives it from block size and digest width
    std::uint32_t version_slots = 3;  // V
    bool write_through = true;
};

inline std::uint32_t derive_order(std::uint32_t block_size, std::uint8_t width) {
    std::uint32_t per_key = 7u * width / 2u;  // key, value and freshness digests plus pointers
    std::uint32_t r = block_size / per_key;
    return r > 5 ? r - 1 : 4;
}

struct RbbSnapshot {
    std::uint64_t id = 0;
    Digest root_label;
    std::uint64_t root_block = 0;
    Digest freshness;  // NIL label used by node versions created in this snapshot
};

// ---------------------------------------------------------------------------
// Proofs

struct TreeStep {
    Bytes key;
    Digest value_digest;
    Digest sibling;   // label of the child not descended into
    bool down_left = false;

    bool operator==(const TreeStep&) const = default;
};

/// Descent path in the virtual tree. For existence proofs, steps[target]
/// holds the matched key and `target_value` its raw value; the path may
/// continue past the target down to an adjacent NIL so the proof also
/// exposes a freshness label. For absence proofs the whole path follows
/// search order and `final_label` is the NIL where the key would live.
struct TreeProof {
    bool existence = false;
    std::vector<TreeStep> steps;
    std::int64_t target = -1;
    Bytes target_value;
    Digest final_label;

    std::uint64_t digest_count() const { return 2 * steps.size() + 1; }

    Bytes encode() const {
        Encoder e;
        e.u64(existence ? 1 : 0).u64(steps.size());
        for (const auto& s : steps) {
            e.bytes(s.key);
            e << s.value_digest << s.sibling;
            e.u64(s.down_left ? 1 : 0);
        }
        e.u64(static_cast<std::uint64_t>(target + 1));
        e.bytes(target_value);
        e << final_label;
        return e.take();
    }
    static TreeProof decode(Decoder& d, const HashConfig& cfg) {
        TreeProof p;
        p.existence = d.u64() == 1;
        std::uint64_t n = d.u64();
        if (n > 1u << 20) throw CodecError("tree proof: absurd step count");
        for (std::uint64_t i = 0; i < n; ++i) {
            TreeStep s;
            s.key = d.bytes();
            s.value_digest = read_digest(d, cfg);
            s.sibling = read_digest(d, cfg);
            s.down_left = d.u64() == 1;
            p.steps.push_back(std::move(s));
        }
        p.target = static_cast<std::int64_t>(d.u64()) - 1;
        p.target_value = d.bytes();
        p.final_label = read_digest(d, cfg);
        return p;
    }
};

struct TreeProofResult {
    bool ok = false;
    bool present = false;
    Digest value_digest;
    Digest final_label;  // exposed bottom label; freshness checks compare it
};

inline Digest key_node_label(const HashConfig& cfg, const Digest& left, const Digest& key_digest,
                             const Digest& value_digest, const Digest& right) {
    Encoder e;
    e << left << key_digest << value_digest << right;
    return hash_bytes(cfg, e.view());
}

/// Structural verification: label replay to the root plus search-order
/// consistency of the descent. Callers that rely on an absence verdict or
/// on freshness must additionally check `final_label` against the set of
/// NIL authenticators they trust; a label alone cannot distinguish a NIL
/// from a subtree.
inline TreeProofResult verify_tree_proof(const HashConfig& cfg, const TreeProof& p,
                                         const Digest& root_label, ByteView key) {
    TreeProofResult res;
    // replay labels bottom-up
    Digest acc = p.final_label;
    for (auto it = p.steps.rbegin(); it != p.steps.rend(); ++it) {
        Digest kd = hash_bytes(cfg, it->key);
        acc = it->down_left ? key_node_label(cfg, acc, kd, it->value_digest, it->sibling)
                            : key_node_label(cfg, it->sibling, kd, it->value_digest, acc);
    }
    if (acc != root_label) return res;

    // search-order consistency top-down
    Bytes query(key.begin(), key.end());
    const Bytes* lo = nullptr;
    const Bytes* hi = nullptr;
    if (p.existence && (p.target < 0 || p.target >= static_cast<std::int64_t>(p.steps.size())))
        return res;
    for (size_t i = 0; i < p.steps.size(); ++i) {
        const TreeStep& s = p.steps[i];
        if (lo && !(*lo < s.key)) return res;
        if (hi && !(s.key < *hi)) return res;
        auto si = static_cast<std::int64_t>(i);
        if (p.existence && si == p.target) {
            if (s.key != query) return res;
            if (hash_bytes(cfg, p.target_value) != s.value_digest) return res;
        } else if (!p.existence || si < p.target) {
            // must follow the search path for the query
            if (s.key == query) return res;
            if ((query < s.key) != s.down_left) return res;
        }
        if (s.down_left)
            hi = &s.key;
        else
            lo = &s.key;
    }
    res.ok = true;
    res.present = p.existence;
    if (p.existence) res.value_digest = p.steps[p.target].value_digest;
    res.final_label = p.final_label;
    return res;
}

// ---------------------------------------------------------------------------
// Block storage

namespace rbb_detail {

struct KeyNodeRec {
    Bytes key;
    Bytes value;
    Digest nil_freshness;
};

struct BlockVersion {
    std::uint64_t block_id = 0;
    std::uint64_t snapshot = 0;
    std::vector<KeyNodeRec> keys;
    std::vector<std::uint64_t> children;  // empty for leaf blocks
    Digest empty_label;                   // label when keys is empty
    Digest subtree_label;                 // label of the block's virtual subtree

    bool leaf() const { return children.empty(); }

    Bytes encode() const {
        Encoder e;
        e.u64(block_id).u64(snapshot).u64(keys.size());
        for (const auto& k : keys) {
            e.bytes(k.key).bytes(k.value);
            e << k.nil_freshness;
        }
        e.u64(children.size());
        for (auto c : children) e.u64(c);
        e << empty_label << subtree_label;
        return e.take();
    }
    static BlockVersion decode(Decoder& d, const HashConfig& cfg) {
        BlockVersion v;
        v.block_id = d.u64();
        v.snapshot = d.u64();
        std::uint64_t nk = d.u64();
        for (std::uint64_t i = 0; i < nk; ++i) {
            KeyNodeRec k;
            k.key = d.bytes();
            k.value = d.bytes();
            k.nil_freshness = read_digest(d, cfg);
            v.keys.push_back(std::move(k));
        }
        std::uint64_t nc = d.u64();
        for (std::uint64_t i = 0; i < nc; ++i) v.children.push_back(d.u64());
        v.empty_label = read_digest(d, cfg);
        v.subtree_label = read_digest(d, cfg);
        return v;
    }
};

/// Block file: fixed-size header, then version records padded out to whole
/// disk block slots. The companion index file has one fixed-width entry per
/// version record; a version is committed once indexed.
class BlockFile {
public:
    static constexpr char kMagic[4] = {'T', 'W', 'R', 'B'};
    static constexpr std::uint16_t kFormatVersion = 1;
    static constexpr size_t kIndexEntry = 32;

    struct Location {
        std::uint64_t snapshot;
        std::uint64_t offset;
        std::uint64_t slots;
    };

    BlockFile() = default;

    static BlockFile create(const std::filesystem::path& dir, const HashConfig& cfg,
                            const RbbOptions& opts) {
        BlockFile f;
        f.cfg_ = cfg;
        f.opts_ = opts;
        if (opts.order == 0) f.opts_.order = derive_order(opts.block_size, cfg.width);
        f.dat_ = FdFile::open_rw(dir / "blocks.dat", true);
        f.idx_ = FdFile::open_rw(dir / "blocks.idx", true);
        f.dat_.truncate(0);
        f.idx_.truncate(0);
        Bytes hdr;
        hdr.insert(hdr.end(), kMagic, kMagic + 4);
        auto be16 = [&](std::uint16_t v) {
            hdr.push_back(v >> 8);
            hdr.push_back(v & 0xff);
        };
        auto be32 = [&](std::uint32_t v) {
            for (int i = 3; i >= 0; --i) hdr.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        };
        be16(kFormatVersion);
        be32(f.opts_.block_size);
        be32(f.opts_.order);
        be32(f.opts_.version_slots);
        be16(static_cast<std::uint16_t>(cfg.alg));
        hdr.push_back(cfg.width);
        f.dat_.write_at(0, hdr);
        f.data_end_ = f.opts_.block_size;  // header occupies slot 0
        return f;
    }

    static BlockFile open(const std::filesystem::path& dir, std::uint64_t committed_snapshots,
                          bool write_through) {
        BlockFile f;
        f.dat_ = FdFile::open_rw(dir / "blocks.dat", false);
        f.idx_ = FdFile::open_rw(dir / "blocks.idx", false);
        Bytes hdr = f.dat_.read_at(0, 21);
        if (std::memcmp(hdr.data(), kMagic, 4) != 0) throw CodecError("not a block store");
        if ((hdr[4] << 8 | hdr[5]) != kFormatVersion) throw CodecError("unsupported version");
        auto be32 = [&](size_t at) {
            return std::uint32_t(hdr[at]) << 24 | std::uint32_t(hdr[at + 1]) << 16 |
                   std::uint32_t(hdr[at + 2]) << 8 | hdr[at + 3];
        };
        f.opts_.block_size = be32(6);
        f.opts_.order = be32(10);
        f.opts_.version_slots = be32(14);
        f.cfg_.alg = static_cast<HashAlg>(hdr[18] << 8 | hdr[19]);
        f.cfg_.width = hdr[20];
        f.opts_.write_through = write_through;
        f.data_end_ = f.opts_.block_size;
        std::uint64_t entries = f.idx_.size() / kIndexEntry;
        Bytes raw = f.idx_.read_at(0, entries * kIndexEntry);
        auto rd64 = [&](size_t at) {
            std::uint64_t v = 0;
            for (int i = 0; i < 8; ++i) v = v << 8 | raw[at + i];
            return v;
        };
        std::uint64_t keep = 0;
        for (std::uint64_t i = 0; i < entries; ++i) {
            std::uint64_t block = rd64(i * 32), snap = rd64(i * 32 + 8);
            std::uint64_t off = rd64(i * 32 + 16), slots = rd64(i * 32 + 24);
            // versions past the committed snapshot count are leftovers from
            // an interrupted close; drop them
            if (snap > committed_snapshots) break;
            f.versions_[block].push_back({snap, off, slots});
            f.next_block_ = std::max(f.next_block_, block + 1);
            f.data_end_ = std::max(f.data_end_, off + slots * f.opts_.block_size);
            ++keep;
        }
        if (keep != entries) {
            f.idx_.truncate(keep * kIndexEntry);
            if (write_through) f.idx_.sync();
        }
        return f;
    }

    const HashConfig& hash_config() const { return cfg_; }
    const RbbOptions& options() const { return opts_; }
    std::uint32_t order() const { return opts_.order; }

    std::uint64_t alloc_block() { return next_block_++; }

    std::uint64_t version_count(std::uint64_t block) const {
        auto it = versions_.find(block);
        return it == versions_.end() ? 0 : it->second.size();
    }

    void append_version(const BlockVersion& v) {
        Bytes rec = v.encode();
        std::uint64_t slots = (rec.size() + opts_.block_size - 1) / opts_.block_size;
        rec.resize(slots * opts_.block_size, 0);
        dat_.write_at(data_end_, rec);
        count_disk_blocks(slots);
        Bytes ie;
        put_be64(ie, v.block_id);
        put_be64(ie, v.snapshot);
        put_be64(ie, data_end_);
        put_be64(ie, slots);
        idx_.write_at(versions_total() * kIndexEntry, ie);
        versions_[v.block_id].push_back({v.snapshot, data_end_, slots});
        data_end_ += slots * opts_.block_size;
        cache_.emplace(cache_key(v.block_id, v.snapshot), v);
    }

    void sync() {
        dat_.sync();
        idx_.sync();
    }

    /// Latest version of `block` with snapshot <= s; throws if none.
    const BlockVersion& version_at(std::uint64_t block, std::uint64_t s) const {
        auto it = versions_.find(block);
        if (it == versions_.end()) throw CodecError("unknown block");
        const auto& vec = it->second;
        const Location* found = nullptr;
        for (const auto& loc : vec) {
            if (loc.snapshot <= s) found = &loc;
            else break;
        }
        if (!found) throw CodecError("no version at snapshot");
        return load(block, *found);
    }

    const BlockVersion* latest(std::uint64_t block) const {
        auto it = versions_.find(block);
        if (it == versions_.end() || it->second.empty()) return nullptr;
        return &load(block, it->second.back());
    }

    std::uint64_t versions_total() const {
        std::uint64_t n = 0;
        for (const auto& [_, v] : versions_) n += v.size();
        return n;
    }

    std::uint64_t file_bytes() const { return data_end_; }

    template <typename F>
    void for_each_block(F&& fn) const {
        for (const auto& [id, locs] : versions_) fn(id, locs);
    }

private:
    static std::uint64_t cache_key(std::uint64_t block, std::uint64_t snap) {
        return block * 0x100000000ull ^ snap;
    }
    const BlockVersion& load(std::uint64_t block, const Location& loc) const {
        auto key = cache_key(block, loc.snapshot);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        Bytes rec = dat_.read_at(loc.offset, loc.slots * opts_.block_size);
        count_disk_blocks(loc.slots);
        Decoder d(rec);
        BlockVersion v = BlockVersion::decode(d, cfg_);
        if (v.block_id != block) throw CodecError("block id mismatch");
        return cache_.emplace(key, std::move(v)).first->second;
    }

    HashConfig cfg_;
    RbbOptions opts_;
    FdFile dat_;
    FdFile idx_;
    std::uint64_t data_end_ = 0;
    std::uint64_t next_block_ = 1;
    std::map<std::uint64_t, std::vector<Location>> versions_;
    mutable std::unordered_map<std::uint64_t, BlockVersion> cache_;
};

// Canonical in-block shape: the complete binary search tree over the sorted
// key list, root at the middle. Child identity of a key is what freshness
// comparison is based on.
struct ChildIdent {
    enum Kind : std::uint8_t { nil = 0, key = 1, child_block = 2 } kind = nil;
    Bytes key_bytes;
    std::uint64_t block = 0;

    bool operator==(const ChildIdent&) const = default;
};

template <typename KeyAt>
ChildIdent range_ident(size_t lo, size_t hi_plus1, bool leaf,
                       const std::vector<std::uint64_t>& children, KeyAt&& key_at) {
    if (lo >= hi_plus1) {
        if (leaf) return {ChildIdent::nil, {}, 0};
        return {ChildIdent::child_block, {}, children[lo]};
    }
    size_t mid = (lo + hi_plus1 - 1) / 2;
    return {ChildIdent::key, key_at(mid), 0};
}

}  // namespace rbb_detail

// ---------------------------------------------------------------------------
// The tree

class RbbTree {
public:
    static constexpr std::uint64_t kOpenSnapshot = ~0ull;

    static RbbTree create(const std::filesystem::path& dir, const HashConfig& cfg,
                          const Digest& genesis, RbbOptions opts = {}) {
        std::filesystem::create_directories(dir);
        RbbTree t;
        t.dir_ = dir;
        t.cfg_ = cfg;
        t.genesis_ = genesis;
        t.blocks_ = rbb_detail::BlockFile::create(dir, cfg, opts);
        t.opts_ = t.blocks_.options();
        SkipListOptions slopts{opts.write_through};
        t.roots_impl_ = SkipListStore::create(dir / "roots.twsl", cfg, genesis, slopts);
        t.snapdir_ = FdFile::open_rw(dir / "snapshots.dat", true);
        t.snapdir_.truncate(0);
        t.root_block_ = t.blocks_.alloc_block();
        t.cur_[t.root_block_] = CurBlock{};
        t.touched_.insert(t.root_block_);
        t.content_dirty_.insert(t.root_block_);
        t.freshness_ = genesis;
        return t;
    }

    static RbbTree open(const std::filesystem::path& dir, bool write_through = true) {
        RbbTree t;
        t.dir_ = dir;
        SkipListOptions slopts{write_through};
        t.roots_impl_ = SkipListStore::open(dir / "roots.twsl", slopts);
        t.cfg_ = t.roots().hash_config();
        t.genesis_ = t.roots().genesis();
        t.blocks_ = rbb_detail::BlockFile::open(dir, t.roots().size(), write_through);
        t.opts_ = t.blocks_.options();
        t.snapdir_ = FdFile::open_rw(dir / "snapshots.dat", false);
        // replay the snapshot directory, dropping any record past the
        // committed count (interrupted close)
        Bytes raw = t.snapdir_.read_at(0, t.snapdir_.size());
        Decoder d(raw);
        std::uint64_t keep_bytes = 0;
        while (!d.done() && t.snapshots_.size() < t.roots().size()) {
            RbbSnapshot s;
            s.id = d.u64();
            s.root_block = d.u64();
            s.root_label = read_digest(d, t.cfg_);
            s.freshness = read_digest(d, t.cfg_);
            t.snapshots_.push_back(s);
            keep_bytes = raw.size() - d.remaining();
        }
        if (t.snapshots_.size() != t.roots().size())
            throw CodecError("snapshot directory behind root list");
        if (keep_bytes != raw.size()) t.snapdir_.truncate(keep_bytes);
        if (t.snapshots_.empty()) {
            t.root_block_ = t.blocks_.alloc_block();
            t.cur_[t.root_block_] = CurBlock{};
            t.touched_.insert(t.root_block_);
            t.content_dirty_.insert(t.root_block_);
            t.freshness_ = t.genesis_;
        } else {
            t.root_block_ = t.snapshots_.back().root_block;
            t.freshness_ = t.roots().head();
        }
        return t;
    }

    const HashConfig& hash_config() const { return cfg_; }
    std::uint32_t order() const { return opts_.order; }
    std::uint64_t snapshot_count() const { return snapshots_.size(); }
    const RbbSnapshot& snapshot_info(std::uint64_t id) const {
        if (id == 0 || id > snapshots_.size()) throw CodecError("unknown snapshot id");
        return snapshots_[id - 1];
    }

    /// Freshness authenticator for NIL children of key nodes created from
    /// now until the next close.
    void set_freshness(const Digest& a) { freshness_ = a; }
    const Digest& current_freshness() const { return freshness_; }

    /// One-way digest of the entire history: head of the snapshot root list.
    Digest digest() const { return roots().head(); }
    const SkipListStore& root_list() const { return roots(); }

    void insert(ByteView key, ByteView value) {
        Bytes k(key.begin(), key.end()), v(value.begin(), value.end());
        // split a full root before descending
        if (cur(root_block_).entries.size() == max_keys()) split_root();
        insert_nonfull(root_block_, std::move(k), std::move(v));
    }

    void remove(ByteView key) {
        Bytes k(key.begin(), key.end());
        if (!lookup_open(k)) return;  // no-op removal registers the lookup only
        remove_rec(root_block_, k);
        // shrink the root when it holds no keys but one child
        CurBlock& rb = cur(root_block_);
        if (rb.entries.empty() && !rb.children.empty()) {
            std::uint64_t old = root_block_;
            root_block_ = rb.children[0];
            cur_.erase(old);
            dropped_.insert(old);
            touched_.insert(root_block_);
            content_dirty_.insert(root_block_);  // forces a version under the new root
        }
    }

    std::optional<Bytes> lookup(std::uint64_t snapshot, ByteView key) const {
        Bytes k(key.begin(), key.end());
        if (snapshot == kOpenSnapshot) return lookup_open(k);
        const RbbSnapshot& s = snapshot_info(snapshot);
        std::uint64_t b = s.root_block;
        while (true) {
            const auto& v = blocks_.version_at(b, snapshot);
            auto [found, idx] = find_slot(v, k);
            if (found) return v.keys[idx].value;
            if (v.leaf()) return std::nullopt;
            b = v.children[idx];
        }
    }

    /// Closes the open delta: writes block versions, appends the root label
    /// to the snapshot root list, and installs the list head as the default
    /// freshness for the next snapshot.
    RbbSnapshot close_snapshot() {
        std::uint64_t id = snapshots_.size() + 1;
        auto [label, final_root, made] = close_walk(root_block_, id);
        (void)made;
        root_block_ = final_root;
        if (opts_.write_through) blocks_.sync();
        RbbSnapshot s;
        s.id = id;
        s.root_label = label;
        s.root_block = final_root;
        s.freshness = freshness_;
        Encoder e;
        e.u64(s.id).u64(s.root_block);
        e << s.root_label << s.freshness;
        snapdir_.write_at(snapdir_.size(), e.view());
        if (opts_.write_through) snapdir_.sync();
        roots().append(label);  // commits the snapshot
        snapshots_.push_back(s);
        touched_.clear();
        content_dirty_.clear();
        dropped_.clear();
        freshness_ = roots().head();
        return s;
    }

    // ---- proofs ----

    TreeProof prove(std::uint64_t snapshot, ByteView key) const {
        return prove_impl(snapshot, key, false);
    }

    /// Existence proof extended past the target to an adjacent NIL whose
    /// label carries the snapshot's freshness authenticator. For any key
    /// inserted in `snapshot` such a NIL exists by construction.
    TreeProof prove_fresh(std::uint64_t snapshot, ByteView key) const {
        return prove_impl(snapshot, key, true);
    }

    // ---- introspection used by tests and benchmarks ----

    std::uint64_t max_virtual_depth(std::uint64_t snapshot) const {
        const RbbSnapshot& s = snapshot_info(snapshot);
        return depth_rec(s.root_block, snapshot);
    }

    std::uint64_t stored_versions() const { return blocks_.versions_total(); }
    std::uint64_t file_bytes() const { return blocks_.file_bytes(); }

    /// Checks B-tree shape invariants for every committed version of every
    /// block, and occupancy plus equal leaf depth for every snapshot.
    void check_block_invariants() const {
        blocks_.for_each_block([&](std::uint64_t id, const auto& locs) {
            if (locs.size() > opts_.version_slots) throw CodecError("version slots exceeded");
            for (const auto& loc : locs) {
                const auto& v = blocks_.version_at(id, loc.snapshot);
                if (!v.leaf() && v.children.size() != v.keys.size() + 1)
                    throw CodecError("child count mismatch");
                if (v.keys.size() > max_keys()) throw CodecError("block overfull");
                for (size_t i = 1; i < v.keys.size(); ++i)
                    if (!(v.keys[i - 1].key < v.keys[i].key)) throw CodecError("keys unsorted");
            }
        });
        for (std::uint64_t s = 1; s <= snapshots_.size(); ++s) {
            std::optional<std::uint64_t> leaf_depth;
            check_shape(snapshots_[s - 1].root_block, s, true, 0, leaf_depth);
        }
    }

private:
    struct CurBlock {
        std::vector<std::pair<Bytes, Bytes>> entries;  // sorted (key, value)
        std::vector<std::uint64_t> children;
        bool leaf() const { return children.empty(); }
    };

    size_t max_keys() const { return 2 * static_cast<size_t>(opts_.order) - 1; }
    size_t min_keys() const { return static_cast<size_t>(opts_.order) - 1; }

    CurBlock& cur(std::uint64_t id) {
        auto it = cur_.find(id);
        if (it != cur_.end()) return it->second;
        const auto* v = blocks_.latest(id);
        if (!v) throw CodecError("block has no committed version");
        CurBlock cb;
        for (const auto& k : v->keys) cb.entries.emplace_back(k.key, k.value);
        cb.children = v->children;
        return cur_.emplace(id, std::move(cb)).first->second;
    }
    const CurBlock& cur(std::uint64_t id) const { return const_cast<RbbTree*>(this)->cur(id); }

    void mark(std::uint64_t id, bool content) {
        touched_.insert(id);
        if (content) content_dirty_.insert(id);
    }

    // lower_bound position of k; (found, idx): idx is the key slot if found,
    // otherwise the child gap index.
    template <typename BlockLike>
    static std::pair<bool, size_t> find_slot_impl(const BlockLike& keys, const Bytes& k) {
        size_t lo = 0, hi = keys.size();
        while (lo < hi) {
            size_t mid = (lo + hi) / 2;
            if (key_of(keys[mid]) < k)
                lo = mid + 1;
            else
                hi = mid;
        }
        bool found = lo < keys.size() && key_of(keys[lo]) == k;
        return {found, lo};
    }
    static const Bytes& key_of(const rbb_detail::KeyNodeRec& r) { return r.key; }
    static const Bytes& key_of(const std::pair<Bytes, Bytes>& p) { return p.first; }

    static std::pair<bool, size_t> find_slot(const rbb_detail::BlockVersion& v, const Bytes& k) {
        return find_slot_impl(v.keys, k);
    }
    static std::pair<bool, size_t> find_slot(const CurBlock& b, const Bytes& k) {
        return find_slot_impl(b.entries, k);
    }

    std::optional<Bytes> lookup_open(const Bytes& k) const {
        std::uint64_t b = root_block_;
        while (true) {
            const CurBlock& cb = cur(b);
            auto [found, idx] = find_slot(cb, k);
            if (found) return cb.entries[idx].second;
            if (cb.leaf()) return std::nullopt;
            b = cb.children[idx];
        }
    }

    // ---- B-tree mutation (preemptive split / merge-on-descent) ----

    void split_root() {
        std::uint64_t left = root_block_;
        std::uint64_t right = blocks_.alloc_block();
        std::uint64_t top = blocks_.alloc_block();
        CurBlock& lb = cur(left);
        CurBlock rb;
        size_t mid = min_keys();  // median index, r-1
        auto median = lb.entries[mid];
        rb.entries.assign(lb.entries.begin() + mid + 1, lb.entries.end());
        lb.entries.resize(mid);
        if (!lb.leaf()) {
            rb.children.assign(lb.children.begin() + mid + 1, lb.children.end());
            lb.children.resize(mid + 1);
        }
        CurBlock tb;
        tb.entries.push_back(median);
        tb.children = {left, right};
        cur_[right] = std::move(rb);
        cur_[top] = std::move(tb);
        root_block_ = top;
        mark(left, true);
        mark(right, true);
        mark(top, true);
    }

    void split_child(std::uint64_t parent, size_t gap) {
        CurBlock& pb = cur(parent);
        std::uint64_t left = pb.children[gap];
        std::uint64_t right = blocks_.alloc_block();
        CurBlock& lb = cur(left);
        CurBlock rb;
        size_t mid = min_keys();
        auto median = lb.entries[mid];
        rb.entries.assign(lb.entries.begin() + mid + 1, lb.entries.end());
        lb.entries.resize(mid);
        if (!lb.leaf()) {
            rb.children.assign(lb.children.begin() + mid + 1, lb.children.end());
            lb.children.resize(mid + 1);
        }
        pb.entries.insert(pb.entries.begin() + gap, median);
        pb.children.insert(pb.children.begin() + gap + 1, right);
        cur_[right] = std::move(rb);
        mark(parent, true);
        mark(left, true);
        mark(right, true);
    }

    void insert_nonfull(std::uint64_t id, Bytes k, Bytes v) {
        while (true) {
            CurBlock& cb = cur(id);
            auto [found, idx] = find_slot(cb, k);
            if (found) {
                if (cb.entries[idx].second != v) {
                    cb.entries[idx].second = std::move(v);
                    mark(id, true);
                }
                return;
            }
            if (cb.leaf()) {
                cb.entries.insert(cb.entries.begin() + idx, {std::move(k), std::move(v)});
                mark(id, true);
                return;
            }
            if (cur(cb.children[idx]).entries.size() == max_keys()) {
                split_child(id, idx);
                continue;  // re-evaluate position against the promoted median
            }
            touched_.insert(id);
            id = cb.children[idx];
        }
    }

    // Ensures child at `gap` of `parent` has more than the minimum number of
    // keys, borrowing from a sibling or merging. Returns the (possibly
    // changed) child id to descend into.
    std::uint64_t fortify_child(std::uint64_t parent, size_t gap) {
        CurBlock& pb = cur(parent);
        std::uint64_t child = pb.children[gap];
        CurBlock& cb = cur(child);
        if (cb.entries.size() > min_keys()) return child;
        if (gap > 0 && cur(pb.children[gap - 1]).entries.size() > min_keys()) {
            // rotate a key through the parent from the left sibling
            std::uint64_t lid = pb.children[gap - 1];
            CurBlock& lb = cur(lid);
            cb.entries.insert(cb.entries.begin(), pb.entries[gap - 1]);
            pb.entries[gap - 1] = lb.entries.back();
            lb.entries.pop_back();
            if (!lb.leaf()) {
                cb.children.insert(cb.children.begin(), lb.children.back());
                lb.children.pop_back();
            }
            mark(parent, true);
            mark(child, true);
            mark(lid, true);
            return child;
        }
        if (gap < pb.children.size() - 1 &&
            cur(pb.children[gap + 1]).entries.size() > min_keys()) {
            std::uint64_t rid = pb.children[gap + 1];
            CurBlock& rb = cur(rid);
            cb.entries.push_back(pb.entries[gap]);
            pb.entries[gap] = rb.entries.front();
            rb.entries.erase(rb.entries.begin());
            if (!rb.leaf()) {
                cb.children.push_back(rb.children.front());
                rb.children.erase(rb.children.begin());
            }
            mark(parent, true);
            mark(child, true);
            mark(rid, true);
            return child;
        }
        // merge with a sibling around the separating key
        size_t lgap = gap > 0 ? gap - 1 : gap;  // merge children lgap and lgap+1
        std::uint64_t lid = pb.children[lgap];
        std::uint64_t rid = pb.children[lgap + 1];
        CurBlock& lb = cur(lid);
        CurBlock& rb = cur(rid);
        lb.entries.push_back(pb.entries[lgap]);
        lb.entries.insert(lb.entries.end(), rb.entries.begin(), rb.entries.end());
        lb.children.insert(lb.children.end(), rb.children.begin(), rb.children.end());
        pb.entries.erase(pb.entries.begin() + lgap);
        pb.children.erase(pb.children.begin() + lgap + 1);
        cur_.erase(rid);
        dropped_.insert(rid);
        mark(parent, true);
        mark(lid, true);
        return lid;
    }

    void remove_rec(std::uint64_t id, const Bytes& k) {
        CurBlock& cb = cur(id);
        auto [found, idx] = find_slot(cb, k);
        if (found) {
            if (cb.leaf()) {
                cb.entries.erase(cb.entries.begin() + idx);
                mark(id, true);
                return;
            }
            // replace by in-order predecessor from a fortified subtree
            std::uint64_t child = fortify_child(id, idx);
            CurBlock& cb2 = cur(id);
            auto [found2, idx2] = find_slot(cb2, k);
            if (!found2) {
                // the separator moved during fortify; continue the descent
                remove_rec(child, k);
                return;
            }
            std::uint64_t pred_block = cb2.children[idx2];
            // predecessor = max key of the left subtree
            Bytes pk, pv;
            {
                std::uint64_t b = pred_block;
                while (true) {
                    CurBlock& x = cur(b);
                    if (x.leaf()) {
                        pk = x.entries.back().first;
                        pv = x.entries.back().second;
                        break;
                    }
                    b = x.children.back();
                }
            }
            cb2.entries[idx2] = {pk, pv};
            mark(id, true);
            remove_rec(fortify_child(id, idx2), pk);
            return;
        }
        if (cb.leaf()) return;  // absent
        std::uint64_t child = fortify_child(id, idx);
        touched_.insert(id);
        remove_rec(child, k);
    }

    // ---- snapshot close ----

    struct WalkResult {
        Digest label;
        std::uint64_t final_id;
        bool made_version;
    };

    WalkResult close_walk(std::uint64_t id, std::uint64_t snapshot) {
        bool needs = content_dirty_.count(id) > 0;
        CurBlock& cb = cur(id);
        std::vector<Digest> child_labels(cb.children.size());
        for (size_t g = 0; g < cb.children.size(); ++g) {
            std::uint64_t c = cb.children[g];
            if (touched_.count(c)) {
                WalkResult wr = close_walk(c, snapshot);
                child_labels[g] = wr.label;
                if (wr.final_id != c) {
                    cb.children[g] = wr.final_id;
                    needs = true;
                }
                needs = needs || wr.made_version;
            } else {
                const auto* v = blocks_.latest(c);
                if (!v) throw CodecError("untouched block missing version");
                child_labels[g] = v->subtree_label;
            }
        }
        if (!needs) {
            const auto* v = blocks_.latest(id);
            if (!v) throw CodecError("clean block missing version");
            return {v->subtree_label, id, false};
        }

        const rbb_detail::BlockVersion* prev = blocks_.latest(id);
        std::uint64_t target = id;
        if (blocks_.version_count(id) >= opts_.version_slots) {
            target = blocks_.alloc_block();
        }
        rbb_detail::BlockVersion nv;
        nv.block_id = target;
        nv.snapshot = snapshot;
        nv.children = cb.children;
        nv.keys.resize(cb.entries.size());

        // freshness: carry a node version over only if key, value and both
        // canonical child identities are unchanged
        std::map<Bytes, std::pair<size_t, std::pair<rbb_detail::ChildIdent, rbb_detail::ChildIdent>>>
            prev_idents;
        if (prev) {
            for (size_t i = 0; i < prev->keys.size(); ++i)
                prev_idents[prev->keys[i].key] = {i, idents_at(*prev, i)};
        }
        for (size_t i = 0; i < cb.entries.size(); ++i) {
            nv.keys[i].key = cb.entries[i].first;
            nv.keys[i].value = cb.entries[i].second;
            auto idents = idents_for(cb, i);
            Digest fresh = freshness_;
            auto it = prev ? prev_idents.find(cb.entries[i].first) : prev_idents.end();
            if (it != prev_idents.end()) {
                const auto& [pidx, pid] = it->second;
                if (prev->keys[pidx].value == cb.entries[i].second && pid == idents)
                    fresh = prev->keys[pidx].nil_freshness;
            }
            nv.keys[i].nil_freshness = fresh;
        }
        nv.empty_label = freshness_;
        if (cb.entries.empty() && prev && prev->keys.empty()) nv.empty_label = prev->empty_label;
        nv.subtree_label = label_range(nv, child_labels, 0, nv.keys.size(),
                                       cb.entries.empty() ? nv.empty_label : Digest{});
        blocks_.append_version(nv);
        if (target != id) {
            cur_[target] = std::move(cb);
            cur_.erase(id);
        }
        return {nv.subtree_label, target, true};
    }

    std::pair<rbb_detail::ChildIdent, rbb_detail::ChildIdent> idents_for(const CurBlock& cb,
                                                                         size_t i) const {
        return idents_impl(cb.entries.size(), cb.leaf(), cb.children, i,
                           [&](size_t j) { return cb.entries[j].first; });
    }
    std::pair<rbb_detail::ChildIdent, rbb_detail::ChildIdent> idents_at(
        const rbb_detail::BlockVersion& v, size_t i) const {
        return idents_impl(v.keys.size(), v.leaf(), v.children, i,
                           [&](size_t j) { return v.keys[j].key; });
    }

    template <typename KeyAt>
    std::pair<rbb_detail::ChildIdent, rbb_detail::ChildIdent> idents_impl(
        size_t m, bool leaf, const std::vector<std::uint64_t>& children, size_t want,
        KeyAt&& key_at) const {
        // find the canonical position of index `want` and report its child
        // identities
        size_t lo = 0, hi = m;  // [lo, hi)
        while (true) {
            size_t mid = (lo + hi - 1) / 2;
            if (mid == want) {
                auto left = rbb_detail::range_ident(lo, mid, leaf, children, key_at);
                auto right = rbb_detail::range_ident(mid + 1, hi, leaf, children, key_at);
                return {left, right};
            }
            if (want < mid)
                hi = mid;
            else
                lo = mid + 1;
        }
    }

    // Label of the canonical subtree over keys [lo, hi) of version v.
    // `parent_nil` is the label of an empty range when (and only when) the
    // whole block is empty; non-empty ranges pass each node's own freshness.
    Digest label_range(const rbb_detail::BlockVersion& v, const std::vector<Digest>& child_labels,
                       size_t lo, size_t hi, const Digest& parent_nil) const {
        if (lo >= hi) {
            if (!v.leaf()) return child_labels[lo];
            return parent_nil;
        }
        size_t mid = (lo + hi - 1) / 2;
        const auto& k = v.keys[mid];
        Digest left = label_range(v, child_labels, lo, mid, k.nil_freshness);
        Digest right = label_range(v, child_labels, mid + 1, hi, k.nil_freshness);
        return key_node_label(cfg_, left, hash_bytes(cfg_, k.key), hash_bytes(cfg_, k.value),
                              right);
    }

    // ---- proof construction over committed snapshots ----

    const rbb_detail::BlockVersion& version_at(std::uint64_t block, std::uint64_t s) const {
        return blocks_.version_at(block, s);
    }

    Digest child_label(std::uint64_t block, std::uint64_t s) const {
        return version_at(block, s).subtree_label;
    }

    std::vector<Digest> child_labels_of(const rbb_detail::BlockVersion& v,
                                        std::uint64_t s) const {
        std::vector<Digest> labels(v.children.size());
        for (size_t g = 0; g < v.children.size(); ++g) labels[g] = child_label(v.children[g], s);
        return labels;
    }

    TreeProof prove_impl(std::uint64_t snapshot, ByteView key, bool fresh) const {
        const RbbSnapshot& sn = snapshot_info(snapshot);
        Bytes q(key.begin(), key.end());
        TreeProof p;
        std::uint64_t block = sn.root_block;
        Digest last_nil;  // freshness of the node owning the gap just entered
        while (true) {
            const auto& v = version_at(block, snapshot);
            auto labels = child_labels_of(v, snapshot);
            if (v.keys.empty()) {
                // only the empty root; absence proof with the empty label
                p.existence = false;
                p.final_label = v.empty_label;
                return p;
            }
            size_t lo = 0, hi = v.keys.size();
            while (true) {
                if (lo >= hi) {
                    if (!v.leaf()) break;  // descend into child block
                    p.existence = false;
                    p.final_label = last_nil;
                    return p;
                }
                size_t mid = (lo + hi - 1) / 2;
                const auto& kn = v.keys[mid];
                if (q == kn.key) {
                    p.target = static_cast<std::int64_t>(p.steps.size());
                    p.target_value = kn.value;
                    p.existence = true;
                    if (!fresh) {
                        TreeStep st;
                        st.key = kn.key;
                        st.value_digest = hash_bytes(cfg_, kn.value);
                        st.down_left = true;
                        st.sibling = label_range(v, labels, mid + 1, hi, kn.nil_freshness);
                        p.steps.push_back(std::move(st));
                        p.final_label = label_range(v, labels, lo, mid, kn.nil_freshness);
                        return p;
                    }
                    extend_to_fresh_nil(p, snapshot, sn.freshness, block, v, labels, lo, mid, hi);
                    return p;
                }
                bool left = q < kn.key;
                TreeStep st;
                st.key = kn.key;
                st.value_digest = hash_bytes(cfg_, kn.value);
                st.down_left = left;
                st.sibling = left ? label_range(v, labels, mid + 1, hi, kn.nil_freshness)
                                  : label_range(v, labels, lo, mid, kn.nil_freshness);
                p.steps.push_back(std::move(st));
                last_nil = kn.nil_freshness;
                if (left)
                    hi = mid;
                else
                    lo = mid + 1;
            }
            // crossing into child block at gap lo
            block = v.children[lo];
        }
    }

    // Extends an existence proof from the matched node down to an adjacent
    // NIL carrying `want` (the snapshot's freshness). One of the two
    // adjacent gap NILs must carry it for keys inserted in this snapshot;
    // if neither does (key predates the snapshot), the left NIL is used.
    void extend_to_fresh_nil(TreeProof& p, std::uint64_t snapshot, const Digest& want,
                             std::uint64_t block, const rbb_detail::BlockVersion& v,
                             const std::vector<Digest>& labels, size_t lo, size_t mid,
                             size_t hi) const {
        Digest left_nil = probe_adjacent(snapshot, block, v, lo, mid, hi, true);
        Digest right_nil = probe_adjacent(snapshot, block, v, lo, mid, hi, false);
        bool go_left = left_nil == want || right_nil != want;
        descend_adjacent(p, snapshot, v, labels, lo, mid, hi, go_left);
    }

    // Label of the NIL adjacent to key `mid` on the given side, without
    // recording steps.
    Digest probe_adjacent(std::uint64_t snapshot, std::uint64_t block,
                          const rbb_detail::BlockVersion& v0, size_t lo0, size_t mid0, size_t hi0,
                          bool left_side) const {
        const rbb_detail::BlockVersion* v = &v0;
        size_t lo = left_side ? lo0 : mid0 + 1;
        size_t hi = left_side ? mid0 : hi0;
        Digest owner_nil = v0.keys[mid0].nil_freshness;
        std::uint64_t b = block;
        while (true) {
            if (lo >= hi) {
                if (v->leaf()) return owner_nil;
                b = v->children[lo];
                v = &version_at(b, snapshot);
                lo = 0;
                hi = v->keys.size();
                if (hi == 0) return v->empty_label;
                continue;
            }
            size_t mid = (lo + hi - 1) / 2;
            owner_nil = v->keys[mid].nil_freshness;
            if (left_side)
                lo = mid + 1;  // rightmost descent within the left subtree
            else
                hi = mid;  // leftmost descent within the right subtree
        }
    }

    void descend_adjacent(TreeProof& p, std::uint64_t snapshot,
                          const rbb_detail::BlockVersion& v0,
                          const std::vector<Digest>& labels0, size_t lo0, size_t mid0, size_t hi0,
                          bool left_side) const {
        const rbb_detail::BlockVersion* v = &v0;
        std::vector<Digest> labels = labels0;
        // step through the target itself
        {
            const auto& kn = v0.keys[mid0];
            TreeStep st;
            st.key = kn.key;
            st.value_digest = hash_bytes(cfg_, kn.value);
            st.down_left = left_side;
            st.sibling = left_side ? label_range(v0, labels0, mid0 + 1, hi0, kn.nil_freshness)
                                   : label_range(v0, labels0, lo0, mid0, kn.nil_freshness);
            p.steps.push_back(std::move(st));
        }
        size_t lo = left_side ? lo0 : mid0 + 1;
        size_t hi = left_side ? mid0 : hi0;
        Digest owner_nil = v0.keys[mid0].nil_freshness;
        while (true) {
            if (lo >= hi) {
                if (v->leaf()) {
                    p.final_label = owner_nil;
                    return;
                }
                std::uint64_t b = v->children[lo];
                v = &version_at(b, snapshot);
                labels = child_labels_of(*v, snapshot);
                lo = 0;
                hi = v->keys.size();
                if (hi == 0) {
                    p.final_label = v->empty_label;
                    return;
                }
                continue;
            }
            size_t mid = (lo + hi - 1) / 2;
            const auto& kn = v->keys[mid];
            owner_nil = kn.nil_freshness;
            TreeStep st;
            st.key = kn.key;
            st.value_digest = hash_bytes(cfg_, kn.value);
            st.down_left = !left_side;  // left_side continuation keeps going right
            st.sibling = left_side ? label_range(*v, labels, lo, mid, kn.nil_freshness)
                                   : label_range(*v, labels, mid + 1, hi, kn.nil_freshness);
            p.steps.push_back(std::move(st));
            if (left_side)
                lo = mid + 1;
            else
                hi = mid;
        }
    }

    std::uint64_t depth_rec(std::uint64_t block, std::uint64_t snapshot) const {
        const auto& v = version_at(block, snapshot);
        size_t m = v.keys.size();
        std::uint64_t in_block = 0;
        for (size_t n = m; n > 0; n /= 2) ++in_block;
        if (v.leaf()) return in_block;
        std::uint64_t deepest = 0;
        for (auto c : v.children) deepest = std::max(deepest, depth_rec(c, snapshot));
        return in_block + deepest;
    }

    void check_shape(std::uint64_t block, std::uint64_t snapshot, bool is_root, std::uint64_t d,
                     std::optional<std::uint64_t>& leaf_depth) const {
        const auto& v = version_at(block, snapshot);
        if (!is_root && v.keys.size() < min_keys()) throw CodecError("block underfull");
        if (v.leaf()) {
            if (leaf_depth && *leaf_depth != d) throw CodecError("unequal leaf depth");
            leaf_depth = d;
            return;
        }
        for (auto c : v.children) check_shape(c, snapshot, false, d + 1, leaf_depth);
    }

    RbbTree() = default;

    SkipListStore& roots() { return *roots_impl_; }
    const SkipListStore& roots() const { return *roots_impl_; }

    std::filesystem::path dir_;
    HashConfig cfg_;
    Digest genesis_;
    RbbOptions opts_;
    rbb_detail::BlockFile blocks_;
    std::optional<SkipListStore> roots_impl_;
    FdFile snapdir_;
    std::vector<RbbSnapshot> snapshots_;
    std::uint64_t root_block_ = 0;
    Digest freshness_;
    mutable std::map<std::uint64_t, CurBlock> cur_;
    std::set<std::uint64_t> touched_;
    std::set<std::uint64_t> content_dirty_;
    std::set<std::uint64_t> dropped_;
};

}  // namespace timeweave
