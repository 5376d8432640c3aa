// Copyright (c) the timeweave authors. All rights reserved.
// Licensed under the Apache 2.0 License.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <random>

#include "timeweave/rbbtree.hpp"
#include "support/temp_dir.hpp"

using namespace timeweave;
using tw_test::TempDir;

namespace {

const HashConfig kCfg = HashConfig::sha256_default();
const Digest kGenesis = Digest::zero(32);

Bytes key_of(std::uint64_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "key-%08llu", static_cast<unsigned long long>(i));
    return to_bytes(buf);
}
Bytes val_of(std::uint64_t i) { return to_bytes("val-" + std::to_string(i)); }

// Naive versioned-map oracle: a full copy of the dictionary per snapshot.
struct VersionedMapOracle {
    std::map<Bytes, Bytes> open;
    std::vector<std::map<Bytes, Bytes>> snapshots;

    void insert(const Bytes& k, const Bytes& v) { open[k] = v; }
    void remove(const Bytes& k) { open.erase(k); }
    void close() { snapshots.push_back(open); }
};

RbbOptions small_opts(std::uint32_t order = 4) {
    RbbOptions o;
    o.order = order;
    o.block_size = 1024;
    return o;
}

}  // namespace

TEST_CASE("insert then lookup in open and committed snapshots") {
    TempDir dir;
    RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, small_opts());
    t.insert(key_of(1), val_of(1));
    CHECK(t.lookup(RbbTree::kOpenSnapshot, key_of(1)) == val_of(1));
    CHECK_FALSE(t.lookup(RbbTree::kOpenSnapshot, key_of(2)).has_value());
    RbbSnapshot s = t.close_snapshot();
    CHECK(s.id == 1);
    CHECK(t.lookup(1, key_of(1)) == val_of(1));
    CHECK_FALSE(t.lookup(1, key_of(2)).has_value());
    CHECK_THROWS_AS(t.lookup(2, key_of(1)), CodecError);
}

TEST_CASE("first close of an empty tree yields the genesis freshness label") {
    TempDir dir;
    RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, small_opts());
    RbbSnapshot s = t.close_snapshot();
    CHECK(s.root_label == kGenesis);
    CHECK(s.id == 1);
    RbbSnapshot s2 = t.close_snapshot();
    CHECK(s2.id == 2);  // ids strictly increment even for empty deltas
    CHECK(s2.root_label == kGenesis);
}

TEST_CASE("identical deltas from the same base give identical root labels") {
    TempDir dir;
    auto build = [&](const std::string& name) {
        RbbTree t = RbbTree::create(dir / name, kCfg, kGenesis, small_opts());
        for (int i = 0; i < 50; ++i) t.insert(key_of(i), val_of(i));
        t.close_snapshot();
        for (int i = 50; i < 80; ++i) t.insert(key_of(i), val_of(i * 7));
        t.remove(key_of(3));
        return t.close_snapshot();
    };
    RbbSnapshot a = build("a");
    RbbSnapshot b = build("b");
    CHECK(a.root_label == b.root_label);
}

TEST_CASE("duplicate insert overwrites; absent remove is a no-op") {
    TempDir dir;
    RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, small_opts());
    t.insert(key_of(1), val_of(1));
    t.insert(key_of(1), val_of(2));
    CHECK(t.lookup(RbbTree::kOpenSnapshot, key_of(1)) == val_of(2));
    RbbSnapshot s1 = t.close_snapshot();
    t.remove(key_of(99));
    RbbSnapshot s2 = t.close_snapshot();
    CHECK(s1.root_label == s2.root_label);  // no structural change
}

TEST_CASE("randomized history equals the versioned-map oracle") {
    TempDir dir;
    RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, small_opts(5));
    VersionedMapOracle oracle;
    std::mt19937_64 rng(2024);
    const int kOps = 4000, kSnapshotEvery = 100;
    for (int op = 1; op <= kOps; ++op) {
        std::uint64_t k = rng() % 500;
        if (rng() % 4 == 0) {
            t.remove(key_of(k));
            oracle.remove(key_of(k));
        } else {
            Bytes v = val_of(rng() % 1000);
            t.insert(key_of(k), v);
            oracle.insert(key_of(k), v);
        }
        if (op % kSnapshotEvery == 0) {
            t.close_snapshot();
            oracle.close();
        }
    }
    REQUIRE(t.snapshot_count() == oracle.snapshots.size());
    // historical lookups across every snapshot at sampled keys
    for (std::uint64_t s = 1; s <= t.snapshot_count(); ++s) {
        const auto& om = oracle.snapshots[s - 1];
        for (std::uint64_t k = 0; k < 500; k += 7) {
            auto got = t.lookup(s, key_of(k));
            auto it = om.find(key_of(k));
            if (it == om.end()) {
                CHECK_FALSE(got.has_value());
            } else {
                CHECK(got == it->second);
            }
        }
    }
    t.check_block_invariants();
}

TEST_CASE("proofs verify against their snapshot root and nowhere else") {
    TempDir dir;
    RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, small_opts());
    std::vector<RbbSnapshot> snaps;
    for (int s = 0; s < 4; ++s) {
        for (int i = 0; i < 30; ++i) t.insert(key_of(s * 100 + i), val_of(s * 100 + i));
        if (s == 2) t.remove(key_of(5));
        snaps.push_back(t.close_snapshot());
    }
    for (const auto& sn : snaps) {
        // present key
        TreeProof p = t.prove(sn.id, key_of(3));
        auto r = verify_tree_proof(kCfg, p, sn.root_label, key_of(3));
        REQUIRE(r.ok);
        CHECK(r.present);
        CHECK(r.value_digest == hash_bytes(kCfg, val_of(3)));
        // absent key
        TreeProof q = t.prove(sn.id, key_of(9999));
        auto ra = verify_tree_proof(kCfg, q, sn.root_label, key_of(9999));
        REQUIRE(ra.ok);
        CHECK_FALSE(ra.present);
        // cross-snapshot verification fails
        for (const auto& other : snaps) {
            if (other.id == sn.id) continue;
            if (other.root_label == sn.root_label) continue;
            CHECK_FALSE(verify_tree_proof(kCfg, p, other.root_label, key_of(3)).ok);
        }
    }
    // key 5 removed in snapshot 3: present before, absent after
    CHECK(verify_tree_proof(kCfg, t.prove(2, key_of(5)), snaps[1].root_label, key_of(5)).present);
    auto r5 = verify_tree_proof(kCfg, t.prove(3, key_of(5)), snaps[2].root_label, key_of(5));
    REQUIRE(r5.ok);
    CHECK_FALSE(r5.present);
}

TEST_CASE("single-bit tampering anywhere in a proof flips the verdict") {
    TempDir dir;
    RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, small_opts());
    for (int i = 0; i < 40; ++i) t.insert(key_of(i), val_of(i));
    RbbSnapshot sn = t.close_snapshot();
    TreeProof p = t.prove(1, key_of(17));
    REQUIRE(verify_tree_proof(kCfg, p, sn.root_label, key_of(17)).ok);
    for (size_t s = 0; s < p.steps.size(); ++s) {
        for (size_t bit = 0; bit < 8u * kCfg.width; ++bit) {
            TreeProof q = p;
            q.steps[s].sibling.data[bit / 8] ^= 1u << (bit % 8);
            CHECK_FALSE(verify_tree_proof(kCfg, q, sn.root_label, key_of(17)).ok);
            TreeProof q2 = p;
            q2.steps[s].value_digest.data[bit / 8] ^= 1u << (bit % 8);
            CHECK_FALSE(verify_tree_proof(kCfg, q2, sn.root_label, key_of(17)).ok);
        }
        TreeProof qk = p;
        qk.steps[s].key.push_back('x');
        CHECK_FALSE(verify_tree_proof(kCfg, qk, sn.root_label, key_of(17)).ok);
    }
    for (size_t bit = 0; bit < 8u * kCfg.width; ++bit) {
        TreeProof q = p;
        q.final_label.data[bit / 8] ^= 1u << (bit % 8);
        CHECK_FALSE(verify_tree_proof(kCfg, q, sn.root_label, key_of(17)).ok);
    }
}

TEST_CASE("persistence: old snapshots reprove after arbitrary later mutation") {
    TempDir dir;
    RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, small_opts());
    for (int i = 0; i < 25; ++i) t.insert(key_of(i), val_of(i));
    RbbSnapshot s1 = t.close_snapshot();
    TreeProof before = t.prove(1, key_of(7));

    std::mt19937_64 rng(5);
    for (int round = 0; round < 20; ++round) {
        for (int i = 0; i < 30; ++i) {
            std::uint64_t k = rng() % 200;
            if (rng() % 3 == 0)
                t.remove(key_of(k));
            else
                t.insert(key_of(k), val_of(rng() % 100));
        }
        t.close_snapshot();
    }
    TreeProof after = t.prove(1, key_of(7));
    CHECK(verify_tree_proof(kCfg, after, s1.root_label, key_of(7)).ok);
    CHECK(before.encode() == after.encode());
    CHECK(t.snapshot_info(1).root_label == s1.root_label);
}

TEST_CASE("reopening a store preserves snapshots and continues the history") {
    TempDir dir;
    Digest head1, root1;
    {
        RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, small_opts());
        for (int i = 0; i < 60; ++i) t.insert(key_of(i), val_of(i));
        root1 = t.close_snapshot().root_label;
        t.insert(key_of(100), val_of(100));  // open delta, discarded on reopen
        head1 = t.digest();
    }
    RbbTree r = RbbTree::open(dir / "rbb");
    CHECK(r.snapshot_count() == 1);
    CHECK(r.digest() == head1);
    CHECK(r.snapshot_info(1).root_label == root1);
    CHECK_FALSE(r.lookup(RbbTree::kOpenSnapshot, key_of(100)).has_value());
    CHECK(r.lookup(1, key_of(30)) == val_of(30));
    // continues consistently
    r.insert(key_of(100), val_of(100));
    RbbSnapshot s2 = r.close_snapshot();
    CHECK(verify_tree_proof(kCfg, r.prove(2, key_of(100)), s2.root_label, key_of(100)).present);
    CHECK(verify_tree_proof(kCfg, r.prove(1, key_of(30)), root1, key_of(30)).present);
}

TEST_CASE("freshness: proofs of newly inserted keys expose the set label") {
    TempDir dir;
    RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, small_opts());
    for (int i = 0; i < 30; i += 2) t.insert(key_of(i), val_of(i));
    t.close_snapshot();

    Digest mark = hash_bytes(kCfg, to_bytes("timeline-authenticator-j-1"));
    t.set_freshness(mark);
    // inserts landing between existing keys, at the edges, and past the end
    std::vector<std::uint64_t> fresh = {1, 3, 7, 29, 31, 99};
    for (auto k : fresh) t.insert(key_of(k), val_of(k));
    RbbSnapshot sn = t.close_snapshot();
    CHECK(sn.freshness == mark);

    for (auto k : fresh) {
        TreeProof p = t.prove_fresh(sn.id, key_of(k));
        auto r = verify_tree_proof(kCfg, p, sn.root_label, key_of(k));
        REQUIRE(r.ok);
        REQUIRE(r.present);
        INFO("key " << k);
        CHECK(r.final_label == mark);
    }
}

TEST_CASE("freshness: untouched subtrees retain their old authenticators") {
    TempDir dir;
    // order 4 so the key range spans several blocks
    RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, small_opts(4));
    for (int i = 0; i < 200; ++i) t.insert(key_of(1000 + i), val_of(i));
    RbbSnapshot s1 = t.close_snapshot();
    Digest f1 = s1.freshness;  // genesis for the first snapshot

    Digest mark = hash_bytes(kCfg, to_bytes("fresh-2"));
    t.set_freshness(mark);
    t.insert(key_of(5000), val_of(1));  // far from the low key range
    RbbSnapshot s2 = t.close_snapshot();

    // a key in an untouched region still shows the original freshness label
    TreeProof p = t.prove_fresh(s2.id, key_of(1020));
    auto r = verify_tree_proof(kCfg, p, s2.root_label, key_of(1020));
    REQUIRE(r.ok);
    CHECK(r.final_label == f1);
    // while the new key shows the new one
    auto rf = verify_tree_proof(kCfg, t.prove_fresh(s2.id, key_of(5000)), s2.root_label,
                                key_of(5000));
    REQUIRE(rf.ok);
    CHECK(rf.final_label == mark);
}

TEST_CASE("freshness survives bulk inserts that split blocks") {
    TempDir dir;
    RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, small_opts(4));
    for (int i = 0; i < 50; ++i) t.insert(key_of(2 * i), val_of(i));
    t.close_snapshot();
    Digest mark = hash_bytes(kCfg, to_bytes("bulk-mark"));
    t.set_freshness(mark);
    std::vector<std::uint64_t> fresh;
    for (int i = 0; i < 60; ++i) fresh.push_back(2 * i + 1);  // interleave everywhere
    for (int i = 200; i < 230; ++i) fresh.push_back(i);       // and a dense run
    for (auto k : fresh) t.insert(key_of(k), val_of(k));
    RbbSnapshot sn = t.close_snapshot();
    for (auto k : fresh) {
        TreeProof p = t.prove_fresh(sn.id, key_of(k));
        auto r = verify_tree_proof(kCfg, p, sn.root_label, key_of(k));
        REQUIRE(r.ok);
        INFO("key " << k);
        CHECK(r.final_label == mark);
    }
    t.check_block_invariants();
}

TEST_CASE("virtual tree depth and proof sizes stay within the block-height bound") {
    TempDir dir;
    std::uint32_t order = 8;
    RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, small_opts(order));
    std::mt19937_64 rng(77);
    std::uint64_t n = 3000;
    for (std::uint64_t i = 0; i < n; ++i) t.insert(key_of(rng() % 100000), val_of(i));
    RbbSnapshot sn = t.close_snapshot();

    auto ceil_log2 = [](std::uint64_t x) {
        std::uint64_t r = 0;
        while ((1ull << r) < x) ++r;
        return r;
    };
    std::uint64_t logr = 1;
    while (std::pow(static_cast<double>(order), static_cast<double>(logr)) <
           static_cast<double>(n))
        ++logr;
    std::uint64_t bound_depth = logr * 2 * ceil_log2(2 * order - 1);
    CHECK(t.max_virtual_depth(sn.id) <= bound_depth);

    for (int i = 0; i < 300; ++i) {
        Bytes k = key_of(rng() % 100000);
        TreeProof p = t.prove(sn.id, k);
        REQUIRE(verify_tree_proof(kCfg, p, sn.root_label, k).ok);
        CHECK(p.digest_count() <= bound_depth * 2);
    }
}

TEST_CASE("version slots are bounded and exhausted blocks are re-allocated") {
    TempDir dir;
    RbbOptions opts = small_opts(4);
    opts.version_slots = 3;
    RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, opts);
    // ten snapshots touching the same small tree forces slot exhaustion
    for (int s = 0; s < 10; ++s) {
        t.insert(key_of(s), val_of(s));
        t.close_snapshot();
    }
    t.check_block_invariants();  // includes the per-block <= V check
    // every old snapshot still answers
    for (std::uint64_t s = 1; s <= 10; ++s) {
        CHECK(t.lookup(s, key_of(0)) == val_of(0));
        CHECK(t.lookup(s, key_of(s - 1)) == val_of(s - 1));
        TreeProof p = t.prove(s, key_of(0));
        CHECK(verify_tree_proof(kCfg, p, t.snapshot_info(s).root_label, key_of(0)).present);
    }
}

TEST_CASE("digest changes on every close and differs across histories") {
    TempDir dir;
    RbbTree a = RbbTree::create(dir / "a", kCfg, kGenesis, small_opts());
    Digest d0 = a.digest();
    a.insert(key_of(1), val_of(1));
    a.close_snapshot();
    Digest d1 = a.digest();
    a.close_snapshot();
    Digest d2 = a.digest();
    CHECK(d0 != d1);
    CHECK(d1 != d2);

    // a history differing in one insert diverges
    RbbTree b = RbbTree::create(dir / "b", kCfg, kGenesis, small_opts());
    b.insert(key_of(1), val_of(2));
    b.close_snapshot();
    CHECK(b.digest() != d1);
}

TEST_CASE("tree proofs survive an encode/decode round trip") {
    TempDir dir;
    RbbTree t = RbbTree::create(dir / "rbb", kCfg, kGenesis, small_opts());
    for (int i = 0; i < 40; ++i) t.insert(key_of(i), val_of(i));
    RbbSnapshot sn = t.close_snapshot();
    for (Bytes k : {key_of(13), key_of(999)}) {
        TreeProof p = t.prove(1, k);
        Bytes wire = p.encode();
        Decoder d(wire);
        TreeProof q = TreeProof::decode(d, kCfg);
        CHECK(q.encode() == wire);
        CHECK(verify_tree_proof(kCfg, q, sn.root_label, k).ok ==
              verify_tree_proof(kCfg, p, sn.root_label, k).ok);
    }
}
