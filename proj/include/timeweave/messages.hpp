// Copyright (c) the timeweave authors. All rights reserved.
// Licensed under the Apache 2.0 License.

#pragma once

#include <map>
#include <optional>
#include <vector>

#include "timeweave/crypto.hpp"
#include "timeweave/rbbtree.hpp"
#include "timeweave/skiplist.hpp"
#include "timeweave/timeline.hpp"

namespace timeweave {

// Wire formats of the entanglement protocol. Every message is prefixed
// with a type tag and protocol version; the canonical encoding below is
// the bit-exact transport and archive format.

constexpr std::uint64_t kProtocolVersion = 1;

enum class MsgType : std::uint64_t {
    thread = 1,
    receipt = 2,
    bundle = 3,
};

inline Bytes envelope(MsgType t, Bytes body) {
    Encoder e;
    e.u64(static_cast<std::uint64_t>(t)).u64(kProtocolVersion).seq(body);
    return e.take();
}

struct Envelope {
    MsgType type;
    Bytes body;
};

inline Envelope open_envelope(ByteView wire) {
    Decoder d(wire);
    Envelope env;
    env.type = static_cast<MsgType>(d.u64());
    std::uint64_t ver = d.u64();
    if (ver != kProtocolVersion) throw CodecError("unsupported protocol version");
    Decoder body = d.seq();
    if (!d.done()) throw CodecError("trailing bytes after message");
    env.body = body.rest();
    return env;
}

// Archive keys: (peer service id, logical time of the thread operation,
// direction). Direction keeps incoming threads and outgoing emission
// records from colliding when both refer to the same step number.
enum class ThreadDir : std::uint64_t { in = 0, out = 1 };

inline Bytes archive_key(ByteView peer, std::uint64_t step, ThreadDir dir) {
    Encoder e;
    e.bytes(peer).u64(step).u64(static_cast<std::uint64_t>(dir));
    return e.take();
}

// ---------------------------------------------------------------------------
// Timeline thread

struct TimelineThread {
    SignedTimeMark mark;  // sender, step i, T_i, signature
    SkipListProof proof;  // from the receiver's last-known sender step to i

    Bytes encode_body(const HashConfig&) const {
        Encoder e;
        e.seq(mark.encode()).seq(proof.encode());
        return e.take();
    }
    Bytes encode_wire(const HashConfig& cfg) const {
        return envelope(MsgType::thread, encode_body(cfg));
    }
    static TimelineThread decode_body(Decoder& d, const HashConfig& cfg) {
        TimelineThread t;
        Decoder dm = d.seq();
        t.mark = SignedTimeMark::decode(dm, cfg);
        Decoder dp = d.seq();
        t.proof = SkipListProof::decode(dp, cfg);
        return t;
    }
};

// ---------------------------------------------------------------------------
// Commit attestation
//
// The reusable "this datum is committed under my timeline step j" proof:
//   datum -> snapshot root R        (authenticated search tree descent)
//   R -> g                          (snapshot root list element s)
//   d_j = H(f || g)                 (system digest; `other_digest` is the
//                                    other half of the concatenation)
//   d_j, T_{j-1} -> T_j             (timeline element j links)
//   T_j signed                      (the mark)
// Receipts embed one for the thread archive; event commitment proofs use
// one for the application state, with f and g switching roles.

struct CommitAttestation {
    Bytes key;             // tree key whose inclusion is attested
    TreeProof tree_proof;  // existence proof for `key`, freshness-extended
    std::uint64_t snapshot = 0;      // index s in the snapshot root list
    Digest prev_list_auth;           // list authenticator at s-1
    std::vector<Digest> list_links;  // links of list element s, levels 1..
    bool tree_is_app = false;        // true: tree digest is f; false: it is g
    Digest other_digest;             // the other half of H(f || g)
    Digest prev_timeline_auth;       // T_{j-1} claimed by the prover
    std::vector<Digest> elem_links;  // links of timeline element j, levels 1..
    SignedTimeMark mark;             // (owner, j, T_j)

    Bytes encode() const {
        Encoder e;
        e.bytes(key).seq(tree_proof.encode()).u64(snapshot);
        e << prev_list_auth;
        e.u64(list_links.size());
        for (const auto& l : list_links) e << l;
        e.u64(tree_is_app ? 1 : 0);
        e << other_digest << prev_timeline_auth;
        e.u64(elem_links.size());
        for (const auto& l : elem_links) e << l;
        e.seq(mark.encode());
        return e.take();
    }
    static CommitAttestation decode(Decoder& d, const HashConfig& cfg) {
        CommitAttestation a;
        a.key = d.bytes();
        Decoder dt = d.seq();
        a.tree_proof = TreeProof::decode(dt, cfg);
        a.snapshot = d.u64();
        a.prev_list_auth = read_digest(d, cfg);
        std::uint64_t n = d.u64();
        if (n > 64) throw CodecError("attestation: too many list links");
        for (std::uint64_t i = 0; i < n; ++i) a.list_links.push_back(read_digest(d, cfg));
        a.tree_is_app = d.u64() == 1;
        a.other_digest = read_digest(d, cfg);
        a.prev_timeline_auth = read_digest(d, cfg);
        n = d.u64();
        if (n > 64) throw CodecError("attestation: too many element links");
        for (std::uint64_t i = 0; i < n; ++i) a.elem_links.push_back(read_digest(d, cfg));
        Decoder dm = d.seq();
        a.mark = SignedTimeMark::decode(dm, cfg);
        return a;
    }
};

struct AttestationResult {
    bool ok = false;
    Digest tree_root;        // replayed snapshot root label
    Digest tree_digest;      // derived snapshot-list authenticator (f or g)
    Digest step_value;       // derived system digest d_j
    Digest nil_label;        // bottom label exposed by the tree proof
    Bytes target_value;      // raw bytes proven present under `key`
    std::uint64_t step = 0;  // j
};

/// Replays a tree proof without comparing against a known root; returns the
/// computed root alongside the structural verdict.
inline TreeProofResult replay_tree_proof(const HashConfig& cfg, const TreeProof& p, ByteView key,
                                         Digest& root_out) {
    Digest acc = p.final_label;
    for (auto it = p.steps.rbegin(); it != p.steps.rend(); ++it) {
        Digest kd = hash_bytes(cfg, it->key);
        acc = it->down_left ? key_node_label(cfg, acc, kd, it->value_digest, it->sibling)
                            : key_node_label(cfg, it->sibling, kd, it->value_digest, acc);
    }
    root_out = acc;
    return verify_tree_proof(cfg, p, acc, key);
}

/// Verifies the one-way derivation chain of an attestation against the
/// expected signer. The caller decides what to compare `prev_timeline_auth`
/// and `nil_label` with; both come back in the result via the attestation.
inline AttestationResult verify_attestation(const HashConfig& cfg, const CommitAttestation& a,
                                            const ServiceId& signer) {
    AttestationResult r;
    if (!a.tree_proof.existence) return r;
    TreeProofResult tp = replay_tree_proof(cfg, a.tree_proof, a.key, r.tree_root);
    if (!tp.ok || !tp.present) return r;
    r.nil_label = tp.final_label;
    r.target_value = a.tree_proof.target_value;

    // snapshot root list element s: recompute the level-0 link from the
    // tree root, splice in the carried higher links
    if (a.snapshot == 0) return r;
    int top = skiplist_level(a.snapshot);
    if (a.list_links.size() != static_cast<size_t>(top)) return r;
    Digest l0 = skiplist_link_hash(cfg, a.snapshot, 0, r.tree_root, a.prev_list_auth);
    std::vector<Digest> links{l0};
    links.insert(links.end(), a.list_links.begin(), a.list_links.end());
    r.tree_digest = skiplist_auth_from_links(cfg, a.snapshot, links);

    // system digest d_j = H(f || g)
    Encoder e;
    if (a.tree_is_app)
        e << r.tree_digest << a.other_digest;
    else
        e << a.other_digest << r.tree_digest;
    r.step_value = hash_bytes(cfg, e.view());

    // timeline element j
    std::uint64_t j = a.mark.step;
    if (j == 0) return r;
    int jtop = skiplist_level(j);
    if (a.elem_links.size() != static_cast<size_t>(jtop)) return r;
    Digest el0 = skiplist_link_hash(cfg, j, 0, r.step_value, a.prev_timeline_auth);
    std::vector<Digest> elinks{el0};
    elinks.insert(elinks.end(), a.elem_links.begin(), a.elem_links.end());
    Digest tj = skiplist_auth_from_links(cfg, j, elinks);
    if (tj != a.mark.authenticator) return r;
    if (!a.mark.verify(signer)) return r;
    r.step = j;
    r.ok = true;
    return r;
}

// ---------------------------------------------------------------------------
// Entanglement receipt

struct EntanglementReceipt {
    Bytes issuer;          // B
    Bytes subject_sender;  // A: whose thread is being receipted
    std::uint64_t subject_step = 0;  // i
    SkipListProof prior;             // component 1: B's timeline, k -> j-1
    CommitAttestation att;           // components 2 and 3 (mark = (B, j, T_j))

    Bytes encode_body() const {
        Encoder e;
        e.bytes(issuer).bytes(subject_sender).u64(subject_step);
        e.seq(prior.encode()).seq(att.encode());
        return e.take();
    }
    Bytes encode_wire() const { return envelope(MsgType::receipt, encode_body()); }
    static EntanglementReceipt decode_body(Decoder& d, const HashConfig& cfg) {
        EntanglementReceipt r;
        r.issuer = d.bytes();
        r.subject_sender = d.bytes();
        r.subject_step = d.u64();
        Decoder dp = d.seq();
        r.prior = SkipListProof::decode(dp, cfg);
        Decoder da = d.seq();
        r.att = CommitAttestation::decode(da, cfg);
        return r;
    }
};

// ---------------------------------------------------------------------------
// Verified one-way chain legs
//
// Everything a node learns about a peer's timeline arrives as verified
// segments: a thread contributes a precedence proof [anchor -> i]; a receipt
// contributes [anchor -> j-1] plus the derivation of step j. Mappings stitch
// stored legs back together, so the leg is also a wire format (it appears in
// evidence bundles as the connecting proof).

struct ChainLeg {
    SkipListProof proof;                     // from -> x (may be empty when from == x)
    std::optional<CommitAttestation> bridge;  // optional derivation x -> x+1

    std::uint64_t from() const { return proof.start; }
    std::uint64_t to() const { return bridge ? bridge->mark.step : proof.end; }

    Bytes encode() const {
        Encoder e;
        e.seq(proof.encode());
        e.u64(bridge ? 1 : 0);
        if (bridge) e.seq(bridge->encode());
        return e.take();
    }
    static ChainLeg decode(Decoder& d, const HashConfig& cfg) {
        ChainLeg l;
        Decoder dp = d.seq();
        l.proof = SkipListProof::decode(dp, cfg);
        if (d.u64() == 1) {
            Decoder da = d.seq();
            l.bridge = CommitAttestation::decode(da, cfg);
        }
        return l;
    }
};

struct ChainReplay {
    bool ok = false;
    std::uint64_t from = 0, to = 0;
    Digest end_auth;
    std::map<std::uint64_t, Digest> step_values;  // index -> d value exposed en route
};

/// Replays consecutive legs from a trusted (step, authenticator) anchor.
/// Collects every system digest the chain exposes: hop values from skip
/// list proofs and derived step values from bridges.
inline ChainReplay replay_chain(const HashConfig& cfg, const std::vector<ChainLeg>& legs,
                                std::uint64_t start_step, const Digest& start_auth,
                                const ServiceId& signer) {
    ChainReplay r;
    r.from = start_step;
    std::uint64_t at = start_step;
    Digest auth = start_auth;
    for (const auto& leg : legs) {
        if (leg.proof.start != at) return r;
        auto t = skiplist_replay(cfg, leg.proof, auth);
        if (!t) return r;
        for (const auto& hop : leg.proof.hops) r.step_values[hop.index] = hop.value;
        at = leg.proof.end;
        auth = *t;
        if (leg.bridge) {
            const CommitAttestation& b = *leg.bridge;
            if (b.mark.step != at + 1) return r;
            AttestationResult ar = verify_attestation(cfg, b, signer);
            if (!ar.ok) return r;
            if (b.prev_timeline_auth != auth) return r;
            r.step_values[b.mark.step] = ar.step_value;
            at = b.mark.step;
            auth = b.mark.authenticator;
        }
    }
    r.ok = true;
    r.to = at;
    r.end_auth = auth;
    return r;
}

// ---------------------------------------------------------------------------
// Temporal mapping and its portable evidence bundle

enum class MapStatus {
    ok = 0,
    no_lower_bound,
    no_upper_bound,
    detailed_proof_needed,
    unknown_peer,
    event_not_on_known_timeline,
};

inline const char* to_string(MapStatus s) {
    switch (s) {
        case MapStatus::ok: return "ok";
        case MapStatus::no_lower_bound: return "no-lower-bound";
        case MapStatus::no_upper_bound: return "no-upper-bound";
        case MapStatus::detailed_proof_needed: return "detailed-proof-needed";
        case MapStatus::unknown_peer: return "unknown-peer";
        case MapStatus::event_not_on_known_timeline: return "event-not-on-known-timeline";
    }
    return "?";
}

/// A remote time step mapped to a closed local interval, with the three
/// evidence pieces: the receipt bounding it from below, the archived thread
/// bounding it from above, and the connecting chain over the remote
/// timeline passing through the mapped step.
struct TemporalMapping {
    Bytes remote_id;
    std::uint64_t remote_step = 0;
    Bytes local_id;
    std::uint64_t lower_step = 0;  // local step of the receipt's eliciting thread
    std::uint64_t upper_step = 0;  // local step that committed the thread's archival

    Bytes lower_thread_wire;           // exact bytes of the eliciting thread
    EntanglementReceipt lower_receipt;
    std::vector<ChainLeg> chain;       // remote timeline, m -> p, visiting remote_step
    Bytes upper_thread_wire;           // exact bytes of the bounding thread
};

struct EvidenceBundle {
    TemporalMapping mapping;
    CommitAttestation upper_att;  // local archival of the upper thread at upper_step
    // optional event commitment: ties an event digest to the mapped step
    bool has_event = false;
    Bytes event_digest;
    CommitAttestation event_att;

    Bytes encode_body() const {
        Encoder e;
        e.bytes(mapping.remote_id).u64(mapping.remote_step);
        e.bytes(mapping.local_id).u64(mapping.lower_step).u64(mapping.upper_step);
        e.bytes(mapping.lower_thread_wire);
        e.seq(mapping.lower_receipt.encode_body());
        e.u64(mapping.chain.size());
        for (const auto& leg : mapping.chain) e.seq(leg.encode());
        e.bytes(mapping.upper_thread_wire);
        e.seq(upper_att.encode());
        e.u64(has_event ? 1 : 0);
        if (has_event) {
            e.bytes(event_digest);
            e.seq(event_att.encode());
        }
        return e.take();
    }
    Bytes encode_wire() const { return envelope(MsgType::bundle, encode_body()); }
    static EvidenceBundle decode_body(Decoder& d, const HashConfig& cfg) {
        EvidenceBundle b;
        b.mapping.remote_id = d.bytes();
        b.mapping.remote_step = d.u64();
        b.mapping.local_id = d.bytes();
        b.mapping.lower_step = d.u64();
        b.mapping.upper_step = d.u64();
        b.mapping.lower_thread_wire = d.bytes();
        Decoder dr = d.seq();
        b.mapping.lower_receipt = EntanglementReceipt::decode_body(dr, cfg);
        std::uint64_t n = d.u64();
        if (n > 1u << 16) throw CodecError("bundle: absurd chain length");
        for (std::uint64_t i = 0; i < n; ++i) {
            Decoder dl = d.seq();
            b.mapping.chain.push_back(ChainLeg::decode(dl, cfg));
        }
        b.mapping.upper_thread_wire = d.bytes();
        Decoder da = d.seq();
        b.upper_att = CommitAttestation::decode(da, cfg);
        b.has_event = d.u64() == 1;
        if (b.has_event) {
            b.event_digest = d.bytes();
            Decoder de = d.seq();
            b.event_att = CommitAttestation::decode(de, cfg);
        }
        return b;
    }
};

/// Membership directory: service id bytes -> ServiceId (with keys).
using Membership = std::map<Bytes, ServiceId>;

struct BundleVerdict {
    bool ok = false;
    std::string reason;
    // the proven claim: local lower_step precedes remote_step precedes
    // local upper_step
    Bytes local_id, remote_id;
    std::uint64_t lower_step = 0, remote_step = 0, upper_step = 0;
};

/// Verifies an evidence bundle from bytes alone: no store access, only the
/// membership directory for signature keys.
inline BundleVerdict verify_bundle(const HashConfig& cfg, ByteView wire,
                                   const Membership& members) {
    BundleVerdict v;
    auto fail = [&](const char* why) {
        v.ok = false;
        v.reason = why;
        return v;
    };
    try {
        Decoder d(wire);
        if (static_cast<MsgType>(d.u64()) != MsgType::bundle) return fail("not a bundle");
        if (d.u64() != kProtocolVersion) return fail("bad version");
        Decoder body = d.seq();
        if (!d.done()) return fail("trailing bytes");
        EvidenceBundle b = EvidenceBundle::decode_body(body, cfg);
        if (!body.done()) return fail("trailing bundle bytes");
        const TemporalMapping& m = b.mapping;

        auto local_it = members.find(m.local_id);
        auto remote_it = members.find(m.remote_id);
        if (local_it == members.end() || remote_it == members.end())
            return fail("unknown service");
        const ServiceId& local = local_it->second;
        const ServiceId& remote = remote_it->second;

        // Lower bound: the receipt's attestation proves the eliciting thread
        // bytes are committed under remote step m0, and those bytes carry the
        // local service's signed mark for lower_step.
        if (m.lower_receipt.issuer != m.remote_id) return fail("receipt issuer mismatch");
        AttestationResult lr = verify_attestation(cfg, m.lower_receipt.att, remote);
        if (!lr.ok) return fail("lower attestation invalid");
        if (lr.target_value != m.lower_thread_wire) return fail("lower thread bytes mismatch");
        Decoder lt(m.lower_thread_wire);
        if (static_cast<MsgType>(lt.u64()) != MsgType::thread) return fail("lower not a thread");
        if (lt.u64() != kProtocolVersion) return fail("lower thread version");
        Decoder ltb = lt.seq();
        TimelineThread lower = TimelineThread::decode_body(ltb, cfg);
        if (lower.mark.owner != m.local_id || lower.mark.step != m.lower_step)
            return fail("lower thread mark mismatch");
        if (!lower.mark.verify(local)) return fail("lower thread signature");
        std::uint64_t m0 = lr.step;
        if (m0 > m.remote_step) return fail("receipt later than mapped step");

        // Connecting chain m0 -> p over the remote timeline.
        ChainReplay cr = replay_chain(cfg, m.chain, m0, m.lower_receipt.att.mark.authenticator,
                                      remote);
        if (!cr.ok) return fail("connecting chain invalid");
        cr.step_values[m0] = lr.step_value;

        // Upper bound thread.
        Decoder ut(m.upper_thread_wire);
        if (static_cast<MsgType>(ut.u64()) != MsgType::thread) return fail("upper not a thread");
        if (ut.u64() != kProtocolVersion) return fail("upper thread version");
        Decoder utb = ut.seq();
        TimelineThread upper = TimelineThread::decode_body(utb, cfg);
        if (upper.mark.owner != m.remote_id) return fail("upper thread owner");
        if (!upper.mark.verify(remote)) return fail("upper thread signature");
        std::uint64_t p = upper.mark.step;
        if (p < m.remote_step) return fail("thread earlier than mapped step");
        if (cr.to != p || cr.end_auth != upper.mark.authenticator)
            return fail("chain does not reach the upper thread");

        // The mapped step must be witnessed on the chain.
        if (m.remote_step != m0 && m.remote_step != p &&
            !cr.step_values.count(m.remote_step))
            return fail("mapped step not on chain");

        // Local archival of the upper thread at upper_step.
        AttestationResult ua = verify_attestation(cfg, b.upper_att, local);
        if (!ua.ok) return fail("upper attestation invalid");
        if (ua.step != m.upper_step) return fail("upper attestation step");
        if (ua.target_value != m.upper_thread_wire) return fail("upper thread bytes mismatch");
        if (b.upper_att.key != archive_key(m.remote_id, p, ThreadDir::in))
            return fail("upper archive key");

        // Optional event commitment at the mapped step.
        if (b.has_event) {
            AttestationResult ea = verify_attestation(cfg, b.event_att, remote);
            if (!ea.ok) return fail("event attestation invalid");
            if (ea.step != m.remote_step) return fail("event step mismatch");
            if (b.event_att.key != b.event_digest) return fail("event key mismatch");
            auto it = cr.step_values.find(m.remote_step);
            if (it == cr.step_values.end()) return fail("event step value unavailable");
            if (ea.step_value != it->second) return fail("event not on the proven chain");
        }

        v.ok = true;
        v.local_id = m.local_id;
        v.remote_id = m.remote_id;
        v.lower_step = m.lower_step;
        v.remote_step = m.remote_step;
        v.upper_step = m.upper_step;
        return v;
    } catch (const CodecError& e) {
        return fail(e.what());
    }
}

}  // namespace timeweave
