// Copyright (c) the timeweave authors. All rights reserved.
// Licensed under the Apache 2.0 License.

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "timeweave/messages.hpp"
#include "timeweave/rbbtree.hpp"
#include "timeweave/timeline.hpp"

namespace timeweave {

// The entanglement protocol engine: a service's timeline, its thread
// archive (authenticated, feeds g(E) into the timeline recurrence), its
// receipt archive (plain storage), and the per-peer bookkeeping needed to
// emit and verify threads and receipts and to answer temporal mappings.
//
// Anchors move in lock step on both ends of a connection: whenever this
// node sends a thread or a receipt it assumes the peer verifies it, and
// whenever it accepts one it advances its own record of the peer. The
// protocol therefore presumes reliable in-order delivery, which the
// simulator provides; a lossy transport would need acknowledgements.

enum class ThreadVerdict {
    accept = 0,
    bad_signature,
    stale_step,
    broken_proof,
    unknown_peer,
};
inline const char* to_string(ThreadVerdict v) {
    switch (v) {
        case ThreadVerdict::accept: return "accept";
        case ThreadVerdict::bad_signature: return "bad-signature";
        case ThreadVerdict::stale_step: return "stale-step";
        case ThreadVerdict::broken_proof: return "broken-proof";
        case ThreadVerdict::unknown_peer: return "unknown-peer";
    }
    return "?";
}

enum class ReceiptVerdict {
    accept = 0,
    stale_anchor,
    archive_proof_invalid,
    not_fresh,
    derivation_mismatch,
    bad_signature,
};
inline const char* to_string(ReceiptVerdict v) {
    switch (v) {
        case ReceiptVerdict::accept: return "accept";
        case ReceiptVerdict::stale_anchor: return "stale-anchor";
        case ReceiptVerdict::archive_proof_invalid: return "archive-proof-invalid";
        case ReceiptVerdict::not_fresh: return "not-fresh";
        case ReceiptVerdict::derivation_mismatch: return "derivation-mismatch";
        case ReceiptVerdict::bad_signature: return "bad-signature";
    }
    return "?";
}

struct PeerState {
    // their timeline as this node verified it
    std::uint64_t known_step = 0;
    Digest known_auth;  // genesis until first contact
    // this node's own timeline as the peer last verified it
    std::uint64_t acked_step = 0;
    // replay guard for inbound threads
    std::uint64_t last_archived_in = 0;

    std::vector<ChainLeg> legs;  // verified segments of their timeline, contiguous

    struct ReceiptRef {
        std::uint64_t peer_step;   // m: the receipt's mark step on their timeline
        std::uint64_t local_step;  // the eliciting thread's step on ours
        EntanglementReceipt receipt;
    };
    std::vector<ReceiptRef> receipts;  // ordered by peer_step

    struct ThreadRef {
        std::uint64_t peer_step;    // p: their step announced by the thread
        std::uint64_t commit_step;  // our step whose tick committed its archival
        Bytes wire;
    };
    std::vector<ThreadRef> threads;  // ordered by peer_step

    std::map<std::uint64_t, Bytes> sent;  // our step -> thread wire we sent them
};

struct MapResult {
    MapStatus status = MapStatus::ok;
    std::optional<TemporalMapping> mapping;
    // populated for detailed-proof-needed: the gap the caller must fill
    std::uint64_t gap_lower = 0, gap_step = 0, gap_upper = 0;
};

class ProtocolNode {
public:
    static ProtocolNode create(const std::filesystem::path& dir, const HashConfig& cfg,
                               const Digest& genesis, ServiceId self, SigningKey key,
                               Membership members, bool write_through = true) {
        std::filesystem::create_directories(dir);
        ProtocolNode n(cfg, genesis, std::move(self), std::move(key), std::move(members));
        SkipListOptions slopts{write_through};
        RbbOptions rbopts;
        rbopts.write_through = write_through;
        n.timeline_.emplace(
            Timeline::create(dir / "timeline.twsl", cfg, genesis, n.self_, slopts));
        n.archive_.emplace(RbbTree::create(dir / "archive", cfg, genesis, rbopts));
        n.log_ = FdFile::open_rw(dir / "peerlog.bin", true);
        n.log_.truncate(0);
        n.write_through_ = write_through;
        n.init_peers();
        return n;
    }

    static ProtocolNode open(const std::filesystem::path& dir, ServiceId self, SigningKey key,
                             Membership members, bool write_through = true) {
        SkipListOptions slopts{write_through};
        ProtocolNode n({}, {}, std::move(self), std::move(key), std::move(members));
        n.timeline_.emplace(Timeline::open(dir / "timeline.twsl", n.self_, slopts));
        n.cfg_ = n.timeline_->hash_config();
        n.genesis_ = n.timeline_->store().genesis();
        n.archive_.emplace(RbbTree::open(dir / "archive", write_through));
        n.log_ = FdFile::open_rw(dir / "peerlog.bin", false);
        n.write_through_ = write_through;
        n.init_peers();
        n.replay_log();
        return n;
    }

    const ServiceId& self() const { return self_; }
    const Membership& members() const { return members_; }
    const HashConfig& hash_config() const { return cfg_; }
    const Digest& genesis() const { return genesis_; }
    Timeline& timeline() { return *timeline_; }
    const Timeline& timeline() const { return *timeline_; }
    RbbTree& archive() { return *archive_; }
    const RbbTree& archive() const { return *archive_; }
    const PeerState& peer(const Bytes& id) const { return peers_.at(id); }
    const std::map<Bytes, PeerState>& peers() const { return peers_; }

    // ---- outbound ----

    /// Builds and records a thread for `peer`, carrying a precedence proof
    /// from the peer's last-acknowledged step of our timeline (a full
    /// genesis-anchored proof on first contact). The emission record lands
    /// in the open archive delta, so g(E) commits to it at the next tick.
    Bytes make_thread(const Bytes& peer) {
        PeerState& ps = peers_.at(peer);
        std::uint64_t i = timeline_->step();
        if (i == 0) throw CodecError("cannot thread an empty timeline");
        TimelineThread t;
        t.mark.owner = self_.id;
        t.mark.step = i;
        t.mark.authenticator = timeline_->head();
        t.mark.sig = key_.sign(t.mark.signed_body());
        t.proof = timeline_->prove_precedence(ps.acked_step, i);
        Bytes wire = t.encode_wire(cfg_);
        archive_->insert(archive_key(peer, i, ThreadDir::out), wire);
        ps.sent[i] = wire;
        ps.acked_step = i;
        log_record(kLogSentThread, peer, i, 0, wire);
        return wire;
    }

    struct ThreadIngest {
        ThreadVerdict verdict = ThreadVerdict::broken_proof;
        Bytes sender;
        std::uint64_t step = 0;
    };

    /// Verifies an inbound thread and archives it into the open snapshot.
    /// On accept the sender's verified state advances; any reject leaves
    /// all state unchanged.
    ThreadIngest ingest_thread(ByteView wire, std::uint64_t commit_step) {
        TimelineThread t;
        try {
            Envelope env = open_envelope(wire);
            if (env.type != MsgType::thread) return {};
            Decoder d(env.body);
            t = TimelineThread::decode_body(d, cfg_);
        } catch (const CodecError&) {
            return {};
        }
        ThreadIngest res{ThreadVerdict::broken_proof, t.mark.owner, t.mark.step};
        auto mit = members_.find(t.mark.owner);
        auto pit = peers_.find(t.mark.owner);
        if (mit == members_.end() || pit == peers_.end()) {
            res.verdict = ThreadVerdict::unknown_peer;
            return res;
        }
        PeerState& ps = pit->second;
        if (!t.mark.verify(mit->second)) {
            res.verdict = ThreadVerdict::bad_signature;
            return res;
        }
        if (t.mark.step <= ps.last_archived_in) {
            res.verdict = ThreadVerdict::stale_step;
            return res;
        }
        if (t.proof.start != ps.known_step || t.proof.end != t.mark.step) return res;
        auto replayed = skiplist_replay(cfg_, t.proof, ps.known_auth);
        if (!replayed || *replayed != t.mark.authenticator) return res;

        Bytes w(wire.begin(), wire.end());
        archive_->insert(archive_key(t.mark.owner, t.mark.step, ThreadDir::in), w);
        accept_thread_bookkeeping(ps, t, w, commit_step);
        pending_receipts_.push_back({t.mark.owner, t.mark.step, w});
        log_record(kLogRecvThread, t.mark.owner, t.mark.step, commit_step, w);
        res.verdict = ThreadVerdict::accept;
        return res;
    }

    /// Builds the receipt for a thread archived at the j-1 -> j boundary.
    /// Component 1 spans from the sender's last-acknowledged step of our
    /// timeline to j-1; component 2 proves the thread fresh in archive
    /// snapshot j; component 3 derives T_j. `anchor` is the pre-step
    /// acknowledged step, shared by all receipts of one boundary.
    Bytes make_receipt(const Bytes& sender, std::uint64_t thread_step, std::uint64_t j,
                       std::uint64_t anchor, const Digest& f_state) {
        EntanglementReceipt r;
        r.issuer = self_.id;
        r.subject_sender = sender;
        r.subject_step = thread_step;
        r.prior = timeline_->prove_precedence(anchor, j - 1);
        r.att = build_archive_attestation(archive_key(sender, thread_step, ThreadDir::in), j,
                                          f_state, true);
        Bytes wire = r.encode_wire();
        log_record(kLogSentReceipt, sender, j, 0, {});
        return wire;
    }

    /// Attestation that `key` is committed in archive snapshot j and that
    /// T_j derives from it; `fresh` extends the tree proof to a NIL
    /// carrying the snapshot freshness.
    CommitAttestation build_archive_attestation(const Bytes& key, std::uint64_t j,
                                                const Digest& f_state, bool fresh) {
        return build_attestation(*archive_, false, key, j, f_state, fresh);
    }

    CommitAttestation build_attestation(const RbbTree& tree, bool tree_is_app, const Bytes& key,
                                        std::uint64_t j, const Digest& other, bool fresh) {
        CommitAttestation a;
        a.key = key;
        a.tree_proof = fresh ? tree.prove_fresh(j, key) : tree.prove(j, key);
        a.snapshot = j;
        a.prev_list_auth = tree.root_list().authenticator(j - 1);
        SkipListElement le = tree.root_list().element(j);
        a.list_links.assign(le.links.begin() + 1, le.links.end());
        a.tree_is_app = tree_is_app;
        a.other_digest = other;
        a.prev_timeline_auth = timeline_->authenticator(j - 1);
        SkipListElement te = timeline_->store().element(j);
        a.elem_links.assign(te.links.begin() + 1, te.links.end());
        a.mark.owner = self_.id;
        a.mark.step = j;
        a.mark.authenticator = te.authenticator;
        a.mark.sig = key_.sign(a.mark.signed_body());
        return a;
    }

    /// Threads accepted since the last boundary, awaiting receipts.
    struct PendingReceipt {
        Bytes sender;
        std::uint64_t step;
        Bytes wire;
    };
    std::vector<PendingReceipt> take_pending_receipts() {
        auto out = std::move(pending_receipts_);
        pending_receipts_.clear();
        return out;
    }

    /// Marks the acknowledgement advance after receipts for step j went out.
    void note_receipt_sent(const Bytes& peer, std::uint64_t j) {
        peers_.at(peer).acked_step = std::max(peers_.at(peer).acked_step, j);
    }

    // ---- inbound receipts ----

    ReceiptVerdict ingest_receipt(ByteView wire) {
        EntanglementReceipt r;
        try {
            Envelope env = open_envelope(wire);
            if (env.type != MsgType::receipt) return ReceiptVerdict::archive_proof_invalid;
            Decoder d(env.body);
            r = EntanglementReceipt::decode_body(d, cfg_);
        } catch (const CodecError&) {
            return ReceiptVerdict::archive_proof_invalid;
        }
        auto mit = members_.find(r.issuer);
        auto pit = peers_.find(r.issuer);
        if (mit == members_.end() || pit == peers_.end()) return ReceiptVerdict::bad_signature;
        PeerState& ps = pit->second;
        if (r.subject_sender != self_.id) return ReceiptVerdict::stale_anchor;
        auto sent_it = ps.sent.find(r.subject_step);
        if (sent_it == ps.sent.end()) return ReceiptVerdict::stale_anchor;

        std::uint64_t j = r.att.mark.step;
        if (j == 0 || r.prior.start != ps.known_step || r.prior.end != j - 1)
            return ReceiptVerdict::stale_anchor;
        auto t_prev = skiplist_replay(cfg_, r.prior, ps.known_auth);
        if (!t_prev) return ReceiptVerdict::stale_anchor;

        AttestationResult ar = verify_attestation(cfg_, r.att, mit->second);
        if (!ar.ok) {
            // distinguish the failing check for the reject reason
            Digest root;
            TreeProofResult tp = replay_tree_proof(cfg_, r.att.tree_proof, r.att.key, root);
            if (!tp.ok || !tp.present) return ReceiptVerdict::archive_proof_invalid;
            if (!r.att.mark.verify(mit->second)) return ReceiptVerdict::bad_signature;
            return ReceiptVerdict::derivation_mismatch;
        }
        if (r.att.key != archive_key(self_.id, r.subject_step, ThreadDir::in))
            return ReceiptVerdict::archive_proof_invalid;
        if (ar.target_value != sent_it->second) return ReceiptVerdict::archive_proof_invalid;
        if (ar.nil_label != *t_prev) return ReceiptVerdict::not_fresh;
        if (r.att.prev_timeline_auth != *t_prev) return ReceiptVerdict::derivation_mismatch;

        accept_receipt_bookkeeping(ps, r);
        log_record(kLogRecvReceipt, r.issuer, r.subject_step, 0,
                   Bytes(wire.begin(), wire.end()));
        return ReceiptVerdict::accept;
    }

    // ---- temporal mapping ----

    /// Maps remote time (peer, i) onto the local timeline from local
    /// information only: the latest receipt at or before i bounds it from
    /// below, the earliest archived thread at or after i from above, and
    /// the stored one-way chain over the peer's timeline must visit i.
    MapResult map_time(const Bytes& peer, std::uint64_t i) const {
        MapResult res;
        auto pit = peers_.find(peer);
        if (pit == peers_.end()) {
            res.status = MapStatus::unknown_peer;
            return res;
        }
        const PeerState& ps = pit->second;

        const PeerState::ReceiptRef* lower = nullptr;
        for (const auto& r : ps.receipts) {
            if (r.peer_step <= i && (!lower || r.peer_step > lower->peer_step)) lower = &r;
        }
        if (!lower) {
            res.status = MapStatus::no_lower_bound;
            return res;
        }
        const PeerState::ThreadRef* upper = nullptr;
        for (const auto& t : ps.threads) {
            if (t.peer_step >= i && t.commit_step != 0 &&
                (!upper || t.peer_step < upper->peer_step))
                upper = &t;
        }
        if (!upper) {
            res.status = MapStatus::no_upper_bound;
            return res;
        }

        std::uint64_t m = lower->peer_step, p = upper->peer_step;
        std::vector<ChainLeg> chain;
        bool visits = (i == m) || (i == p);
        for (const auto& leg : ps.legs) {
            if (leg.to() <= m || leg.from() >= p) continue;
            chain.push_back(leg);
            if (!visits) {
                for (const auto& hop : leg.proof.hops) visits = visits || hop.index == i;
                if (leg.bridge && leg.bridge->mark.step == i) visits = true;
            }
        }
        if (!visits) {
            res.status = MapStatus::detailed_proof_needed;
            res.gap_lower = m;
            res.gap_step = i;
            res.gap_upper = p;
            return res;
        }
        res.mapping = assemble_mapping(ps, *lower, *upper, i, std::move(chain));
        return res;
    }

    /// Completes a detailed-proof-needed mapping with finer proofs fetched
    /// from the remote service: one from the receipt step m to i, one from
    /// i to the thread step p. Both replay from locally verified
    /// authenticators, so the remote cannot smuggle in a different branch.
    MapResult map_time_refined(const Bytes& peer, std::uint64_t i, const SkipListProof& m_to_i,
                               const SkipListProof& i_to_p) const {
        MapResult base = map_time(peer, i);
        if (base.status != MapStatus::detailed_proof_needed) return base;
        const PeerState& ps = peers_.at(peer);
        std::uint64_t m = base.gap_lower, p = base.gap_upper;
        const PeerState::ReceiptRef* lower = nullptr;
        const PeerState::ThreadRef* upper = nullptr;
        for (const auto& r : ps.receipts)
            if (r.peer_step == m) lower = &r;
        for (const auto& t : ps.threads)
            if (t.peer_step == p) upper = &t;
        if (!lower || !upper) return base;

        if (m_to_i.start != m || m_to_i.end != i || i_to_p.start != i || i_to_p.end != p)
            return base;
        Digest tm = lower->receipt.att.mark.authenticator;
        auto ti = skiplist_replay(cfg_, m_to_i, tm);
        if (!ti) return base;
        auto tp = skiplist_replay(cfg_, i_to_p, *ti);
        if (!tp) return base;
        // the refined chain must land on the locally verified thread mark
        Digest want = thread_auth(*upper);
        if (*tp != want) return base;

        std::vector<ChainLeg> chain;
        if (m != i) chain.push_back(ChainLeg{m_to_i, std::nullopt});
        if (i != p) chain.push_back(ChainLeg{i_to_p, std::nullopt});
        MapResult res;
        res.mapping = assemble_mapping(ps, *lower, *upper, i, std::move(chain));
        return res;
    }

    /// Digest of the peer's step-i system state as this node verified it,
    /// if i is witnessed by the stored (or supplied) chain. Used to decide
    /// whether an event commitment belongs to the timeline this node knows.
    std::optional<Digest> witnessed_step_value(const Bytes& peer, std::uint64_t i) const {
        auto pit = peers_.find(peer);
        if (pit == peers_.end()) return std::nullopt;
        const PeerState& ps = pit->second;
        for (const auto& leg : ps.legs) {
            for (const auto& hop : leg.proof.hops)
                if (hop.index == i) return hop.value;
            if (leg.bridge && leg.bridge->mark.step == i) {
                AttestationResult ar =
                    verify_attestation(cfg_, *leg.bridge, members_.at(peer));
                if (ar.ok) return ar.step_value;
            }
        }
        return std::nullopt;
    }

    // ---- persistence plumbing shared with the node layer ----

    void flush_log() {
        if (write_through_) log_.sync();
    }

    /// Re-inserts emission records that were written to the log but whose
    /// archive snapshot has not closed yet (used when cloning a node mid
    /// history).
    void reinsert_uncommitted_emissions() {
        std::uint64_t committed = archive_->snapshot_count();
        for (auto& [peer, ps] : peers_) {
            for (auto& [step, wire] : ps.sent) {
                if (step >= committed)
                    archive_->insert(archive_key(peer, step, ThreadDir::out), wire);
            }
        }
    }

private:
    ProtocolNode(HashConfig cfg, Digest genesis, ServiceId self, SigningKey key,
                 Membership members)
        : cfg_(cfg),
          genesis_(genesis),
          self_(std::move(self)),
          key_(std::move(key)),
          members_(std::move(members)) {}

    void init_peers() {
        if (genesis_.width == 0) genesis_ = timeline_->store().genesis();
        for (const auto& [id, svc] : members_) {
            if (id == self_.id) continue;
            PeerState ps;
            ps.known_auth = genesis_;
            peers_.emplace(id, std::move(ps));
        }
    }

    void accept_thread_bookkeeping(PeerState& ps, const TimelineThread& t, const Bytes& wire,
                                   std::uint64_t commit_step) {
        ps.legs.push_back(ChainLeg{t.proof, std::nullopt});
        ps.known_step = t.mark.step;
        ps.known_auth = t.mark.authenticator;
        ps.last_archived_in = t.mark.step;
        ps.threads.push_back({t.mark.step, commit_step, wire});
    }

    void accept_receipt_bookkeeping(PeerState& ps, const EntanglementReceipt& r) {
        std::uint64_t j = r.att.mark.step;
        ps.legs.push_back(ChainLeg{r.prior, r.att});
        ps.known_step = j;
        ps.known_auth = r.att.mark.authenticator;
        ps.receipts.push_back({j, r.subject_step, r});
    }

    Digest thread_auth(const PeerState::ThreadRef& t) const {
        Envelope env = open_envelope(t.wire);
        Decoder d(env.body);
        return TimelineThread::decode_body(d, cfg_).mark.authenticator;
    }

    TemporalMapping assemble_mapping(const PeerState& ps, const PeerState::ReceiptRef& lower,
                                     const PeerState::ThreadRef& upper, std::uint64_t i,
                                     std::vector<ChainLeg> chain) const {
        TemporalMapping m;
        m.remote_id = lower.receipt.issuer;
        m.remote_step = i;
        m.local_id = self_.id;
        m.lower_step = lower.local_step;
        m.upper_step = upper.commit_step;
        m.lower_thread_wire = ps.sent.at(lower.local_step);
        m.lower_receipt = lower.receipt;
        m.chain = std::move(chain);
        m.upper_thread_wire = upper.wire;
        return m;
    }

    // ---- the peer log: replayable record of accepted protocol traffic ----

    static constexpr std::uint64_t kLogSentThread = 1;
    static constexpr std::uint64_t kLogRecvThread = 2;
    static constexpr std::uint64_t kLogRecvReceipt = 3;
    static constexpr std::uint64_t kLogSentReceipt = 4;

    void log_record(std::uint64_t kind, const Bytes& peer, std::uint64_t a, std::uint64_t b,
                    const Bytes& payload) {
        Encoder e;
        e.u64(kind).bytes(peer).u64(a).u64(b).bytes(payload);
        Bytes rec = Encoder().seq(e.view()).take();
        log_.write_at(log_.size(), rec);
    }

    void replay_log() {
        Bytes raw = log_.read_at(0, log_.size());
        Decoder d(raw);
        std::uint64_t committed = timeline_->step();
        while (!d.done()) {
            Decoder rec = d.seq();
            std::uint64_t kind = rec.u64();
            Bytes peer = rec.bytes();
            std::uint64_t a = rec.u64();
            std::uint64_t b = rec.u64();
            Bytes payload = rec.bytes();
            auto pit = peers_.find(peer);
            if (pit == peers_.end()) continue;
            PeerState& ps = pit->second;
            switch (kind) {
                case kLogSentThread: {
                    ps.sent[a] = payload;
                    ps.acked_step = std::max(ps.acked_step, a);
                    break;
                }
                case kLogRecvThread: {
                    if (b > committed) break;  // archived past the last tick; dropped
                    Envelope env = open_envelope(payload);
                    Decoder td(env.body);
                    TimelineThread t = TimelineThread::decode_body(td, cfg_);
                    accept_thread_bookkeeping(ps, t, payload, b);
                    break;
                }
                case kLogRecvReceipt: {
                    Envelope env = open_envelope(payload);
                    Decoder rd(env.body);
                    EntanglementReceipt r = EntanglementReceipt::decode_body(rd, cfg_);
                    accept_receipt_bookkeeping(ps, r);
                    break;
                }
                case kLogSentReceipt: {
                    ps.acked_step = std::max(ps.acked_step, a);
                    break;
                }
                default:
                    break;
            }
        }
    }

    HashConfig cfg_;
    Digest genesis_;
    ServiceId self_;
    SigningKey key_;
    Membership members_;
    std::optional<Timeline> timeline_;
    std::optional<RbbTree> archive_;
    std::map<Bytes, PeerState> peers_;
    std::vector<PendingReceipt> pending_receipts_;
    FdFile log_;
    bool write_through_ = true;
};

}  // namespace timeweave
