// Copyright (c) the timeweave authors. All rights reserved.
// Licensed under the Apache 2.0 License.

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "timeweave/counters.hpp"
#include "timeweave/entangle.hpp"

namespace timeweave {

// A complete service node: application state (an authenticated dictionary
// of client-submitted event digests), the secure timeline, the thread
// archive and the receipt archive, driven by a six-stage step loop:
//
//   1. apply queued client events, close the application snapshot -> f(S)
//   2. set archive freshness to T_{j-1}, verify and archive inbound
//      messages, close the archive snapshot -> g(E)
//   3. d = H(f(S) || g(E))
//   4. append d to the timeline and sign the new mark
//   5. build receipts for the threads archived at this boundary
//   6. on entanglement steps, emit threads to all peers
//
// One step is one logical time unit; nothing consults a wall clock.

struct NodeInit {
    HashConfig cfg = HashConfig::sha256_default();
    Digest genesis;  // zero-width -> all-zero digest of cfg.width
    ServiceId self;
    std::optional<SigningKey> key;
    Membership members;
    std::uint64_t interval = 1;  // emit threads every `interval` steps
    bool write_through = true;
    bool combine_transport = false;  // hold receipts for the next thread
};

struct OutboundMsg {
    Bytes to;
    Bytes wire;
};

struct StepEvent {
    std::string kind;    // recv-thread | recv-receipt | send-thread | send-receipt
    std::string peer;    // display name when known, else hex id prefix
    std::uint64_t step = 0;
    std::string verdict;
};

struct StepOutput {
    std::uint64_t step = 0;
    SignedTimeMark mark;
    std::vector<OutboundMsg> out;
    std::vector<StepEvent> events;
};

class TimeweaveNode {
public:
    static TimeweaveNode create(const std::filesystem::path& dir, NodeInit init) {
        std::filesystem::create_directories(dir);
        TimeweaveNode n(std::move(init));
        Digest g = n.init_.genesis.width ? n.init_.genesis : Digest::zero(n.init_.cfg.width);
        n.init_.genesis = g;
        RbbOptions rbopts;
        rbopts.write_through = n.init_.write_through;
        n.app_.emplace(RbbTree::create(dir / "app", n.init_.cfg, g, rbopts));
        n.proto_.emplace(ProtocolNode::create(dir, n.init_.cfg, g, n.init_.self, *n.init_.key,
                                              n.init_.members, n.init_.write_through));
        n.dir_ = dir;
        return n;
    }

    static TimeweaveNode open(const std::filesystem::path& dir, NodeInit init) {
        TimeweaveNode n(std::move(init));
        n.app_.emplace(RbbTree::open(dir / "app", n.init_.write_through));
        n.init_.cfg = n.app_->hash_config();
        n.proto_.emplace(ProtocolNode::open(dir, n.init_.self, *n.init_.key, n.init_.members,
                                            n.init_.write_through));
        n.init_.genesis = n.proto_->genesis();
        n.dir_ = dir;
        return n;
    }

    /// Copies this node's stores and runtime state into a new directory.
    /// Must be called between steps. A dishonest service forks itself by
    /// cloning and feeding the two copies different traffic.
    TimeweaveNode clone(const std::filesystem::path& new_dir) const {
        std::filesystem::create_directories(new_dir);
        std::filesystem::copy(dir_, new_dir,
                              std::filesystem::copy_options::recursive |
                                  std::filesystem::copy_options::overwrite_existing);
        TimeweaveNode n = open(new_dir, init_);
        n.proto_->reinsert_uncommitted_emissions();
        n.pending_events_ = pending_events_;
        n.held_receipts_ = held_receipts_;
        return n;
    }

    const ServiceId& self() const { return init_.self; }
    const Membership& members() const { return proto_->members(); }
    const HashConfig& hash_config() const { return init_.cfg; }
    std::uint64_t interval() const { return init_.interval; }
    std::uint64_t step_count() const { return proto_->timeline().step(); }
    const Timeline& timeline() const { return proto_->timeline(); }
    Timeline& timeline() { return proto_->timeline(); }
    const RbbTree& archive() const { return proto_->archive(); }
    const RbbTree& app_state() const { return *app_; }
    ProtocolNode& protocol() { return *proto_; }
    const ProtocolNode& protocol() const { return *proto_; }

    Digest f_at(std::uint64_t j) const { return app_->root_list().authenticator(j); }
    Digest g_at(std::uint64_t j) const { return proto_->archive().root_list().authenticator(j); }

    /// Queues a client event digest; it commits at the next step boundary.
    void submit_event(const Digest& d) { pending_events_.push_back(d); }

    /// Step at which an event digest was committed, if it has been.
    std::optional<std::uint64_t> event_commit_step(const Digest& d) const {
        if (app_->snapshot_count() == 0) return std::nullopt;
        auto v = app_->lookup(app_->snapshot_count(), Bytes(d.bytes().begin(), d.bytes().end()));
        if (!v) return std::nullopt;
        Decoder dec(*v);
        return dec.u64();
    }

    /// Runs one full step. `inbound` must be in per-sender send order;
    /// `emit_override` forces or suppresses thread emission (nullopt means
    /// the configured interval rule applies).
    StepOutput step(const std::vector<Bytes>& inbound,
                    std::optional<std::vector<Bytes>> emit_override = std::nullopt) {
        StepOutput out;
        std::uint64_t j = proto_->timeline().step() + 1;
        out.step = j;
        Digest t_prev = proto_->timeline().authenticator(j - 1);

        // 1. client events into the application state
        app_->set_freshness(t_prev);
        for (const auto& d : pending_events_) {
            Bytes key(d.bytes().begin(), d.bytes().end());
            // an already-committed digest keeps its original commit step
            if (!app_->lookup(RbbTree::kOpenSnapshot, key))
                app_->insert(key, Encoder().u64(j).take());
        }
        pending_events_.clear();
        app_->close_snapshot();
        Digest f = app_->digest();

        // 2. archive inbound traffic under the previous mark's freshness
        proto_->archive().set_freshness(t_prev);
        for (const auto& wire : inbound) {
            ingest(wire, j, out.events);
        }
        proto_->archive().close_snapshot();
        Digest g = proto_->archive().digest();

        // 3 + 4. system digest and timeline tick
        Encoder e;
        e << f << g;
        Digest d = hash_bytes(init_.cfg, e.view());
        out.mark = proto_->timeline().tick_raw(*init_.key, d);

        // 5. receipts for threads archived at this boundary, one shared
        // component-1 anchor per sender
        auto pending = proto_->take_pending_receipts();
        std::map<Bytes, std::uint64_t> anchors;
        for (const auto& p : pending)
            anchors.emplace(p.sender, proto_->peer(p.sender).acked_step);
        for (const auto& p : pending) {
            Bytes wire = proto_->make_receipt(p.sender, p.step, j, anchors[p.sender], f);
            deliver_or_hold(p.sender, std::move(wire), out);
            out.events.push_back({"send-receipt", peer_name(p.sender), j, "ok"});
        }
        for (const auto& [sender, _] : anchors) proto_->note_receipt_sent(sender, j);

        // 6. thread emission
        std::vector<Bytes> targets;
        if (emit_override) {
            targets = *emit_override;
        } else if (init_.interval > 0 && j % init_.interval == 0) {
            for (const auto& [id, _] : proto_->peers()) targets.push_back(id);
        }
        for (const auto& to : targets) {
            // held receipts ride along with the thread, receipt first
            auto held = held_receipts_.find(to);
            if (held != held_receipts_.end()) {
                for (auto& w : held->second) out.out.push_back({to, std::move(w)});
                held_receipts_.erase(held);
            }
            Bytes wire = proto_->make_thread(to);
            out.out.push_back({to, std::move(wire)});
            out.events.push_back({"send-thread", peer_name(to), j, "ok"});
        }
        proto_->flush_log();
        return out;
    }

    // ---- mappings and evidence ----

    MapResult map_time(const Bytes& peer, std::uint64_t i) const {
        return proto_->map_time(peer, i);
    }
    MapResult map_time_refined(const Bytes& peer, std::uint64_t i, const SkipListProof& m_to_i,
                               const SkipListProof& i_to_p) const {
        return proto_->map_time_refined(peer, i, m_to_i, i_to_p);
    }

    /// Maps an event commitment from a remote domain: the attestation must
    /// chain to a step value this node has witnessed on the peer's
    /// timeline, otherwise the event cannot be placed at all.
    MapResult map_event(const Bytes& peer, const CommitAttestation& att) const {
        MapResult res;
        auto mit = members().find(peer);
        if (mit == members().end()) {
            res.status = MapStatus::unknown_peer;
            return res;
        }
        AttestationResult ar = verify_attestation(init_.cfg, att, mit->second);
        if (!ar.ok) {
            res.status = MapStatus::event_not_on_known_timeline;
            return res;
        }
        std::uint64_t i = ar.step;
        auto witnessed = proto_->witnessed_step_value(peer, i);
        if (witnessed && *witnessed != ar.step_value) {
            res.status = MapStatus::event_not_on_known_timeline;
            return res;
        }
        MapResult m = proto_->map_time(peer, i);
        if (m.status == MapStatus::ok && !witnessed) {
            // mapped via endpoint equality: the chain's value at i must
            // still match the attestation
            res.status = MapStatus::event_not_on_known_timeline;
            ChainReplay cr =
                replay_chain(init_.cfg, m.mapping->chain, m.mapping->lower_receipt.att.mark.step,
                             m.mapping->lower_receipt.att.mark.authenticator, mit->second);
            AttestationResult lower =
                verify_attestation(init_.cfg, m.mapping->lower_receipt.att, mit->second);
            if (lower.ok) cr.step_values[lower.step] = lower.step_value;
            auto it = cr.step_values.find(i);
            if (cr.ok && it != cr.step_values.end() && it->second == ar.step_value) return m;
            return res;
        }
        return m;
    }

    /// Self-contained evidence bundle for a mapping, optionally tying an
    /// event attestation to the mapped step. Verifiable by verify_bundle
    /// with no access to any store.
    Bytes export_bundle(const TemporalMapping& mapping,
                        const std::optional<std::pair<Digest, CommitAttestation>>& event = {}) {
        EvidenceBundle b;
        b.mapping = mapping;
        // local archival attestation for the upper thread
        Envelope env = open_envelope(mapping.upper_thread_wire);
        Decoder d(env.body);
        TimelineThread upper = TimelineThread::decode_body(d, init_.cfg);
        b.upper_att = proto_->build_archive_attestation(
            archive_key(mapping.remote_id, upper.mark.step, ThreadDir::in), mapping.upper_step,
            f_at(mapping.upper_step), false);
        if (event) {
            b.has_event = true;
            b.event_digest = Bytes(event->first.bytes().begin(), event->first.bytes().end());
            b.event_att = event->second;
        }
        return b.encode_wire();
    }

    /// Commitment attestation for an event digest this node committed.
    CommitAttestation event_attestation(const Digest& d) {
        auto step = event_commit_step(d);
        if (!step) throw CodecError("event not committed");
        Bytes key(d.bytes().begin(), d.bytes().end());
        return proto_->build_attestation(*app_, true, key, *step, g_at(*step), true);
    }

private:
    explicit TimeweaveNode(NodeInit init) : init_(std::move(init)) {}

    void ingest(const Bytes& wire, std::uint64_t j, std::vector<StepEvent>& events) {
        MsgType type;
        try {
            Decoder d(wire);
            type = static_cast<MsgType>(d.u64());
        } catch (const CodecError&) {
            events.push_back({"recv-garbage", "", j, "broken-proof"});
            return;
        }
        if (type == MsgType::thread) {
            auto r = proto_->ingest_thread(wire, j);
            StepEvent ev{"recv-thread", "", j, to_string(r.verdict)};
            if (!r.sender.empty()) {
                ev.peer = peer_name(r.sender);
                ev.step = r.step;
            }
            events.push_back(std::move(ev));
        } else if (type == MsgType::receipt) {
            ReceiptVerdict v = proto_->ingest_receipt(wire);
            events.push_back({"recv-receipt", "", j, to_string(v)});
        } else {
            events.push_back({"recv-garbage", "", j, "broken-proof"});
        }
    }

    void deliver_or_hold(const Bytes& to, Bytes wire, StepOutput& out) {
        if (init_.combine_transport) {
            held_receipts_[to].push_back(std::move(wire));
        } else {
            out.out.push_back({to, std::move(wire)});
        }
    }

    std::string peer_name(const Bytes& id) const {
        auto it = members().find(id);
        if (it != members().end() && !it->second.name.empty()) return it->second.name;
        return hex(ByteView(id.data(), std::min<size_t>(id.size(), 6)));
    }

    NodeInit init_;
    std::filesystem::path dir_;
    std::optional<RbbTree> app_;
    std::optional<ProtocolNode> proto_;
    std::vector<Digest> pending_events_;
    std::map<Bytes, std::vector<Bytes>> held_receipts_;
};

}  // namespace timeweave
