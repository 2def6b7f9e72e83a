#include "unilong/sequence.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

namespace unilong {

const char* to_string(BlockKind k) {
    switch (k) {
        case BlockKind::Text: return "text";
        case BlockKind::Vit: return "vit";
        case BlockKind::Vae: return "vae";
        case BlockKind::Special: return "special";
    }
    return "?";
}

BlockKind block_kind_from_string(const std::string& s) {
    if (s == "text") return BlockKind::Text;
    if (s == "vit") return BlockKind::Vit;
    if (s == "vae") return BlockKind::Vae;
    if (s == "special") return BlockKind::Special;
    throw ValidationError("unknown block kind: " + s);
}

InterleavedSequence InterleavedSequence::build(const std::vector<BlockSpec>& spec) {
    require(!spec.empty(), "sequence layout is empty");
    require(spec.back().kind == BlockKind::Vae,
            "last layout entry must be the current image's vae block");

    InterleavedSequence seq;
    uint64_t cursor = 0;
    int prev_turn = 0;
    for (const BlockSpec& bs : spec) {
        require(bs.len > 0, "layout error: zero-length block in turn " +
                                std::to_string(bs.turn));
        require(bs.turn >= 1, "turn indices are 1-based");
        require(bs.turn >= prev_turn, "layout error: turn indices must be nondecreasing");
        require(bs.turn <= prev_turn + 1,
                "layout error: turn indices must be contiguous (gap before turn " +
                    std::to_string(bs.turn) + ")");
        if (bs.turn == prev_turn + 1) {
            Turn t;
            t.index = bs.turn;
            seq.turns_.push_back(t);
            prev_turn = bs.turn;
        }
        Block b{bs.kind, cursor, bs.len, bs.turn};
        Turn& t = seq.turns_.back();
        switch (bs.kind) {
            case BlockKind::Text:
                require(!t.text, "turn " + std::to_string(bs.turn) + " already has a text block");
                t.text = b;
                break;
            case BlockKind::Vit:
                require(!t.vit, "turn " + std::to_string(bs.turn) + " already has a vit block");
                t.vit = b;
                break;
            case BlockKind::Vae:
                require(!t.vae, "turn " + std::to_string(bs.turn) + " already has a vae block");
                t.vae = b;
                break;
            case BlockKind::Special:
                t.specials.push_back(b);
                break;
        }
        seq.layout_.push_back(b);
        cursor += bs.len;
    }
    seq.total_tokens_ = cursor;
    seq.current_vae_ = seq.layout_.back();

    // history ends where the current turn begins
    const int cur = seq.current_turn();
    uint64_t hist_end = seq.total_tokens_;
    for (const Block& b : seq.layout_) {
        if (b.turn == cur) { hist_end = b.start; break; }
    }
    seq.history_end_ = hist_end;
    return seq;
}

const Turn& InterleavedSequence::turn(int index1) const {
    require(index1 >= 1 && index1 <= static_cast<int>(turns_.size()),
            "unknown turn index " + std::to_string(index1));
    return turns_[static_cast<std::size_t>(index1 - 1)];
}

std::vector<int> InterleavedSequence::history_turns_with(BlockKind kind) const {
    std::vector<int> out;
    for (int i = 1; i <= history_turn_count(); ++i) {
        const Turn& t = turns_[static_cast<std::size_t>(i - 1)];
        bool has = false;
        switch (kind) {
            case BlockKind::Text: has = t.text.has_value(); break;
            case BlockKind::Vit: has = t.vit.has_value(); break;
            case BlockKind::Vae: has = t.vae.has_value(); break;
            case BlockKind::Special: has = !t.specials.empty(); break;
        }
        if (has) out.push_back(i);
    }
    return out;
}

BlockKind InterleavedSequence::kind_of(uint64_t token) const {
    for (const Block& b : layout_)
        if (b.contains(token)) return b.kind;
    throw ValidationError("token index " + std::to_string(token) + " out of range");
}

int InterleavedSequence::turn_of(uint64_t token) const {
    for (const Block& b : layout_)
        if (b.contains(token)) return b.turn;
    throw ValidationError("token index " + std::to_string(token) + " out of range");
}

std::vector<uint64_t> tokens_of(const InterleavedSequence& seq,
                                const std::set<int>& turn_set,
                                BlockKind kind) {
    std::vector<uint64_t> out;
    for (int ti : turn_set) {
        const Turn& t = seq.turn(ti); // validates the index
        std::vector<const Block*> blocks;
        switch (kind) {
            case BlockKind::Text: if (t.text) blocks.push_back(&*t.text); break;
            case BlockKind::Vit: if (t.vit) blocks.push_back(&*t.vit); break;
            case BlockKind::Vae: if (t.vae) blocks.push_back(&*t.vae); break;
            case BlockKind::Special:
                for (const Block& s : t.specials) blocks.push_back(&s);
                break;
        }
        for (const Block* b : blocks)
            for (uint64_t tok = b->start; tok < b->end(); ++tok) out.push_back(tok);
    }
    std::sort(out.begin(), out.end());
    return out;
}

nlohmann::json InterleavedSequence::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const Block& b : layout_) {
        arr.push_back({{"turn", b.turn},
                       {"kind", to_string(b.kind)},
                       {"start", b.start},
                       {"len", b.len}});
    }
    return arr;
}

InterleavedSequence InterleavedSequence::from_json(const nlohmann::json& j) {
    require(j.is_array(), "sequence sidecar must be a JSON array");
    std::vector<BlockSpec> spec;
    uint64_t cursor = 0;
    for (const auto& e : j) {
        require(e.is_object() && e.contains("turn") && e.contains("kind") &&
                    e.contains("start") && e.contains("len"),
                "sequence sidecar entries need {turn, kind, start, len}");
        BlockSpec bs;
        bs.turn = e.at("turn").get<int>();
        bs.kind = block_kind_from_string(e.at("kind").get<std::string>());
        bs.len = e.at("len").get<uint64_t>();
        uint64_t start = e.at("start").get<uint64_t>();
        require(start == cursor, "sequence sidecar: block start " + std::to_string(start) +
                                     " breaks contiguity (expected " +
                                     std::to_string(cursor) + ")");
        cursor += bs.len;
        spec.push_back(bs);
    }
    return build(spec);
}

} // namespace unilong
