#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "unilong/common.hpp"

namespace unilong {

enum class BlockKind { Text, Vit, Vae, Special };

const char* to_string(BlockKind k);
BlockKind block_kind_from_string(const std::string& s);

// A contiguous run of tokens of one kind, owned by one turn.
// [start, start+len) in global token indices.
struct Block {
    BlockKind kind = BlockKind::Text;
    uint64_t start = 0;
    uint64_t len = 0;
    int turn = 0; // 1-based

    uint64_t end() const { return start + len; }
    bool contains(uint64_t tok) const { return tok >= start && tok < end(); }
};

struct Turn {
    int index = 0; // 1-based
    std::optional<Block> text;
    std::optional<Block> vit;
    std::optional<Block> vae;
    std::vector<Block> specials;
};

struct BlockSpec {
    int turn = 0;
    BlockKind kind = BlockKind::Text;
    uint64_t len = 0;
};

// Interleaved multimodal sequence: turns 1..m are history, the final
// turn holds the image currently being generated. Immutable after
// construction; token ranges are disjoint and cover [0, total_tokens).
class InterleavedSequence {
public:
    // Layout follows the spec order exactly. Turn indices must be
    // contiguous from 1 and nondecreasing; the last entry must be the
    // VAE block of the current image.
    static InterleavedSequence build(const std::vector<BlockSpec>& spec);

    static InterleavedSequence from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    uint64_t total_tokens() const { return total_tokens_; }
    const Block& current_vae() const { return current_vae_; }
    int current_turn() const { return static_cast<int>(turns_.size()); }
    int history_turn_count() const { return current_turn() - 1; }

    const Turn& turn(int index1) const; // throws on unknown index
    const std::vector<Turn>& turns() const { return turns_; }
    const std::vector<Block>& layout() const { return layout_; }

    // First token of the current turn; the history region is
    // [0, history_end) and curation plans only ever touch it.
    uint64_t history_end() const { return history_end_; }

    // History turn indices (1..m) that carry a block of `kind`.
    std::vector<int> history_turns_with(BlockKind kind) const;

    // kind of the block covering a global token index
    BlockKind kind_of(uint64_t token) const;
    int turn_of(uint64_t token) const;

private:
    std::vector<Turn> turns_;
    Block current_vae_;
    uint64_t total_tokens_ = 0;
    uint64_t history_end_ = 0;
    std::vector<Block> layout_;
};

// Union of token ranges of `kind` blocks in the given turns, ascending.
std::vector<uint64_t> tokens_of(const InterleavedSequence& seq,
                                const std::set<int>& turn_set,
                                BlockKind kind);

} // namespace unilong
