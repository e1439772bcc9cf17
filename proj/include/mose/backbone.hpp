#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <utility>
#include <vector>

#include "mose/rng.hpp"
#include "mose/tensor.hpp"

namespace mose {

struct BackboneConfig {
    int vocab_size = 64;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int max_seq = 32;
};

// Pre-LN transformer whose weights never change after construction. All
// tensors are created with requires_grad = false so the tape only grows
// through adapter deltas, prompts, and the classification head.
struct FrozenBackbone {
    BackboneConfig cfg;
    std::uint64_t init_seed = 0;

    Tensor tok_emb;  // [vocab x D]
    Tensor pos_emb;  // [max_seq x D]
    struct Layer {
        Tensor wq, wk, wv, wo;      // [D x D] each, stored [out x in]
        Tensor ln1_g, ln1_b;        // attention-block norm
        Tensor w1, w2;              // FFN [4D x D], [D x 4D]
        Tensor ln2_g, ln2_b;        // FFN-block norm
    };
    std::vector<Layer> layers;
    Tensor lnf_g, lnf_b;            // final norm before pooling
};

FrozenBackbone build_backbone(const BackboneConfig& cfg, std::uint64_t seed);

// FNV-1a over every frozen weight in a fixed order; stable across a run.
std::uint64_t backbone_checksum(const FrozenBackbone& b);

// Per-run trainable classifier: logits = pooled * W^T + bias.
struct ClassifierHead {
    Tensor W;     // [C x D]
    Tensor bias;  // [1 x C]
    int n_classes() const { return W.rows(); }
};

ClassifierHead make_head(int n_classes, int d_model, Rng stream);

// Optional per-layer attachments consumed by forward().
struct LayerHooks {
    // (layer, projection 0=Q 1=V) -> delta callback applied to the post-norm
    // rows u; the returned tensor is added to the frozen projection output.
    std::map<std::pair<int, int>, std::function<Tensor(Tensor)>> delta;
    // layer -> prompt rows [L_e x D] prepended to that layer's input; the
    // matching attention-output rows are dropped before the residual, so the
    // external sequence length never changes.
    std::map<int, Tensor> prompts;
};

struct ForwardResult {
    std::vector<Tensor> hidden;  // n_layers + 1 entries, embedding output first
    Tensor pooled;               // [1 x D], post final norm, mean over positions
    Tensor logits;               // [1 x C] when a head is given, else invalid
};

ForwardResult forward(const FrozenBackbone& b, const std::vector<int>& tokens,
                      const ClassifierHead* head = nullptr,
                      const LayerHooks* hooks = nullptr);

// L2-normalized mean-pooled final hidden state of the plain frozen forward
// (no adapters, no prompts, no gradients). Rank-1 [D].
Tensor query_feature(const FrozenBackbone& b, const std::vector<int>& tokens);

} // namespace mose
