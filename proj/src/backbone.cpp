#include "mose/backbone.hpp"

#include <cmath>
#include <string>

#include "mose/error.hpp"
#include "mose/ops.hpp"

namespace mose {

namespace {

Tensor frozen_gaussian(std::vector<int> shape, Rng rng) {
    // scaled by the input width so activations stay O(1)
    const int fan_in = shape.back();
    const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::size_t n = 1;
    for (int e : shape) n *= static_cast<std::size_t>(e);
    std::vector<double> d(n);
    for (auto& v : d) v = rng.normal(0.0, std);
    return Tensor::from(std::move(shape), std::move(d), false);
}

Tensor ones_row(int n) { return Tensor::from({n}, std::vector<double>(n, 1.0), false); }

} // namespace

FrozenBackbone build_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
    if (cfg.vocab_size < 1 || cfg.d_model < 1 || cfg.n_layers < 1 ||
        cfg.n_heads < 1 || cfg.max_seq < 1)
        throw ConfigError("backbone sizes must all be positive");
    if (cfg.d_model % cfg.n_heads != 0)
        throw ConfigError("backbone d_model " + std::to_string(cfg.d_model) +
                          " is not divisible by n_heads " + std::to_string(cfg.n_heads));

    FrozenBackbone b;
    b.cfg = cfg;
    b.init_seed = seed;
    Rng root = Rng(seed).stream("backbone");
    const int d = cfg.d_model;

    b.tok_emb = frozen_gaussian({cfg.vocab_size, d}, root.stream("tok_emb"));
    b.pos_emb = frozen_gaussian({cfg.max_seq, d}, root.stream("pos_emb"));
    for (int l = 0; l < cfg.n_layers; ++l) {
        Rng lr = root.stream("layer" + std::to_string(l));
        FrozenBackbone::Layer layer;
        layer.wq = frozen_gaussian({d, d}, lr.stream("wq"));
        layer.wk = frozen_gaussian({d, d}, lr.stream("wk"));
        layer.wv = frozen_gaussian({d, d}, lr.stream("wv"));
        layer.wo = frozen_gaussian({d, d}, lr.stream("wo"));
        layer.w1 = frozen_gaussian({4 * d, d}, lr.stream("w1"));
        layer.w2 = frozen_gaussian({d, 4 * d}, lr.stream("w2"));
        layer.ln1_g = ones_row(d);
        layer.ln1_b = Tensor::zeros({d});
        layer.ln2_g = ones_row(d);
        layer.ln2_b = Tensor::zeros({d});
        b.layers.push_back(std::move(layer));
    }
    b.lnf_g = ones_row(d);
    b.lnf_b = Tensor::zeros({d});
    return b;
}

std::uint64_t backbone_checksum(const FrozenBackbone& b) {
    std::uint64_t h = 14695981039346656037ull;
    auto feed = [&h](const Tensor& t) {
        h = fnv1a64(t.data().data(), t.data().size() * sizeof(double), h);
    };
    feed(b.tok_emb);
    feed(b.pos_emb);
    for (const auto& l : b.layers) {
        feed(l.wq); feed(l.wk); feed(l.wv); feed(l.wo);
        feed(l.ln1_g); feed(l.ln1_b);
        feed(l.w1); feed(l.w2);
        feed(l.ln2_g); feed(l.ln2_b);
    }
    feed(b.lnf_g);
    feed(b.lnf_b);
    return h;
}

ClassifierHead make_head(int n_classes, int d_model, Rng stream) {
    if (n_classes < 2) throw ConfigError("head needs at least 2 classes");
    const double std = 1.0 / std::sqrt(static_cast<double>(d_model));
    std::vector<double> w(static_cast<std::size_t>(n_classes) * d_model);
    for (auto& v : w) v = stream.normal(0.0, std);
    ClassifierHead head;
    head.W = Tensor::from({n_classes, d_model}, std::move(w), true);
    head.bias = Tensor::zeros({1, n_classes}, true);
    return head;
}

ForwardResult forward(const FrozenBackbone& b, const std::vector<int>& tokens,
                      const ClassifierHead* head, const LayerHooks* hooks) {
    const BackboneConfig& cfg = b.cfg;
    if (tokens.empty()) throw InputError("forward: empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg.max_seq)
        throw InputError("forward: sequence length " + std::to_string(tokens.size()) +
                         " exceeds max " + std::to_string(cfg.max_seq));
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw InputError("forward: token id " + std::to_string(t) +
                             " outside vocabulary of " + std::to_string(cfg.vocab_size));
    if (hooks) {
        for (const auto& [key, fn] : hooks->delta) {
            (void)fn;
            if (key.first < 0 || key.first >= cfg.n_layers || key.second < 0 || key.second > 1)
                throw ConfigError("forward: adapter hook on layer " +
                                  std::to_string(key.first) + " projection " +
                                  std::to_string(key.second) + " is out of range");
        }
        for (const auto& [layer, e] : hooks->prompts) {
            if (layer < 0 || layer >= cfg.n_layers)
                throw ConfigError("forward: prompt hook on layer " + std::to_string(layer) +
                                  " is out of range");
            if (e.cols() != cfg.d_model)
                throw DimensionError("forward: prompt width " + std::to_string(e.cols()) +
                                     " does not match d_model " + std::to_string(cfg.d_model));
        }
    }

    const int L = static_cast<int>(tokens.size());
    const int d = cfg.d_model;
    const int n_heads = cfg.n_heads;
    const int dh = d / n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardResult out;
    Tensor x = add(gather_rows(b.tok_emb, tokens), slice_rows(b.pos_emb, 0, L));
    out.hidden.push_back(x);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& ly = b.layers[l];

        Tensor xt = x;
        int n_prompt = 0;
        if (hooks) {
            auto it = hooks->prompts.find(l);
            if (it != hooks->prompts.end()) {
                n_prompt = it->second.rows();
                xt = concat_rows({it->second, x});
            }
        }

        Tensor u = layer_norm(xt, ly.ln1_g, ly.ln1_b);
        Tensor q = matmul(u, transpose(ly.wq));
        Tensor k = matmul(u, transpose(ly.wk));
        Tensor v = matmul(u, transpose(ly.wv));
        if (hooks) {
            auto qi = hooks->delta.find({l, 0});
            if (qi != hooks->delta.end()) q = add(q, qi->second(u));
            auto vi = hooks->delta.find({l, 1});
            if (vi != hooks->delta.end()) v = add(v, vi->second(u));
        }

        std::vector<Tensor> heads;
        heads.reserve(n_heads);
        for (int h = 0; h < n_heads; ++h) {
            Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
            Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
            Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
            Tensor att = softmax(scale(matmul(qh, transpose(kh)), att_scale));
            heads.push_back(matmul(att, vh));
        }
        Tensor catd = (n_heads == 1) ? heads[0] : concat_cols(heads);
        Tensor att_out = matmul(catd, transpose(ly.wo));
        if (n_prompt > 0) att_out = slice_rows(att_out, n_prompt, n_prompt + L);
        x = add(x, att_out);

        Tensor u2 = layer_norm(x, ly.ln2_g, ly.ln2_b);
        Tensor f = matmul(gelu(matmul(u2, transpose(ly.w1))), transpose(ly.w2));
        x = add(x, f);
        out.hidden.push_back(x);
    }

    out.pooled = mean_rows(layer_norm(x, b.lnf_g, b.lnf_b));
    if (head) {
        if (head->W.cols() != d)
            throw DimensionError("forward: head width " + std::to_string(head->W.cols()) +
                                 " does not match d_model " + std::to_string(d));
        out.logits = add(matmul(out.pooled, transpose(head->W)), head->bias);
    }
    return out;
}

Tensor query_feature(const FrozenBackbone& b, const std::vector<int>& tokens) {
    NoGradGuard ng;
    ForwardResult r = forward(b, tokens);
    const auto& p = r.pooled.data();
    double nsq = 0.0;
    for (double v : p) nsq += v * v;
    if (nsq == 0.0) throw DegenerateInputError("query_feature: zero-norm pooled state");
    const double inv = 1.0 / std::sqrt(nsq);
    std::vector<double> q(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) q[i] = p[i] * inv;
    return Tensor::from({b.cfg.d_model}, std::move(q), false);
}

} // namespace mose
