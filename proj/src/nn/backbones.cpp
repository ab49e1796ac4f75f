#include "retsyn/nn/backbones.hpp"

namespace retsyn::nn {

namespace {

int gn_groups(int channels) {
    int g = std::min(8, channels);
    while (channels % g != 0) --g;
    return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// SEBlock

SEBlock::SEBlock(const std::string& name, int channels, int reduced, Rng& rng) {
    fc1 = Linear(name + ".fc1", channels, reduced, rng);
    fc2 = Linear(name + ".fc2", reduced, channels, rng);
}

Tensor SEBlock::forward(const Tensor& x) {
    x_ = x;
    Tensor p = pool.forward(x);
    s_ = gate.forward(fc2.forward(act.forward(fc1.forward(p))));
    int N = x.n(), C = x.c(), HW = x.h() * x.w();
    Tensor y = x;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float s = s_.data[static_cast<size_t>(n) * C + c];
            float* yp = y.ptr() + (static_cast<size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) yp[i] *= s;
        }
    return y;
}

Tensor SEBlock::backward(const Tensor& dy) {
    int N = dy.n(), C = dy.c(), HW = dy.h() * dy.w();
    Tensor ds({N, C});
    Tensor dx = dy;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float s = s_.data[static_cast<size_t>(n) * C + c];
            const float* xp = x_.ptr() + (static_cast<size_t>(n) * C + c) * HW;
            float* dxp = dx.ptr() + (static_cast<size_t>(n) * C + c) * HW;
            double acc = 0.0;
            for (int i = 0; i < HW; ++i) {
                acc += static_cast<double>(dxp[i]) * xp[i];
                dxp[i] *= s;
            }
            ds.data[static_cast<size_t>(n) * C + c] = static_cast<float>(acc);
        }
    Tensor dp = fc1.backward(act.backward(fc2.backward(gate.backward(ds))));
    Tensor dpool = pool.backward(dp);
    for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dpool.data[i];
    return dx;
}

void SEBlock::collect(std::vector<Param*>& out) {
    fc1.collect(out);
    fc2.collect(out);
}

// ---------------------------------------------------------------------------
// FilmSite

FilmSite::FilmSite(const std::string& name, int emb_dim, int channels_, Rng& rng)
    : channels(channels_) {
    gen = Linear(name + ".gen", emb_dim, 2 * channels, rng);
    std::fill(gen.weight.w.begin(), gen.weight.w.end(), 0.0f);
    std::fill(gen.bias.w.begin(), gen.bias.w.end(), 0.0f);
    for (int c = 0; c < channels; ++c) gen.bias.w[static_cast<size_t>(c)] = 1.0f;  // scale half
}

Tensor FilmSite::forward(const Tensor& x, const Tensor& emb) {
    x_ = x;
    Tensor sb = gen.forward(emb);  // [N, 2C]
    int N = x.n(), C = channels;
    scale_ = Tensor({N, C});
    Tensor bias({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            scale_.data[static_cast<size_t>(n) * C + c] = sb.data[static_cast<size_t>(n) * 2 * C + c];
            bias.data[static_cast<size_t>(n) * C + c] = sb.data[static_cast<size_t>(n) * 2 * C + C + c];
        }
    return film_modulate(x, scale_, bias);
}

Tensor FilmSite::backward(const Tensor& dy) {
    FilmResult r = film_backward(x_, scale_, dy);
    int N = dy.n(), C = channels;
    Tensor dsb({N, 2 * C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            dsb.data[static_cast<size_t>(n) * 2 * C + c] = r.dscale.data[static_cast<size_t>(n) * C + c];
            dsb.data[static_cast<size_t>(n) * 2 * C + C + c] = r.dbias.data[static_cast<size_t>(n) * C + c];
        }
    gen.backward(dsb);  // conditioning embedding comes from a frozen model
    return r.dx;
}

// ---------------------------------------------------------------------------
// Compact backbone: GN/SiLU conv stages, used for desk-scale runs.

struct CompactNet final : Backbone {
    BackboneConfig cfg;
    struct Stage {
        Conv2d conv1, conv2;
        GroupNorm gn1, gn2;
        SiLU a1, a2;
    };
    Conv2d stem;
    GroupNorm stem_gn;
    SiLU stem_act;
    std::vector<Stage> stages;
    GlobalAvgPool gap;
    Linear fc;
    FilmSite film0, film1;  // stem->stage1 and stage2->stage3
    Tensor pooled_;

    CompactNet(const BackboneConfig& c, uint64_t seed) : cfg(c) {
        Rng rng = Rng::seeded(seed);
        const auto& w = cfg.compact_widths;
        if (w.size() < 2) raise("compact backbone needs at least two widths");
        stem = Conv2d("stem.conv", cfg.in_channels, w[0], 3, 1, 1, 1, rng);
        stem_gn = GroupNorm("stem.gn", gn_groups(w[0]), w[0]);
        for (size_t i = 1; i < w.size(); ++i) {
            Stage s;
            std::string nm = "stage" + std::to_string(i);
            s.conv1 = Conv2d(nm + ".conv1", w[i - 1], w[i], 3, 2, 1, 1, rng);
            s.gn1 = GroupNorm(nm + ".gn1", gn_groups(w[i]), w[i]);
            s.conv2 = Conv2d(nm + ".conv2", w[i], w[i], 3, 1, 1, 1, rng);
            s.gn2 = GroupNorm(nm + ".gn2", gn_groups(w[i]), w[i]);
            stages.push_back(std::move(s));
        }
        fc = Linear("fc", w.back(), cfg.num_outputs, rng);
        if (cfg.film) {
            film0 = FilmSite("film0", cfg.film_emb_dim, w[0], rng);
            size_t mid = std::min<size_t>(2, stages.size() - 1);
            film1 = FilmSite("film1", cfg.film_emb_dim, w[mid], rng);
            film1_after_ = mid;
        }
    }

    Tensor forward_features(const Tensor& x, const Tensor* film_emb) override {
        Tensor h = stem_act.forward(stem_gn.forward(stem.forward(x)));
        if (cfg.film) {
            if (!film_emb) raise("FiLM backbone requires a conditioning embedding");
            h = film0.forward(h, *film_emb);
        }
        for (size_t i = 0; i < stages.size(); ++i) {
            auto& s = stages[i];
            h = s.a1.forward(s.gn1.forward(s.conv1.forward(h)));
            h = s.a2.forward(s.gn2.forward(s.conv2.forward(h)));
            if (cfg.film && i + 1 == film1_after_) h = film1.forward(h, *film_emb);
        }
        return h;
    }

    Tensor forward_head(const Tensor& feats) override {
        pooled_ = gap.forward(feats);
        return fc.forward(pooled_);
    }

    Tensor backward_head(const Tensor& dlogits) override {
        return gap.backward(fc.backward(dlogits));
    }

    void backward_features(const Tensor& dfeats) override {
        Tensor d = dfeats;
        for (size_t i = stages.size(); i-- > 0;) {
            if (cfg.film && i + 1 == film1_after_) d = film1.backward(d);
            auto& s = stages[i];
            d = s.conv2.backward(s.gn2.backward(s.a2.backward(d)));
            d = s.conv1.backward(s.gn1.backward(s.a1.backward(d)));
        }
        if (cfg.film) d = film0.backward(d);
        stem.backward(stem_gn.backward(stem_act.backward(d)));
    }

    const Tensor& pooled_embedding() const override { return pooled_; }
    int feature_channels() const override { return cfg.compact_widths.back(); }
    int embed_dim() const override { return cfg.compact_widths.back(); }
    const BackboneConfig& config() const override { return cfg; }
    std::string hook_name() const override {
        return "stage" + std::to_string(stages.size()) + ".a2";
    }

    void collect(std::vector<Param*>& out) override {
        stem.collect(out);
        stem_gn.collect(out);
        for (auto& s : stages) {
            s.conv1.collect(out);
            s.gn1.collect(out);
            s.conv2.collect(out);
            s.gn2.collect(out);
        }
        fc.collect(out);
        if (cfg.film) {
            film0.collect(out);
            film1.collect(out);
        }
    }
    void set_training(bool t) override { training = t; }

private:
    size_t film1_after_ = 2;
};

// ---------------------------------------------------------------------------
// EfficientNet-B0-shaped backbone: MBConv blocks with depthwise convolutions
// and squeeze-excitation, batch norm, SiLU. Trains from random init.

struct MBConv : Module {
    int in_c = 0, out_c = 0, stride = 1, exp_c = 0;
    bool has_expand = false, residual = false;
    Conv2d expand, dw, project;
    BatchNorm2d bn0, bn1, bn2;
    SiLU a0, a1;
    SEBlock se;

    MBConv() = default;
    MBConv(const std::string& name, int in_channels, int out_channels, int expansion,
           int k, int stride_, Rng& rng)
        : in_c(in_channels), out_c(out_channels), stride(stride_) {
        exp_c = in_c * expansion;
        has_expand = expansion != 1;
        if (has_expand) {
            expand = Conv2d(name + ".expand", in_c, exp_c, 1, 1, 0, 1, rng);
            bn0 = BatchNorm2d(name + ".bn0", exp_c);
        }
        dw = Conv2d(name + ".dw", exp_c, exp_c, k, stride, k / 2, exp_c, rng);
        bn1 = BatchNorm2d(name + ".bn1", exp_c);
        se = SEBlock(name + ".se", exp_c, std::max(1, in_c / 4), rng);
        project = Conv2d(name + ".project", exp_c, out_c, 1, 1, 0, 1, rng);
        bn2 = BatchNorm2d(name + ".bn2", out_c);
        residual = (stride == 1 && in_c == out_c);
    }

    Tensor forward(const Tensor& x) {
        Tensor h = x;
        if (has_expand) h = a0.forward(bn0.forward(expand.forward(h)));
        h = a1.forward(bn1.forward(dw.forward(h)));
        h = se.forward(h);
        h = bn2.forward(project.forward(h));
        if (residual)
            for (size_t i = 0; i < h.data.size(); ++i) h.data[i] += x.data[i];
        return h;
    }

    Tensor backward(const Tensor& dy) {
        Tensor d = project.backward(bn2.backward(dy));
        d = se.backward(d);
        d = dw.backward(bn1.backward(a1.backward(d)));
        if (has_expand) d = expand.backward(bn0.backward(a0.backward(d)));
        if (residual)
            for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += dy.data[i];
        return d;
    }

    void collect(std::vector<Param*>& out) override {
        if (has_expand) {
            expand.collect(out);
            bn0.collect(out);
        }
        dw.collect(out);
        bn1.collect(out);
        se.collect(out);
        project.collect(out);
        bn2.collect(out);
    }
    void set_training(bool t) override {
        training = t;
        bn0.set_training(t);
        bn1.set_training(t);
        bn2.set_training(t);
    }
};

struct EfficientNetB0 final : Backbone {
    BackboneConfig cfg;
    Conv2d stem;
    BatchNorm2d stem_bn;
    SiLU stem_act;
    std::vector<MBConv> blocks;
    Conv2d head_conv;
    BatchNorm2d head_bn;
    SiLU head_act;
    GlobalAvgPool gap;
    Linear fc;
    FilmSite film0, film1;
    int film1_after_block = 0;  // FiLM between block groups 2 and 3
    Tensor pooled_;

    EfficientNetB0(const BackboneConfig& c, uint64_t seed) : cfg(c) {
        Rng rng = Rng::seeded(seed);
        stem = Conv2d("stem.conv", cfg.in_channels, 32, 3, 2, 1, 1, rng);
        stem_bn = BatchNorm2d("stem.bn", 32);

        struct Spec {
            int e, c, n, s, k;
        };
        // expansion, channels, repeats, first stride, kernel
        const Spec specs[] = {{1, 16, 1, 1, 3}, {6, 24, 2, 2, 3}, {6, 40, 2, 2, 5},
                              {6, 80, 3, 2, 3}, {6, 112, 3, 1, 5}, {6, 192, 4, 2, 5},
                              {6, 320, 1, 1, 3}};
        int in_c = 32, idx = 0, group = 0;
        for (const auto& sp : specs) {
            ++group;
            for (int r = 0; r < sp.n; ++r) {
                blocks.emplace_back("block" + std::to_string(idx), in_c, sp.c, sp.e, sp.k,
                                    r == 0 ? sp.s : 1, rng);
                in_c = sp.c;
                ++idx;
            }
            if (group == 2) film1_after_block = idx;
        }
        head_conv = Conv2d("head.conv", in_c, 1280, 1, 1, 0, 1, rng);
        head_bn = BatchNorm2d("head.bn", 1280);
        fc = Linear("fc", 1280, cfg.num_outputs, rng);
        if (cfg.film) {
            film0 = FilmSite("film0", cfg.film_emb_dim, 32, rng);
            film1 = FilmSite("film1", cfg.film_emb_dim, 24, rng);
        }
    }

    Tensor forward_features(const Tensor& x, const Tensor* film_emb) override {
        Tensor h = stem_act.forward(stem_bn.forward(stem.forward(x)));
        if (cfg.film) {
            if (!film_emb) raise("FiLM backbone requires a conditioning embedding");
            h = film0.forward(h, *film_emb);
        }
        for (size_t i = 0; i < blocks.size(); ++i) {
            h = blocks[i].forward(h);
            if (cfg.film && static_cast<int>(i + 1) == film1_after_block)
                h = film1.forward(h, *film_emb);
        }
        return head_act.forward(head_bn.forward(head_conv.forward(h)));
    }

    Tensor forward_head(const Tensor& feats) override {
        pooled_ = gap.forward(feats);
        return fc.forward(pooled_);
    }

    Tensor backward_head(const Tensor& dlogits) override {
        return gap.backward(fc.backward(dlogits));
    }

    void backward_features(const Tensor& dfeats) override {
        Tensor d = head_conv.backward(head_bn.backward(head_act.backward(dfeats)));
        for (size_t i = blocks.size(); i-- > 0;) {
            if (cfg.film && static_cast<int>(i + 1) == film1_after_block) d = film1.backward(d);
            d = blocks[i].backward(d);
        }
        if (cfg.film) d = film0.backward(d);
        stem.backward(stem_bn.backward(stem_act.backward(d)));
    }

    const Tensor& pooled_embedding() const override { return pooled_; }
    int feature_channels() const override { return 1280; }
    int embed_dim() const override { return 1280; }
    const BackboneConfig& config() const override { return cfg; }
    std::string hook_name() const override { return "head.act"; }

    void collect(std::vector<Param*>& out) override {
        stem.collect(out);
        stem_bn.collect(out);
        for (auto& b : blocks) b.collect(out);
        head_conv.collect(out);
        head_bn.collect(out);
        fc.collect(out);
        if (cfg.film) {
            film0.collect(out);
            film1.collect(out);
        }
    }
    void set_training(bool t) override {
        training = t;
        stem_bn.set_training(t);
        for (auto& b : blocks) b.set_training(t);
        head_bn.set_training(t);
    }
};

std::unique_ptr<Backbone> make_backbone(const BackboneConfig& cfg, uint64_t seed) {
    if (cfg.kind == "compact") return std::make_unique<CompactNet>(cfg, seed);
    if (cfg.kind == "effnet_b0") return std::make_unique<EfficientNetB0>(cfg, seed);
    raise("unknown backbone kind: " + cfg.kind);
    return nullptr;
}

}  // namespace retsyn::nn
