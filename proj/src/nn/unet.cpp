#include "retsyn/nn/unet.hpp"

namespace retsyn::nn {

namespace {

int norm_groups(int channels) {
    int g = std::min(32, channels);
    while (channels % g != 0) --g;
    return g;
}

}  // namespace

ResBlock::ResBlock(const std::string& name, int in_channels, int out_channels, int temb_dim, Rng& rng)
    : in_c(in_channels), out_c(out_channels) {
    gn1 = GroupNorm(name + ".gn1", norm_groups(in_c), in_c);
    gn2 = GroupNorm(name + ".gn2", norm_groups(out_c), out_c);
    conv1 = Conv2d(name + ".conv1", in_c, out_c, 3, 1, 1, 1, rng);
    conv2 = Conv2d(name + ".conv2", out_c, out_c, 3, 1, 1, 1, rng);
    // Zero-init the closing conv so each block starts as its skip path.
    std::fill(conv2.weight.w.begin(), conv2.weight.w.end(), 0.0f);
    emb_proj = Linear(name + ".emb", temb_dim, out_c, rng);
    if (in_c != out_c) {
        skip = Conv2d(name + ".skip", in_c, out_c, 1, 1, 0, 1, rng);
        has_skip = true;
    }
}

Tensor ResBlock::forward(const Tensor& x, const Tensor& cond) {
    Tensor h = conv1.forward(act1.forward(gn1.forward(x)));
    Tensor emb = emb_proj.forward(act_emb.forward(cond));  // [N, out_c]
    int N = h.n(), C = h.c(), HW = h.h() * h.w();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float e = emb.data[static_cast<size_t>(n) * C + c];
            float* p = h.ptr() + (static_cast<size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) p[i] += e;
        }
    Tensor h2 = conv2.forward(act2.forward(gn2.forward(h)));
    Tensor sk = has_skip ? skip.forward(x) : x;
    for (size_t i = 0; i < h2.data.size(); ++i) h2.data[i] += sk.data[i];
    return h2;
}

Tensor ResBlock::backward(const Tensor& dy, Tensor& dcond) {
    Tensor dh = gn2.backward(act2.backward(conv2.backward(dy)));
    // The embedding add broadcasts over space, so its grad is the spatial sum.
    int N = dh.n(), C = dh.c(), HW = dh.h() * dh.w();
    Tensor demb({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* p = dh.ptr() + (static_cast<size_t>(n) * C + c) * HW;
            double s = 0.0;
            for (int i = 0; i < HW; ++i) s += p[i];
            demb.data[static_cast<size_t>(n) * C + c] = static_cast<float>(s);
        }
    Tensor dc = act_emb.backward(emb_proj.backward(demb));
    for (size_t i = 0; i < dcond.data.size(); ++i) dcond.data[i] += dc.data[i];

    Tensor dx = gn1.backward(act1.backward(conv1.backward(dh)));
    if (has_skip) {
        Tensor dsk = skip.backward(dy);
        for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dsk.data[i];
    } else {
        for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dy.data[i];
    }
    return dx;
}

void ResBlock::collect(std::vector<Param*>& out) {
    gn1.collect(out);
    conv1.collect(out);
    emb_proj.collect(out);
    gn2.collect(out);
    conv2.collect(out);
    if (has_skip) skip.collect(out);
}

CondUNet::CondUNet(const UNetConfig& config, uint64_t seed) : cfg(config) {
    Rng rng = Rng::seeded(seed);
    int L = static_cast<int>(cfg.channels.size());
    int temb = cfg.temb();
    int ch0 = cfg.channels[0];

    time_fc1 = Linear("time.fc1", ch0, temb, rng);
    time_fc2 = Linear("time.fc2", temb, temb, rng);
    class_emb = Embedding("class_emb", cfg.num_classes, temb, rng);
    stem = Conv2d("stem", cfg.in_channels, ch0, 3, 1, 1, 1, rng);

    enc_.resize(static_cast<size_t>(L));
    int prev = ch0;
    for (int i = 0; i < L; ++i) {
        Level& lv = enc_[static_cast<size_t>(i)];
        lv.attended = (i == L - 1);  // deepest level only
        for (int j = 0; j < cfg.res_blocks; ++j) {
            std::string nm = "enc" + std::to_string(i) + ".res" + std::to_string(j);
            lv.blocks.emplace_back(nm, j == 0 ? prev : cfg.channels[static_cast<size_t>(i)],
                                   cfg.channels[static_cast<size_t>(i)], temb, rng);
            if (lv.attended)
                lv.attn.emplace_back("enc" + std::to_string(i) + ".attn" + std::to_string(j),
                                     cfg.channels[static_cast<size_t>(i)], cfg.attn_head_channels, rng);
        }
        prev = cfg.channels[static_cast<size_t>(i)];
        if (i < L - 1) {
            lv.down = Conv2d("enc" + std::to_string(i) + ".down", prev, prev, 3, 2, 1, 1, rng);
            lv.has_down = true;
        }
    }

    int chL = cfg.channels.back();
    mid1_ = ResBlock("mid.res1", chL, chL, temb, rng);
    mid_attn_ = SelfAttention2d("mid.attn", chL, cfg.attn_head_channels, rng);
    mid2_ = ResBlock("mid.res2", chL, chL, temb, rng);

    // Skip stack layout: stem, then per level its block outputs and (if any)
    // the downsample output.
    skip_channels_.clear();
    skip_channels_.push_back(ch0);
    for (int i = 0; i < L; ++i) {
        for (int j = 0; j < cfg.res_blocks; ++j)
            skip_channels_.push_back(cfg.channels[static_cast<size_t>(i)]);
        if (i < L - 1) skip_channels_.push_back(cfg.channels[static_cast<size_t>(i)]);
    }

    dec_.resize(static_cast<size_t>(L));
    int cur = chL;
    size_t skip_top = skip_channels_.size();
    for (int i = L - 1; i >= 0; --i) {
        UpLevel& lv = dec_[static_cast<size_t>(i)];
        lv.attended = (i == L - 1);
        for (int j = 0; j <= cfg.res_blocks; ++j) {
            int sc = skip_channels_[--skip_top];
            lv.skip_c.push_back(sc);
            std::string nm = "dec" + std::to_string(i) + ".res" + std::to_string(j);
            lv.blocks.emplace_back(nm, cur + sc, cfg.channels[static_cast<size_t>(i)], temb, rng);
            cur = cfg.channels[static_cast<size_t>(i)];
            if (lv.attended)
                lv.attn.emplace_back("dec" + std::to_string(i) + ".attn" + std::to_string(j),
                                     cur, cfg.attn_head_channels, rng);
        }
        if (i > 0) {
            lv.up_conv = Conv2d("dec" + std::to_string(i) + ".upconv", cur, cur, 3, 1, 1, 1, rng);
            lv.has_up = true;
        }
    }

    out_norm = GroupNorm("out.norm", norm_groups(ch0), ch0);
    out_conv = Conv2d("out.conv", ch0, cfg.in_channels, 3, 1, 1, 1, rng);
    std::fill(out_conv.weight.w.begin(), out_conv.weight.w.end(), 0.0f);
}

ConditionEmbedding CondUNet::condition_embedding(const std::vector<int>& timesteps,
                                                 const std::vector<int>& labels) {
    int N = static_cast<int>(timesteps.size());
    int ch0 = cfg.channels[0];
    Tensor se({N, ch0});
    for (int n = 0; n < N; ++n) {
        auto e = sinusoidal_embedding(timesteps[static_cast<size_t>(n)], ch0);
        std::copy(e.begin(), e.end(), se.ptr() + static_cast<size_t>(n) * ch0);
    }
    sin_emb_ = se;
    ConditionEmbedding ce;
    ce.time_vec = time_fc2.forward(time_act.forward(time_fc1.forward(se)));
    ce.class_vec = class_emb.forward(labels);
    return ce;
}

Tensor CondUNet::forward(const Tensor& x, const std::vector<int>& timesteps,
                         const std::vector<int>& labels) {
    if (x.c() != cfg.in_channels) raise("CondUNet: input channel mismatch");
    labels_ = labels;
    ConditionEmbedding ce = condition_embedding(timesteps, labels);
    cond_ = ce.combined();

    skips_.clear();
    Tensor h = stem.forward(x);
    skips_.push_back(h);
    int L = static_cast<int>(cfg.channels.size());
    for (int i = 0; i < L; ++i) {
        Level& lv = enc_[static_cast<size_t>(i)];
        for (size_t j = 0; j < lv.blocks.size(); ++j) {
            h = lv.blocks[j].forward(h, cond_);
            if (lv.attended) h = lv.attn[j].forward(h);
            skips_.push_back(h);
        }
        if (lv.has_down) {
            h = lv.down.forward(h);
            skips_.push_back(h);
        }
    }

    h = mid1_.forward(h, cond_);
    h = mid_attn_.forward(h);
    h = mid2_.forward(h, cond_);

    for (int i = L - 1; i >= 0; --i) {
        UpLevel& lv = dec_[static_cast<size_t>(i)];
        for (size_t j = 0; j < lv.blocks.size(); ++j) {
            Tensor skip_t = std::move(skips_.back());
            skips_.pop_back();
            h = concat_channels(h, skip_t);
            h = lv.blocks[j].forward(h, cond_);
            if (lv.attended) h = lv.attn[j].forward(h);
        }
        if (lv.has_up) {
            h = lv.up.forward(h);
            h = lv.up_conv.forward(h);
        }
    }

    return out_conv.forward(out_act.forward(out_norm.forward(h)));
}

void CondUNet::backward(const Tensor& deps) {
    int L = static_cast<int>(cfg.channels.size());
    Tensor dcond({cond_.dim(0), cond_.dim(1)});
    Tensor dh = out_norm.backward(out_act.backward(out_conv.backward(deps)));

    // Decoder in reverse forward order. Each block splits its concat gradient
    // into main-path and skip parts; skip grads come out in push order.
    std::vector<Tensor> dskip_by_push;
    for (int i = 0; i < L; ++i) {
        UpLevel& lv = dec_[static_cast<size_t>(i)];
        if (lv.has_up) dh = lv.up.backward(lv.up_conv.backward(dh));
        for (size_t j = lv.blocks.size(); j-- > 0;) {
            if (lv.attended) dh = lv.attn[j].backward(dh);
            Tensor dcat = lv.blocks[j].backward(dh, dcond);
            Tensor dmain, dskip;
            split_channels(dcat, dcat.c() - lv.skip_c[j], &dmain, &dskip);
            dskip_by_push.push_back(std::move(dskip));
            dh = std::move(dmain);
        }
    }

    dh = mid2_.backward(dh, dcond);
    dh = mid_attn_.backward(dh);
    dh = mid1_.backward(dh, dcond);

    // Encoder in reverse, merging the skip gradients at each push point.
    auto pop_skip_grad = [&]() {
        Tensor t = std::move(dskip_by_push.back());
        dskip_by_push.pop_back();
        return t;
    };
    for (int i = L - 1; i >= 0; --i) {
        Level& lv = enc_[static_cast<size_t>(i)];
        if (lv.has_down) {
            Tensor dsk = pop_skip_grad();
            for (size_t k = 0; k < dh.data.size(); ++k) dh.data[k] += dsk.data[k];
            dh = lv.down.backward(dh);
        }
        for (size_t j = lv.blocks.size(); j-- > 0;) {
            Tensor dsk = pop_skip_grad();
            for (size_t k = 0; k < dh.data.size(); ++k) dh.data[k] += dsk.data[k];
            if (lv.attended) dh = lv.attn[j].backward(dh);
            dh = lv.blocks[j].backward(dh, dcond);
        }
    }
    {
        Tensor dsk = pop_skip_grad();
        for (size_t k = 0; k < dh.data.size(); ++k) dh.data[k] += dsk.data[k];
        stem.backward(dh);  // input-image gradient is not needed
    }

    // Condition path: combined = time_vec + class_vec.
    class_emb.backward(dcond);
    time_fc1.backward(time_act.backward(time_fc2.backward(dcond)));
}

void CondUNet::collect(std::vector<Param*>& out) {
    time_fc1.collect(out);
    time_fc2.collect(out);
    class_emb.collect(out);
    stem.collect(out);
    for (auto& lv : enc_) {
        for (auto& b : lv.blocks) b.collect(out);
        for (auto& a : lv.attn) a.collect(out);
        if (lv.has_down) lv.down.collect(out);
    }
    mid1_.collect(out);
    mid_attn_.collect(out);
    mid2_.collect(out);
    for (auto& lv : dec_) {
        for (auto& b : lv.blocks) b.collect(out);
        for (auto& a : lv.attn) a.collect(out);
        if (lv.has_up) lv.up_conv.collect(out);
    }
    out_norm.collect(out);
    out_conv.collect(out);
}

}  // namespace retsyn::nn
