#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "retsyn/nn/backbones.hpp"
#include "retsyn/nn/checkpoint.hpp"
#include "retsyn/nn/layers.hpp"
#include "retsyn/nn/optim.hpp"
#include "retsyn/nn/unet.hpp"
#include "test_util.hpp"

#include <nlohmann/json.hpp>

using namespace retsyn;
using namespace retsyn::nn;
using testutil::close_rel;
using testutil::dot_loss;
using testutil::fill_random;

namespace {

std::vector<float> random_proj(size_t n, Rng& rng) {
    std::vector<float> w(n);
    for (auto& v : w) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return w;
}

// Checks input gradient and all parameter gradients of a single-layer module
// by comparing backward() against central differences of a projected loss.
template <typename Layer>
void check_layer(Layer& layer, Tensor& x, Rng& rng, double tol = 2e-2) {
    Tensor y0 = layer.forward(x);
    auto proj = random_proj(y0.data.size(), rng);

    for (auto* p : layer.params()) p->zero_grad();
    Tensor dy = y0;
    dy.data.assign(proj.begin(), proj.end());
    Tensor dx = layer.backward(dy);

    auto fwd = [&]() { return layer.forward(x); };

    // a spread of input positions
    for (size_t i = 0; i < x.data.size(); i += std::max<size_t>(1, x.data.size() / 13)) {
        double num = testutil::numeric_grad(fwd, proj, &x.data[i]);
        CAPTURE(i);
        CHECK(close_rel(dx.data[i], num, tol));
    }
    // a spread of parameter positions
    for (auto* p : layer.params()) {
        if (!p->trainable) continue;
        for (size_t i = 0; i < p->w.size(); i += std::max<size_t>(1, p->w.size() / 7)) {
            double num = testutil::numeric_grad(fwd, proj, &p->w[i]);
            CAPTURE(p->name);
            CAPTURE(i);
            CHECK(close_rel(p->g[i], num, tol));
        }
    }
}

}  // namespace

TEST_CASE("conv2d gradients") {
    Rng rng = Rng::seeded(11);
    SUBCASE("3x3 stride 1") {
        Conv2d conv("c", 3, 5, 3, 1, 1, 1, rng);
        Tensor x({2, 3, 6, 6});
        fill_random(x, rng);
        check_layer(conv, x, rng);
    }
    SUBCASE("3x3 stride 2") {
        Conv2d conv("c", 4, 6, 3, 2, 1, 1, rng);
        Tensor x({2, 4, 8, 8});
        fill_random(x, rng);
        check_layer(conv, x, rng);
    }
    SUBCASE("1x1") {
        Conv2d conv("c", 6, 4, 1, 1, 0, 1, rng);
        Tensor x({2, 6, 5, 5});
        fill_random(x, rng);
        check_layer(conv, x, rng);
    }
    SUBCASE("depthwise 5x5") {
        Conv2d conv("c", 6, 6, 5, 1, 2, 6, rng);
        Tensor x({2, 6, 7, 7});
        fill_random(x, rng);
        check_layer(conv, x, rng);
    }
    SUBCASE("grouped stride 2") {
        Conv2d conv("c", 4, 8, 3, 2, 1, 2, rng);
        Tensor x({1, 4, 6, 6});
        fill_random(x, rng);
        check_layer(conv, x, rng);
    }
}

TEST_CASE("linear gradients") {
    Rng rng = Rng::seeded(12);
    Linear lin("l", 7, 4, rng);
    Tensor x({3, 7});
    fill_random(x, rng);
    check_layer(lin, x, rng);
}

TEST_CASE("groupnorm gradients") {
    Rng rng = Rng::seeded(13);
    GroupNorm gn("g", 2, 6);
    Tensor x({2, 6, 4, 4});
    fill_random(x, rng);
    // randomize affine params away from identity
    for (auto& v : gn.gamma.w) v = static_cast<float>(rng.uniform(0.5, 1.5));
    for (auto& v : gn.beta.w) v = static_cast<float>(rng.uniform(-0.3, 0.3));
    check_layer(gn, x, rng);
}

TEST_CASE("batchnorm gradients and running stats") {
    Rng rng = Rng::seeded(14);
    BatchNorm2d bn("b", 5);
    Tensor x({3, 5, 4, 4});
    fill_random(x, rng, -2.0, 2.0);
    for (auto& v : bn.gamma.w) v = static_cast<float>(rng.uniform(0.5, 1.5));
    check_layer(bn, x, rng);

    // eval mode uses running stats and is deterministic
    bn.set_training(false);
    Tensor y1 = bn.forward(x);
    Tensor y2 = bn.forward(x);
    CHECK(y1.data == y2.data);
    bool moved = false;
    for (float v : bn.running_mean.w)
        if (v != 0.0f) moved = true;
    CHECK(moved);
}

TEST_CASE("activation gradients") {
    Rng rng = Rng::seeded(15);
    Tensor x({2, 3, 4, 4});
    fill_random(x, rng, -2.0, 2.0);
    SUBCASE("silu") {
        SiLU a;
        check_layer(a, x, rng);
    }
    SUBCASE("sigmoid") {
        Sigmoid a;
        check_layer(a, x, rng);
    }
    SUBCASE("relu") {
        // keep inputs away from the kink
        for (auto& v : x.data)
            if (std::abs(v) < 0.1f) v = 0.5f;
        ReLU a;
        check_layer(a, x, rng);
    }
}

TEST_CASE("pool and upsample gradients") {
    Rng rng = Rng::seeded(16);
    SUBCASE("gap") {
        GlobalAvgPool gap;
        Tensor x({2, 4, 3, 3});
        fill_random(x, rng);
        check_layer(gap, x, rng);
    }
    SUBCASE("upsample") {
        NearestUpsample2x up;
        Tensor x({2, 3, 4, 4});
        fill_random(x, rng);
        check_layer(up, x, rng);
    }
}

TEST_CASE("self-attention gradients") {
    Rng rng = Rng::seeded(17);
    SelfAttention2d attn("a", 8, 4, rng);
    // non-zero proj so gradients flow through the attention path
    for (auto& v : attn.proj.weight.w) v = static_cast<float>(rng.uniform(-0.3, 0.3));
    Tensor x({2, 8, 4, 4});
    fill_random(x, rng);
    check_layer(attn, x, rng, 3e-2);
}

TEST_CASE("film primitive") {
    Rng rng = Rng::seeded(18);
    Tensor x({2, 3, 4, 4}), scale({2, 3}), bias({2, 3});
    fill_random(x, rng);
    fill_random(scale, rng, 0.2, 1.8);
    fill_random(bias, rng, -0.5, 0.5);

    SUBCASE("identity when scale=1 bias=0") {
        scale.fill(1.0f);
        bias.fill(0.0f);
        Tensor y = film_modulate(x, scale, bias);
        CHECK(y.data == x.data);
    }
    SUBCASE("scale=0 gives bias everywhere") {
        scale.fill(0.0f);
        bias.fill(0.25f);
        Tensor y = film_modulate(x, scale, bias);
        for (float v : y.data) CHECK(v == 0.25f);
    }
    SUBCASE("width mismatch raises") {
        Tensor bad({2, 4});
        CHECK_THROWS(film_modulate(x, bad, bad));
    }
    SUBCASE("gradient of output w.r.t. scale equals activations") {
        // loss = sum(y) => dscale[n,c] should equal sum_hw x[n,c,:,:]
        Tensor dy = Tensor::full(x.shape, 1.0f);
        FilmResult r = film_backward(x, scale, dy);
        for (int n = 0; n < 2; ++n)
            for (int c = 0; c < 3; ++c) {
                double expect = 0.0;
                for (int i = 0; i < 16; ++i)
                    expect += x.data[(static_cast<size_t>(n) * 3 + c) * 16 + static_cast<size_t>(i)];
                double got = r.dscale.data[static_cast<size_t>(n) * 3 + c];
                // finite-difference cross-check (linear in scale, so exact)
                float* sv = &scale.data[static_cast<size_t>(n) * 3 + c];
                float saved = *sv;
                double h = 0.05;
                *sv = saved + static_cast<float>(h);
                double lp = 0.0;
                for (float v : film_modulate(x, scale, bias).data) lp += v;
                *sv = saved - static_cast<float>(h);
                double lm = 0.0;
                for (float v : film_modulate(x, scale, bias).data) lm += v;
                *sv = saved;
                double fd = (lp - lm) / (2.0 * h);
                CHECK(std::abs(got - expect) <= 1e-4 * std::max(1.0, std::abs(expect)));
                CHECK(std::abs(got - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
            }
    }
}

TEST_CASE("se block gradients") {
    Rng rng = Rng::seeded(19);
    SEBlock se("se", 6, 3, rng);
    Tensor x({2, 6, 3, 3});
    fill_random(x, rng, -1.0, 1.0);
    check_layer(se, x, rng, 3e-2);
}

TEST_CASE("embedding accumulates gradients by index") {
    Rng rng = Rng::seeded(20);
    Embedding emb("e", 4, 3, rng);
    Tensor y = emb.forward({1, 1, 3});
    Tensor dy({3, 3});
    dy.fill(1.0f);
    emb.backward(dy);
    CHECK(emb.table.g[1 * 3 + 0] == doctest::Approx(2.0f));
    CHECK(emb.table.g[3 * 3 + 0] == doctest::Approx(1.0f));
    CHECK(emb.table.g[0] == doctest::Approx(0.0f));
    CHECK_THROWS(emb.forward({7}));
}

TEST_CASE("losses") {
    Rng rng = Rng::seeded(21);
    SUBCASE("mse gradient") {
        Tensor p({2, 3}), t({2, 3});
        fill_random(p, rng);
        fill_random(t, rng);
        Tensor dp;
        float l = mse_loss(p, t, &dp);
        CHECK(l >= 0.0f);
        for (size_t i = 0; i < p.data.size(); ++i) {
            float saved = p.data[i];
            p.data[i] = saved + 1e-2f;
            float lp = mse_loss(p, t, nullptr);
            p.data[i] = saved - 1e-2f;
            float lm = mse_loss(p, t, nullptr);
            p.data[i] = saved;
            CHECK(close_rel(dp.data[i], (lp - lm) / 2e-2, 2e-2));
        }
    }
    SUBCASE("softmax cross entropy gradient") {
        Tensor logits({3, 4});
        fill_random(logits, rng, -2.0, 2.0);
        std::vector<int> labels = {0, 2, 3};
        Tensor dl;
        softmax_cross_entropy(logits, labels, &dl);
        for (size_t i = 0; i < logits.data.size(); ++i) {
            float saved = logits.data[i];
            logits.data[i] = saved + 1e-2f;
            float lp = softmax_cross_entropy(logits, labels, nullptr);
            logits.data[i] = saved - 1e-2f;
            float lm = softmax_cross_entropy(logits, labels, nullptr);
            logits.data[i] = saved;
            CHECK(close_rel(dl.data[i], (lp - lm) / 2e-2, 2e-2));
        }
    }
}

TEST_CASE("adam minimizes a quadratic") {
    Param p;
    p.name = "p";
    p.resize({4});
    p.w = {3.0f, -2.0f, 1.5f, 0.5f};
    Adam opt({&p}, 0.1f);
    for (int i = 0; i < 400; ++i) {
        opt.zero_grad();
        for (size_t j = 0; j < 4; ++j) p.g[j] = 2.0f * p.w[j];
        opt.step();
    }
    for (float v : p.w) CHECK(std::abs(v) < 1e-3f);
}

TEST_CASE("condition embedding is the exact sum of time and class vectors") {
    UNetConfig cfg;
    cfg.in_channels = 1;
    cfg.channels = {8, 16};
    cfg.res_blocks = 1;
    cfg.attn_head_channels = 8;
    cfg.num_classes = 3;
    CondUNet model(cfg, 42);
    ConditionEmbedding ce = model.condition_embedding({5, 9}, {0, 2});
    Tensor c = ce.combined();
    REQUIRE(ce.time_vec.shape == ce.class_vec.shape);
    for (size_t i = 0; i < c.data.size(); ++i)
        CHECK(c.data[i] == ce.time_vec.data[i] + ce.class_vec.data[i]);
}

TEST_CASE("unet forward shape and parameter gradients") {
    Rng rng = Rng::seeded(23);
    UNetConfig cfg;
    cfg.in_channels = 1;
    cfg.channels = {8, 12};
    cfg.res_blocks = 1;
    cfg.attn_head_channels = 4;
    cfg.num_classes = 2;
    CondUNet model(cfg, 7);

    Tensor x({2, 1, 16, 16});
    fill_random(x, rng);
    std::vector<int> ts = {3, 47};
    std::vector<int> labels = {0, 1};

    Tensor y = model.forward(x, ts, labels);
    REQUIRE(y.shape == x.shape);

    auto proj = random_proj(y.data.size(), rng);
    for (auto* p : model.params()) p->zero_grad();
    Tensor dy = y;
    dy.data.assign(proj.begin(), proj.end());
    model.backward(dy);

    auto fwd = [&]() { return model.forward(x, ts, labels); };
    // Spot-check a handful of scalars in every parameter tensor.
    Rng pick = Rng::seeded(99);
    int checked = 0;
    for (auto* p : model.params()) {
        size_t i = static_cast<size_t>(pick.uniform_int(p->w.size()));
        double num = testutil::numeric_grad(fwd, proj, &p->w[i], 2e-2);
        CAPTURE(p->name);
        CHECK(close_rel(p->g[i], num, 4e-2));
        ++checked;
    }
    CHECK(checked > 30);
}

TEST_CASE("backbones forward/backward and hooks") {
    Rng rng = Rng::seeded(24);
    SUBCASE("compact") {
        BackboneConfig cfg;
        cfg.kind = "compact";
        cfg.num_outputs = 2;
        cfg.compact_widths = {8, 12, 16};
        auto net = make_backbone(cfg, 5);
        Tensor x({2, 3, 16, 16});
        fill_random(x, rng, 0.0, 1.0);
        Tensor logits = net->forward(x);
        REQUIRE(logits.shape == std::vector<int>({2, 2}));
        CHECK(net->pooled_embedding().shape == std::vector<int>({2, 16}));

        auto proj = random_proj(logits.data.size(), rng);
        for (auto* p : net->params()) p->zero_grad();
        Tensor dl = logits;
        dl.data.assign(proj.begin(), proj.end());
        net->backward(dl);
        auto fwd = [&]() { return net->forward(x); };
        Rng pick = Rng::seeded(31);
        for (auto* p : net->params()) {
            if (!p->trainable) continue;
            size_t i = static_cast<size_t>(pick.uniform_int(p->w.size()));
            double num = testutil::numeric_grad(fwd, proj, &p->w[i]);
            CAPTURE(p->name);
            CHECK(close_rel(p->g[i], num, 4e-2));
        }
    }
    SUBCASE("effnet_b0") {
        BackboneConfig cfg;
        cfg.kind = "effnet_b0";
        cfg.num_outputs = 1;
        auto net = make_backbone(cfg, 6);
        Tensor x({2, 3, 64, 64});
        fill_random(x, rng, 0.0, 1.0);
        Tensor logits = net->forward(x);
        REQUIRE(logits.shape == std::vector<int>({2, 1}));
        CHECK(net->feature_channels() == 1280);

        // backward runs and produces finite grads
        for (auto* p : net->params()) p->zero_grad();
        Tensor dl = logits;
        dl.fill(1.0f);
        net->backward(dl);
        double gsum = 0.0;
        for (auto* p : net->params())
            for (float g : p->g) gsum += std::abs(g);
        CHECK(gsum > 0.0);
        CHECK(std::isfinite(gsum));

        net->set_training(false);
        Tensor e1 = net->forward(x);
        Tensor e2 = net->forward(x);
        CHECK(e1.data == e2.data);
    }
    SUBCASE("film variant") {
        BackboneConfig cfg;
        cfg.kind = "compact";
        cfg.num_outputs = 1;
        cfg.compact_widths = {8, 12, 16};
        cfg.film = true;
        cfg.film_emb_dim = 6;
        auto net = make_backbone(cfg, 8);
        Tensor x({2, 3, 16, 16});
        fill_random(x, rng, 0.0, 1.0);
        Tensor emb({2, 6});
        fill_random(emb, rng);
        Tensor logits = net->forward(x, &emb);
        REQUIRE(logits.shape == std::vector<int>({2, 1}));
        Tensor dl = logits;
        dl.fill(1.0f);
        net->backward(dl);  // must not throw
        CHECK_THROWS(net->forward(x));  // missing embedding
    }
}

TEST_CASE("checkpoint roundtrip") {
    Rng rng = Rng::seeded(25);
    BackboneConfig cfg;
    cfg.kind = "compact";
    cfg.num_outputs = 3;
    cfg.compact_widths = {8, 12};
    auto net = make_backbone(cfg, 77);
    auto params = net->params();
    std::vector<std::vector<float>> saved;
    for (auto* p : params) saved.push_back(p->w);

    auto tmp = std::filesystem::temp_directory_path() / "retsyn_ckpt_test.ckpt";
    nlohmann::json header = {{"model", "test"}, {"note", 1}};
    save_checkpoint(tmp.string(), header, params);

    auto net2 = make_backbone(cfg, 123);  // different init
    auto params2 = net2->params();
    nlohmann::json h = load_checkpoint(tmp.string(), params2);
    CHECK(h.at("model") == "test");
    for (size_t i = 0; i < params2.size(); ++i) CHECK(params2[i]->w == saved[i]);
    std::filesystem::remove(tmp);
}
