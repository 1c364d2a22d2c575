// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <vector>

#include "grad_check.hpp"
#include "vaflow/data/dsp.hpp"
#include "vaflow/enc/encoder.hpp"

using namespace vaflow;
using namespace vaflow::enc;
using vaflow::testing::check_gradients;
using vaflow::testing::random_mat;

namespace {

EncoderConfig tiny_cfg(int dim = 16, int depth = 1) {
    EncoderConfig cfg;
    cfg.embed_dim = dim;
    cfg.depth = depth;
    cfg.heads = 4;
    cfg.mlp_ratio = 2.0;
    return cfg;
}

data::FrameSequence random_video(int frames, int h, int w, uint64_t seed) {
    data::FrameSequence v;
    v.frames = frames;
    v.height = h;
    v.width = w;
    v.channels = 1;
    v.fps = 16.0f;
    v.data.resize(static_cast<size_t>(frames) * h * w);
    Rng rng(seed);
    for (float& x : v.data) x = static_cast<float>(rng.uniform());
    return v;
}

nn::ParamStore<float> audio_tower(const EncoderConfig& cfg, int n_pos, uint64_t seed) {
    nn::ParamStore<float> store;
    Rng rng(seed);
    add_tower_params(store, rng, cfg, cfg.audio_patch_freq * cfg.audio_patch_time, n_pos, "aud");
    return store;
}

nn::ParamStore<float> video_tower(const EncoderConfig& cfg, int per_frame, uint64_t seed) {
    nn::ParamStore<float> store;
    Rng rng(seed);
    add_tower_params(store, rng, cfg, cfg.video_patch * cfg.video_patch, per_frame, "vid");
    return store;
}

}  // namespace

TEST_CASE("audio patchify: token count, ordering and times") {
    EncoderConfig cfg = tiny_cfg();
    data::SpectrogramTensor spec;
    spec.hop_seconds = 0.025f;
    spec.values = random_mat(128, 128, 7).cast<float>();

    // Independent shape arithmetic: patches per axis from first principles.
    int expect_groups = 128 / cfg.audio_patch_freq;
    int expect_steps = 128 / cfg.audio_patch_time;
    REQUIRE(expect_groups * expect_steps == 256);

    auto store = audio_tower(cfg, 256, 1);
    TokenSequence tok = patchify_audio(spec, cfg, store);
    CHECK(tok.length() == 256);
    CHECK(tok.tokens.cols() == cfg.embed_dim);
    CHECK(tok.tokens_per_step == expect_groups);
    CHECK(tok.time_steps() == expect_steps);
    CHECK(tok.modality == Modality::audio);

    for (int i = 1; i < tok.length(); ++i)
        CHECK(tok.temporal_index[i] >= tok.temporal_index[i - 1]);
    // Patch columns are 4 hops wide, so consecutive step times sit 0.1 s apart
    // and the first midpoint is 1.5 hops in.
    CHECK(tok.temporal_index[0] == doctest::Approx(1.5 * 0.025));
    CHECK(tok.temporal_index[expect_groups] - tok.temporal_index[0] == doctest::Approx(0.1));

    TokenSequence shifted = patchify_audio(spec, cfg, store, 0.375f);
    CHECK(shifted.temporal_index[0] == doctest::Approx(0.375 + 1.5 * 0.025));

    data::SpectrogramTensor bad;
    bad.values = MatF::Zero(120, 128);
    CHECK_THROWS_AS(patchify_audio(bad, cfg, store), std::invalid_argument);
}

TEST_CASE("audio patch rows match direct spectrogram indexing") {
    EncoderConfig cfg = tiny_cfg();
    MatF spec = random_mat(32, 8, 9).cast<float>();
    cfg.audio_patch_freq = 16;
    cfg.audio_patch_time = 4;
    MatF rows = audio_patch_rows(spec, cfg);
    REQUIRE(rows.rows() == 2 * 2);
    REQUIRE(rows.cols() == 64);

    // Row s*2+f holds freq block f of time block s, mel-row major.
    for (int s = 0; s < 2; ++s)
        for (int f = 0; f < 2; ++f)
            for (int fr = 0; fr < 16; ++fr)
                for (int tc = 0; tc < 4; ++tc)
                    CHECK(rows(s * 2 + f, fr * 4 + tc) == spec(f * 16 + fr, s * 4 + tc));
}

TEST_CASE("video patchify: one token per frame, times on the frame grid") {
    EncoderConfig cfg = tiny_cfg();
    auto video = random_video(32, 64, 64, 11);
    auto store = video_tower(cfg, 16, 2);

    MatF rows = video_patch_rows(video, cfg);
    CHECK(rows.rows() == 32 * 16);  // 16 patches per 64x64 frame
    CHECK(rows.cols() == 256);

    TokenSequence tok = patchify_video(video, cfg, store);
    CHECK(tok.length() == 32);
    CHECK(tok.tokens.cols() == cfg.embed_dim);
    CHECK(tok.tokens_per_step == 1);
    for (int i = 0; i < 32; ++i)
        CHECK(tok.temporal_index[i] == doctest::Approx(i / 16.0));

    auto odd = random_video(2, 48, 40, 12);
    CHECK_THROWS_AS(patchify_video(odd, cfg, store), std::invalid_argument);
}

TEST_CASE("video patchify: zero frames reduce to the positional-code pool") {
    EncoderConfig cfg = tiny_cfg();
    data::FrameSequence video = random_video(4, 32, 32, 21);
    std::fill(video.data.begin(), video.data.end(), 0.0f);
    auto store = video_tower(cfg, 4, 22);

    TokenSequence tok = patchify_video(video, cfg, store);
    MatF pos_pool = store.get("vid/pos").colwise().mean();
    for (int t = 0; t < 4; ++t)
        CHECK((tok.tokens.row(t) - pos_pool).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("video patchify: swapping frames swaps exactly those tokens") {
    EncoderConfig cfg = tiny_cfg();
    auto video = random_video(12, 32, 32, 31);
    auto store = video_tower(cfg, 4, 32);

    data::FrameSequence swapped = video;
    for (size_t i = 0; i < video.frame_size(); ++i) {
        std::swap(swapped.data[3 * video.frame_size() + i],
                  swapped.data[7 * video.frame_size() + i]);
    }

    TokenSequence a = patchify_video(video, cfg, store);
    TokenSequence b = patchify_video(swapped, cfg, store);
    CHECK((a.tokens.row(3) - b.tokens.row(7)).cwiseAbs().maxCoeff() == 0.0f);
    CHECK((a.tokens.row(7) - b.tokens.row(3)).cwiseAbs().maxCoeff() == 0.0f);
    for (int t = 0; t < 12; ++t) {
        if (t == 3 || t == 7) continue;
        CHECK((a.tokens.row(t) - b.tokens.row(t)).cwiseAbs().maxCoeff() == 0.0f);
    }
}

TEST_CASE("audio patchify: silence varies tokens only through positional codes") {
    EncoderConfig cfg = tiny_cfg();
    data::SpectrogramTensor spec;
    spec.values = MatF::Constant(128, 128, 0.0f);
    auto store = audio_tower(cfg, 256, 41);

    TokenSequence tok = patchify_audio(spec, cfg, store);
    const MatF& pos = store.get("aud/pos");
    // All patch contents are identical, so token differences inside one time
    // step must reduce to positional-code differences.
    for (int s : {0, 13, 31})
        for (int f = 1; f < 8; ++f) {
            int i = s * 8, j = s * 8 + f;
            MatF got = tok.tokens.row(i) - tok.tokens.row(j);
            MatF want = pos.row(i) - pos.row(j);
            CHECK((got - want).cwiseAbs().maxCoeff() < 1e-6f);
        }
}

TEST_CASE("encode preserves shape, honors depth zero and rejects NaN") {
    EncoderConfig cfg = tiny_cfg(16, 2);
    auto store = audio_tower(cfg, 64, 51);

    for (int L : {1, 5, 32}) {
        TokenSequence tok;
        tok.tokens = random_mat(L, 16, 60 + L).cast<float>();
        tok.temporal_index.assign(L, 0.0f);
        TokenSequence out = encode(tok, cfg, store, "aud");
        CHECK(out.tokens.rows() == L);
        CHECK(out.tokens.cols() == 16);
        CHECK(out.tokens.allFinite());

        TokenSequence again = encode(tok, cfg, store, "aud");
        CHECK((out.tokens - again.tokens).cwiseAbs().maxCoeff() == 0.0f);

        EncoderConfig id_cfg = cfg;
        id_cfg.depth = 0;
        TokenSequence idem = encode(tok, id_cfg, store, "aud");
        CHECK((idem.tokens - tok.tokens).cwiseAbs().maxCoeff() == 0.0f);
    }

    store.get("aud/enc/blk0/attn_wq")(0, 0) = std::nanf("");
    TokenSequence tok;
    tok.tokens = random_mat(4, 16, 70).cast<float>();
    tok.temporal_index.assign(4, 0.0f);
    CHECK_THROWS_AS(encode(tok, cfg, store, "aud"), std::invalid_argument);
}

TEST_CASE("segment pooling: identity, global mean, ragged padding, times") {
    TokenSequence tok;
    tok.tokens = random_mat(5, 3, 80).cast<float>();
    tok.temporal_index = {0.0f, 0.1f, 0.2f, 0.3f, 0.4f};

    SegmentFeatures id = pool_segments(tok, 5);
    CHECK((id.segments - tok.tokens).cwiseAbs().maxCoeff() == 0.0f);
    for (int s = 0; s < 5; ++s) CHECK(id.segment_times[s] == doctest::Approx(0.1 * s));

    SegmentFeatures global = pool_segments(tok, 1);
    MatF mean = tok.tokens.colwise().mean();
    CHECK((global.segments - mean).cwiseAbs().maxCoeff() < 1e-6f);
    CHECK(global.segment_times[0] == doctest::Approx(0.2));

    // 5 tokens in 2 segments: group size 3, the tail padded with token 4.
    SegmentFeatures ragged = pool_segments(tok, 2);
    MatF first = (tok.tokens.row(0) + tok.tokens.row(1) + tok.tokens.row(2)) / 3.0f;
    MatF second = (tok.tokens.row(3) + tok.tokens.row(4) + tok.tokens.row(4)) / 3.0f;
    CHECK((ragged.segments.row(0) - first).cwiseAbs().maxCoeff() < 1e-6f);
    CHECK((ragged.segments.row(1) - second).cwiseAbs().maxCoeff() < 1e-6f);
    CHECK(ragged.segment_times[0] == doctest::Approx(0.1));
    CHECK(ragged.segment_times[1] == doctest::Approx(0.35));

    TokenSequence constant = tok;
    constant.tokens = MatF::Constant(5, 3, 1.25f);
    SegmentFeatures flat = pool_segments(constant, 2);
    CHECK((flat.segments.array() - 1.25f).cwiseAbs().maxCoeff() < 1e-6f);

    CHECK_THROWS_AS(pool_segments(tok, 0), std::invalid_argument);
    CHECK_THROWS_AS(pool_segments(tok, -2), std::invalid_argument);
    CHECK_THROWS_AS(pool_segments(tok, 6), std::invalid_argument);
    TokenSequence audio_like = tok;
    audio_like.tokens_per_step = 5;
    CHECK_THROWS_AS(pool_segments(audio_like, 1), std::invalid_argument);
}

TEST_CASE("segment pooling is linear in the tokens") {
    TokenSequence x, y;
    x.tokens = random_mat(7, 4, 90).cast<float>();
    y.tokens = random_mat(7, 4, 91).cast<float>();
    x.temporal_index.assign(7, 0.0f);
    y.temporal_index.assign(7, 0.0f);

    TokenSequence mix = x;
    mix.tokens = 0.3f * x.tokens + 1.7f * y.tokens;
    SegmentFeatures lhs = pool_segments(mix, 3);
    MatF rhs = 0.3f * pool_segments(x, 3).segments + 1.7f * pool_segments(y, 3).segments;
    CHECK((lhs.segments - rhs).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("token mask sampling: size, range, determinism, coverage") {
    auto mask = sample_token_mask(256, 192, 5);
    CHECK(mask.size() == 192);
    for (size_t i = 1; i < mask.size(); ++i) {
        CHECK(mask[i] > mask[i - 1]);  // sorted and distinct
        CHECK(mask[i] < 256);
    }
    CHECK(mask.front() >= 0);

    CHECK(sample_token_mask(256, 192, 5) == mask);
    CHECK(sample_token_mask(256, 192, 6) != mask);

    // Every index should be hit somewhere across many draws.
    std::vector<int> hits(64, 0);
    for (uint64_t s = 0; s < 200; ++s)
        for (int i : sample_token_mask(64, 32, s)) ++hits[i];
    for (int h : hits) CHECK(h > 0);
}

TEST_CASE("masked pretraining: ratio validation and loss determinism") {
    EncoderConfig cfg = tiny_cfg();
    cfg.audio_patch_freq = 16;
    cfg.audio_patch_time = 4;
    MatF spec = random_mat(32, 16, 100).cast<float>();
    MatF rows = audio_patch_rows(spec, cfg);  // 8 tokens of dim 64
    nn::ParamStore<float> store;
    Rng rng(101);
    add_tower_params(store, rng, cfg, 64, 8, "aud");
    add_mae_params(store, rng, cfg, 64, 8, "aud/mae");

    for (float bad : {0.0f, 1.0f, -0.1f, 1.2f})
        CHECK_THROWS_AS(
            pretrain_unimodal(rows, rows, 1, Modality::audio, bad, cfg, store, 1, nullptr),
            std::invalid_argument);

    float a = pretrain_unimodal(rows, rows, 1, Modality::audio, 0.5f, cfg, store, 7, nullptr);
    float b = pretrain_unimodal(rows, rows, 1, Modality::audio, 0.5f, cfg, store, 7, nullptr);
    CHECK(a >= 0.0f);
    CHECK(std::isfinite(a));
    CHECK(a == b);
    float c = pretrain_unimodal(rows, rows, 1, Modality::audio, 0.5f, cfg, store, 8, nullptr);
    CHECK(a != c);  // different masks select different reconstruction targets
}

TEST_CASE("masked pretraining loss ignores targets at unmasked slots") {
    EncoderConfig cfg = tiny_cfg();
    MatF rows = random_mat(2 * 6, 10, 110).cast<float>();
    MatF targets = random_mat(2 * 6, 10, 111).cast<float>();
    nn::ParamStore<float> store_f;
    Rng rng(112);
    add_tower_params(store_f, rng, cfg, 10, 6, "aud");
    add_mae_params(store_f, rng, cfg, 10, 6, "aud/mae");
    auto store = store_f.cast<double>();

    std::vector<std::vector<int>> masks = {{1, 4}, {0, 5}};
    auto eval = [&](const MatD& tgt) {
        nn::Tape<double> tape(store);
        nn::Params<double> P{&tape, true};
        auto tokens = embed_audio_graph(P, MatD(rows.cast<double>()), 2);
        return mae_loss_graph(P, tokens, tgt, masks, 6, cfg, "aud", "aud/mae")->value(0, 0);
    };

    MatD tgt = targets.cast<double>();
    double base = eval(tgt);
    // Scribble over every unmasked row; the loss must not move a bit.
    for (int b = 0; b < 2; ++b)
        for (int i : {2, 3}) tgt.row(b * 6 + i).setConstant(1e6);
    tgt.row(0 * 6 + 0).setConstant(-1e6);
    tgt.row(1 * 6 + 1).setConstant(-1e6);
    CHECK(eval(tgt) == base);
    // Touching a masked row must move it.
    tgt.row(0 * 6 + 1).setConstant(2.0);
    CHECK(eval(tgt) != base);
}

TEST_CASE("masked pretraining count follows round(ratio * tokens)") {
    CHECK(masked_token_count(0.75f, 256) == 192);
    CHECK(masked_token_count(0.8f, 32) == 26);
    CHECK(masked_token_count(0.5f, 7) == 4);  // rounds half up
}

TEST_CASE("gradients: masked pretraining graph end to end") {
    EncoderConfig cfg = tiny_cfg(16, 2);
    nn::ParamStore<double> store;
    Rng rng(120);
    add_tower_params(store, rng, cfg, 6, 4, "aud");
    add_mae_params(store, rng, cfg, 6, 4, "aud/mae");
    MatD rows = random_mat(2 * 4, 6, 121);
    MatD targets = random_mat(2 * 4, 6, 122);
    std::vector<std::vector<int>> masks = {{1, 3}, {0, 2}};

    check_gradients(store, [&](nn::Tape<double>& t) {
        nn::Params<double> P{&t, true};
        auto tokens = embed_audio_graph(P, rows, 2);
        return mae_loss_graph(P, tokens, targets, masks, 4, cfg, "aud", "aud/mae");
    });
}

TEST_CASE("masked pretraining overfits a fixed batch monotonically") {
    EncoderConfig cfg = tiny_cfg(32, 1);
    // Constant spectrogram content, two clips of 8 tokens each.
    MatF spec = MatF::Constant(32, 16, 0.7f);
    cfg.audio_patch_freq = 16;
    cfg.audio_patch_time = 4;
    MatF one = audio_patch_rows(spec, cfg);
    MatF rows(2 * one.rows(), one.cols());
    rows << one, one;

    nn::ParamStore<float> store;
    Rng rng(130);
    add_tower_params(store, rng, cfg, 64, 8, "aud");
    add_mae_params(store, rng, cfg, 64, 8, "aud/mae");

    nn::Adam<float> opt(1e-3);
    std::vector<float> losses;
    for (int step = 0; step < 51; ++step)
        losses.push_back(
            pretrain_unimodal(rows, rows, 2, Modality::audio, 0.5f, cfg, store, 42, &opt));
    for (size_t k = 1; k < losses.size(); ++k) CHECK(losses[k] < losses[k - 1]);
    CHECK(losses.back() < losses.front());
}

TEST_CASE("masked pretraining drives the video tower too") {
    EncoderConfig cfg = tiny_cfg(16, 1);
    auto video = random_video(6, 32, 32, 140);
    MatF rows = video_patch_rows(video, cfg);
    MatF targets = video_frame_targets(video, cfg);
    REQUIRE(targets.rows() == 6);
    REQUIRE(targets.cols() == 4 * 256);

    // Targets are the frame's own pixels, regrouped patch by patch.
    CHECK(targets(2, 0) == video.at(2, 0, 0, 0));
    CHECK(targets(2, 256) == video.at(2, 0, 16, 0));   // second patch starts
    CHECK(targets(2, 512) == video.at(2, 16, 0, 0));   // third patch: next row band
    CHECK(targets(3, 5) == video.at(3, 0, 5, 0));

    nn::ParamStore<float> store;
    Rng rng(141);
    add_tower_params(store, rng, cfg, 256, 4, "vid");
    add_temporal_table(store, rng, 6, cfg.embed_dim, "vid");
    add_mae_params(store, rng, cfg, 4 * 256, 6, "vid/mae");

    nn::Adam<float> opt(1e-3);
    float first = pretrain_unimodal(rows, targets, 1, Modality::video, 0.5f, cfg, store, 9, &opt);
    float last = first;
    for (int step = 0; step < 30; ++step)
        last = pretrain_unimodal(rows, targets, 1, Modality::video, 0.5f, cfg, store, 9, &opt);
    CHECK(last < first);
    CHECK(std::isfinite(last));
}

TEST_CASE("batched audio embedding stacks per-clip embeddings") {
    EncoderConfig cfg = tiny_cfg();
    nn::ParamStore<float> store;
    Rng rng(150);
    add_tower_params(store, rng, cfg, 12, 5, "aud");
    MatF clip_a = random_mat(5, 12, 151).cast<float>();
    MatF clip_b = random_mat(5, 12, 152).cast<float>();
    MatF both(10, 12);
    both << clip_a, clip_b;

    auto run = [&](const MatF& rows, int batch) {
        nn::Tape<float> tape(store);
        nn::Params<float> P{&tape, false};
        return embed_audio_graph(P, rows, batch)->value;
    };
    MatF stacked = run(both, 2);
    CHECK((stacked.topRows(5) - run(clip_a, 1)).cwiseAbs().maxCoeff() < 1e-6f);
    CHECK((stacked.bottomRows(5) - run(clip_b, 1)).cwiseAbs().maxCoeff() < 1e-6f);
}
