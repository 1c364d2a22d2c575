// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "grad_check.hpp"
#include "vaflow/flow/flow.hpp"

using namespace vaflow;
using namespace vaflow::flow;
using vaflow::testing::check_gradients;
using vaflow::testing::random_mat;
namespace fs = std::filesystem;

namespace {

// Small geometry: 32 audio tokens (8 freq groups x 4 steps) at dim 16. The
// 4x4 patches keep patch_dim at the embed dim, so the patch projection can
// carry the full token content instead of acting as a rank bottleneck.
FlowConfig tiny_flow() {
    FlowConfig cfg;
    cfg.enc.embed_dim = 16;
    cfg.enc.depth = 1;
    cfg.enc.heads = 4;
    cfg.enc.mlp_ratio = 2.0;
    cfg.enc.audio_patch_freq = 4;
    cfg.enc.audio_patch_time = 4;
    cfg.spec.mel_bands = 32;
    cfg.spec.time_frames = 16;
    cfg.segments = 2;
    return cfg;
}

enc::SegmentFeatures tiny_cond(const FlowConfig& cfg, uint64_t seed) {
    enc::SegmentFeatures cond;
    cond.segments = random_mat(cfg.segments, cfg.enc.embed_dim, seed).cast<float>();
    cond.segment_times.resize(cfg.segments);
    for (int i = 0; i < cfg.segments; ++i)
        cond.segment_times[i] = 0.5f + static_cast<float>(i);
    return cond;
}

}  // namespace

TEST_CASE("linear path: endpoints, midpoint and argument checks") {
    MatF x0 = random_mat(4, 5, 10).cast<float>();
    MatF x1 = random_mat(4, 5, 11).cast<float>();
    CHECK((interpolate_path(x0, x1, 0.0f) - x0).cwiseAbs().maxCoeff() == 0.0f);
    CHECK((interpolate_path(x0, x1, 1.0f) - x1).cwiseAbs().maxCoeff() == 0.0f);

    MatF zero = MatF::Zero(3, 3);
    MatF two = MatF::Constant(3, 3, 2.0f);
    CHECK((interpolate_path(zero, two, 0.5f).array() == 1.0f).all());

    CHECK_THROWS_AS(interpolate_path(x0, x1, -0.01f), std::invalid_argument);
    CHECK_THROWS_AS(interpolate_path(x0, x1, 1.01f), std::invalid_argument);
    CHECK_THROWS_AS(interpolate_path(x0, x1, std::nanf("")), std::invalid_argument);
    MatF wrong(2, 5);
    CHECK_THROWS_AS(interpolate_path(x0, wrong, 0.5f), std::invalid_argument);
}

TEST_CASE("constant velocity equals the time derivative of the path") {
    MatF x0 = random_mat(4, 5, 20).cast<float>();
    MatF x1 = random_mat(4, 5, 21).cast<float>();
    CHECK((target_velocity(x0, x0).array() == 0.0f).all());
    CHECK((target_velocity(MatF::Zero(4, 5), x1) - x1).cwiseAbs().maxCoeff() == 0.0f);

    // Central difference of the path in t, computed in double so the finite
    // difference itself does not drown in float rounding.
    MatD a = x0.cast<double>(), b = x1.cast<double>();
    MatD v = (b - a);
    double h = 1e-4;
    for (double t : {0.2, 0.5, 0.9}) {
        MatD hi = (1.0 - (t + h)) * a + (t + h) * b;
        MatD lo = (1.0 - (t - h)) * a + (t - h) * b;
        CHECK(((hi - lo) / (2 * h) - v).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("condition schedule: distance bias, nearest segment, tie break") {
    std::vector<float> toks = {0.1f, 0.5f, 1.0f};
    std::vector<float> segs = {0.0f, 1.0f};

    MatF zero = condition_schedule(toks, segs, 0.0f);
    CHECK((zero.array() == 0.0f).all());

    MatF bias = condition_schedule(toks, segs, 4.0f);
    CHECK(bias(0, 0) == doctest::Approx(-0.4).epsilon(1e-6));
    CHECK(bias(0, 1) == doctest::Approx(-3.6).epsilon(1e-6));
    CHECK(bias(2, 1) == doctest::Approx(0.0).epsilon(1e-6));

    std::vector<int> nearest = nearest_segments(bias);
    CHECK(nearest == std::vector<int>{0, 0, 1});
    // Token at 0.5 sits exactly between the segments: tie goes to index 0.
    CHECK(bias(1, 0) == bias(1, 1));

    CHECK_THROWS_AS(condition_schedule(toks, {1.0f, 0.0f}, 4.0f), std::invalid_argument);
    CHECK_THROWS_AS(condition_schedule(toks, {}, 4.0f), std::invalid_argument);
    CHECK_THROWS_AS(condition_schedule({}, segs, 4.0f), std::invalid_argument);
}

TEST_CASE("token times sit at patch midpoints on the clip clock") {
    FlowConfig cfg;  // full-size defaults: 8 freq groups x 32 steps
    std::vector<float> times = flow_token_times(cfg);
    REQUIRE(times.size() == 256);
    // 4 s at 8 kHz analyzes to 159 raw frames; the center crop starts at
    // frame 15, so the first patch midpoint is (15 + 1.5) * 25 ms.
    for (int f = 0; f < 8; ++f) CHECK(times[f] == doctest::Approx(0.4125).epsilon(1e-6));
    CHECK(times[8] == doctest::Approx(0.5125).epsilon(1e-6));
    CHECK(times[255] == doctest::Approx(0.4125 + 31 * 0.1).epsilon(1e-6));
}

TEST_CASE("sinusoidal time embedding: unit pairs and distinctness") {
    MatD e0 = sinusoidal_embed(0.0, 16);
    for (int i = 0; i < 8; ++i) {
        CHECK(e0(0, i) == 0.0);
        CHECK(e0(0, 8 + i) == 1.0);
    }
    MatD e = sinusoidal_embed(0.37, 16);
    for (int i = 0; i < 8; ++i)
        CHECK(e(0, i) * e(0, i) + e(0, 8 + i) * e(0, 8 + i) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((e - sinusoidal_embed(0.38, 16)).cwiseAbs().maxCoeff() > 1e-4);
    CHECK_THROWS_AS(sinusoidal_embed(0.5, 1), std::invalid_argument);
}

TEST_CASE("audio patch rows invert exactly through unpatchify") {
    FlowConfig cfg = tiny_flow();
    MatF spec = random_mat(32, 16, 30).cast<float>();
    MatF rows = enc::audio_patch_rows(spec, cfg.enc);
    CHECK((unpatchify_audio(rows, cfg.enc, cfg.spec) - spec).cwiseAbs().maxCoeff() == 0.0f);
    MatF wrong(7, rows.cols());
    CHECK_THROWS_AS(unpatchify_audio(wrong, cfg.enc, cfg.spec), std::invalid_argument);
}

TEST_CASE("velocity field: shape, determinism, zero head, input checks") {
    FlowConfig cfg = tiny_flow();
    nn::ParamStore<float> params;
    init_flow_params(params, cfg, 40);
    enc::SegmentFeatures cond = tiny_cond(cfg, 41);
    MatF x = random_mat(32, 16, 42).cast<float>();

    // The output head starts at zero, so the freshly initialized field is 0.
    CHECK((velocity_field(x, 0.3f, cond, cfg, params).array() == 0.0f).all());

    Rng rng(43);
    for (auto& [name, m] : params.tensors)
        if (name.rfind("flow/head", 0) == 0)
            for (Eigen::Index i = 0; i < m.size(); ++i)
                m.data()[i] = static_cast<float>(0.05 * rng.normal());

    MatF v1 = velocity_field(x, 0.3f, cond, cfg, params);
    CHECK(v1.rows() == 32);
    CHECK(v1.cols() == 16);
    CHECK(v1.allFinite());
    MatF v2 = velocity_field(x, 0.3f, cond, cfg, params);
    CHECK((v1 - v2).cwiseAbs().maxCoeff() == 0.0f);
    // Time enters every token, so a different t moves the output.
    CHECK((v1 - velocity_field(x, 0.7f, cond, cfg, params)).cwiseAbs().maxCoeff() > 0.0f);

    MatF poisoned = x;
    poisoned(3, 3) = std::nanf("");
    CHECK_THROWS_AS(velocity_field(poisoned, 0.3f, cond, cfg, params), std::invalid_argument);
    CHECK_THROWS_AS(velocity_field(x, -0.1f, cond, cfg, params), std::invalid_argument);
    CHECK_THROWS_AS(velocity_field(x, 1.1f, cond, cfg, params), std::invalid_argument);

    enc::SegmentFeatures empty;
    empty.segments.resize(0, cfg.enc.embed_dim);
    CHECK_THROWS_AS(velocity_field(x, 0.3f, empty, cfg, params), std::invalid_argument);
    enc::SegmentFeatures narrow = cond;
    narrow.segments.conservativeResize(cfg.segments, 8);
    CHECK_THROWS_AS(velocity_field(x, 0.3f, narrow, cfg, params), std::invalid_argument);

    params.get("flow/pos")(0, 0) = std::nanf("");
    CHECK_THROWS_AS(velocity_field(x, 0.3f, cond, cfg, params), std::invalid_argument);
}

TEST_CASE("gradients: velocity regression end to end") {
    FlowConfig cfg = tiny_flow();
    nn::ParamStore<float> fparams;
    init_flow_params(fparams, cfg, 50);
    // The zero head would hide upstream gradients; give it small values.
    Rng rng(51);
    for (auto& [name, m] : fparams.tensors)
        if (name.rfind("flow/head", 0) == 0)
            for (Eigen::Index i = 0; i < m.size(); ++i)
                m.data()[i] = static_cast<float>(0.05 * rng.normal());
    auto store = fparams.cast<double>();

    FlowDims d = flow_dims(cfg.enc, cfg.spec);
    int clips = 2;
    MatD x_t = random_mat(clips * d.tokens, d.patch_dim, 52);
    MatD cond = random_mat(clips * cfg.segments, cfg.enc.embed_dim, 53);
    MatD target = random_mat(clips * d.tokens, d.patch_dim, 54);
    MatD bias =
        condition_schedule(flow_token_times(cfg), {0.5f, 1.5f}, cfg.lambda).cast<double>();
    std::vector<double> ts = {0.3, 0.7};

    check_gradients(store, [&](nn::Tape<double>& t) {
        nn::Params<double> P{&t, true};
        auto v = velocity_graph(P, x_t, ts, cond, clips, bias, cfg.enc);
        return nn::mse_vs(v, target);
    });
}

TEST_CASE("flow loss: determinism, positivity and the zero-field baseline") {
    FlowConfig cfg = tiny_flow();
    nn::ParamStore<float> params;
    init_flow_params(params, cfg, 60);
    FlowDims d = flow_dims(cfg.enc, cfg.spec);

    FlowBatch batch;
    batch.clips = 2;
    batch.x1_rows = random_mat(batch.clips * d.tokens, d.patch_dim, 61).cast<float>();
    batch.cond_rows = random_mat(batch.clips * cfg.segments, cfg.enc.embed_dim, 62).cast<float>();
    batch.bias = condition_schedule(flow_token_times(cfg), {0.5f, 1.5f}, cfg.lambda);

    float a = flow_loss(batch, cfg, params, 7);
    float b = flow_loss(batch, cfg, params, 7);
    CHECK(a == b);
    CHECK(a > 0.0f);
    CHECK(a != flow_loss(batch, cfg, params, 8));

    // With the head still at zero the field is v = 0, so the expected loss
    // is E|x1 - x0|^2 = mean(x1^2) + 1. Average enough draws to see it.
    double acc = 0.0;
    int draws = 20;  // 20 seeds x 2 clips x 512 entries of noise
    for (int i = 0; i < draws; ++i) acc += flow_loss(batch, cfg, params, 100 + i);
    double expected = batch.x1_rows.cast<double>().array().square().mean() + 1.0;
    CHECK(acc / draws == doctest::Approx(expected).epsilon(0.05));

    FlowBatch wrong = batch;
    wrong.x1_rows.conservativeResize(3, d.patch_dim);
    CHECK_THROWS_AS(flow_loss(wrong, cfg, params, 7), std::invalid_argument);
}

TEST_CASE("euler integration: constant-field exactness and step-count canary") {
    MatF x0 = random_mat(3, 4, 70).cast<float>();
    MatF c = random_mat(3, 4, 71).cast<float>();
    auto constant = [&](const MatF&, float) { return c; };
    for (int steps : {1, 2, 7, 32}) {
        MatF got = euler_integrate(constant, x0, steps);
        CHECK((got - (x0 + c)).cwiseAbs().maxCoeff() < 1e-5);
    }
    CHECK_THROWS_AS(euler_integrate(constant, x0, 0), std::invalid_argument);

    // Linear field v(x) = A x: one step gives (I+A)x0, two give (I+A/2)^2 x0,
    // and the exact flow is exp(A) x0. The discretizations must disagree.
    MatF A(2, 2);
    A << 0.0f, 1.1f, -0.9f, 0.2f;
    auto linear = [&](const MatF& x, float) { return MatF(A * x); };
    MatF x(2, 1);
    x << 1.0f, -0.5f;

    MatF one = euler_integrate(linear, x, 1);
    MatF two = euler_integrate(linear, x, 2);
    MatF I = MatF::Identity(2, 2);
    CHECK((one - (I + A) * x).cwiseAbs().maxCoeff() < 1e-6);
    MatF half = I + 0.5f * A;
    CHECK((two - half * half * x).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((one - two).cwiseAbs().maxCoeff() > 0.05f);

    // Many steps converge to the matrix exponential, few steps do not.
    MatD expA = MatD::Identity(2, 2);
    MatD term = MatD::Identity(2, 2);
    for (int k = 1; k <= 30; ++k) {
        term = term * A.cast<double>() / k;
        expA += term;
    }
    MatD exact = expA * x.cast<double>();
    double err1 = (one.cast<double>() - exact).cwiseAbs().maxCoeff();
    double err256 = (euler_integrate(linear, x, 256).cast<double>() - exact).cwiseAbs().maxCoeff();
    CHECK(err256 < 0.01 * err1);

    auto frozen = [&](const MatF& y, float) { return MatF(MatF::Zero(2, 2) * y); };
    CHECK((euler_integrate(frozen, x, 1) - euler_integrate(frozen, x, 2)).cwiseAbs().maxCoeff() ==
          0.0f);
}

TEST_CASE("sampler: seeded determinism and mode validation") {
    FlowConfig cfg = tiny_flow();
    nn::ParamStore<float> params;
    init_flow_params(params, cfg, 80);
    enc::SegmentFeatures cond = tiny_cond(cfg, 81);

    SamplerConfig s;
    s.steps = 2;
    s.seed = 1234;
    MatF a = sample_euler(cond, s, cfg, params);
    MatF b = sample_euler(cond, s, cfg, params);
    CHECK(a.rows() == 32);
    CHECK(a.cols() == 16);
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0f);
    s.seed = 1235;
    CHECK((a - sample_euler(cond, s, cfg, params)).cwiseAbs().maxCoeff() > 0.0f);

    // Zero head means zero field, so the sample equals the raw noise draw.
    s.seed = 1234;
    Rng rng(s.seed);
    MatF x0(32, 16);
    for (Eigen::Index r = 0; r < 32; ++r)
        for (Eigen::Index c = 0; c < 16; ++c) x0(r, c) = static_cast<float>(rng.normal());
    CHECK((a - x0).cwiseAbs().maxCoeff() == 0.0f);

    s.mode = SampleMode::single_step;
    s.steps = 2;
    CHECK_THROWS_AS(sample_euler(cond, s, cfg, params), std::invalid_argument);
    s.steps = 1;
    CHECK(sample_euler(cond, s, cfg, params).allFinite());
    s.steps = 0;
    s.mode = SampleMode::euler_multi;
    CHECK_THROWS_AS(sample_euler(cond, s, cfg, params), std::invalid_argument);
}

TEST_CASE("flow overfits one batch below a tenth of the initial loss") {
    // Wider net than tiny_flow: matching the target velocity needs the model
    // to reproduce the noise component of the state, which takes capacity
    // beyond the data itself.
    FlowConfig cfg = tiny_flow();
    cfg.enc.embed_dim = 32;
    cfg.enc.depth = 2;
    nn::ParamStore<float> params;
    init_flow_params(params, cfg, 90);
    FlowDims d = flow_dims(cfg.enc, cfg.spec);

    FlowBatch batch;
    batch.clips = 4;
    batch.x1_rows.resize(batch.clips * d.tokens, d.patch_dim);
    for (int b = 0; b < batch.clips; ++b) {
        MatF row = random_mat(1, d.patch_dim, 500 + b).cast<float>();
        batch.x1_rows.middleRows(b * d.tokens, d.tokens) =
            row.replicate(d.tokens, 1) +
            0.1f * random_mat(d.tokens, d.patch_dim, 600 + b).cast<float>();
    }
    batch.cond_rows = random_mat(batch.clips * cfg.segments, cfg.enc.embed_dim, 92).cast<float>();
    batch.bias = condition_schedule(flow_token_times(cfg), {0.5f, 1.5f}, cfg.lambda);

    // Fixed-draw evaluation so progress is not hidden by fresh noise.
    auto eval = [&]() {
        float acc = 0.0f;
        for (uint64_t s = 0; s < 6; ++s) acc += flow_loss(batch, cfg, params, 999 + s);
        return acc / 6.0f;
    };
    float initial = eval();
    nn::Adam<float> opt(3e-3);
    float best = initial;
    for (int step = 0; step < 1000; ++step) {
        flow_loss(batch, cfg, params, 3000 + step, &opt);
        if (step % 50 == 49) best = std::min(best, eval());
    }
    CHECK(best < 0.1f * initial);
}

TEST_CASE("stage-2 training: frozen tower, logs, checkpoints, abort, generation") {
    fs::path dir = fs::temp_directory_path() / "vaflow_test_flow";
    fs::create_directories(dir);
    std::string root = (dir / "data").string();
    if (!fs::exists(root + "/manifest.json")) {
        data::DatasetConfig dc;
        dc.clips = 12;
        dc.seed = 99;
        data::generate_dataset(dc, root);
    }
    data::DatasetIndex index = data::load_dataset(root);

    align::AlignConfig acfg;
    acfg.enc.embed_dim = 16;
    acfg.enc.depth = 1;
    acfg.enc.mlp_ratio = 2.0;
    acfg.decoder_depth = 1;
    acfg.warmup_steps = 1;
    acfg.batch = 4;
    acfg.max_epochs = 1;
    std::string align_ckpt = (dir / "align.ckpt").string();
    align::train_align(index, acfg, align_ckpt, (dir / "align_log.jsonl").string());
    align::AlignCheckpoint tower = align::load_align_checkpoint(align_ckpt);
    nn::ParamStore<float> tower_before = tower.params;

    FlowConfig cfg;
    cfg.enc.embed_dim = 16;
    cfg.enc.depth = 1;
    cfg.enc.mlp_ratio = 2.0;
    cfg.segments = 4;
    cfg.batch = 4;
    cfg.max_epochs = 2;
    cfg.seed = 3;
    std::string flow_ckpt = (dir / "flow.ckpt").string();
    std::string log = (dir / "flow_log.jsonl").string();
    FlowTrainReport report = train_flow(index, tower, cfg, flow_ckpt, log);
    CHECK(report.epochs == 2);
    CHECK(!report.aborted);
    CHECK(std::isfinite(report.best_val));

    for (const auto& [name, m] : tower_before.tensors)
        CHECK((tower.params.get(name) - m).cwiseAbs().maxCoeff() == 0.0f);

    std::ifstream in(log);
    int lines = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++lines;
    CHECK(lines == 2);

    FlowCheckpoint flow = load_flow_checkpoint(flow_ckpt);
    CHECK(flow.cfg.enc.embed_dim == 16);
    CHECK(flow.cfg.segments == 4);
    CHECK(flow.cfg.lambda == doctest::Approx(4.0));
    CHECK(flow.cfg.clip_seconds == doctest::Approx(4.0));
    CHECK(flow.cfg.spec.mel_bands == 128);
    CHECK(flow.params.has("flow/head_w"));

    // Generation produces a deterministic full-length waveform.
    data::RawClip clip = data::load_clip(index, index.test.empty() ? 0 : index.test[0]);
    SamplerConfig s;
    s.steps = 2;
    s.seed = 77;
    data::WaveBuffer w1 = generate(clip.video, tower, flow, s);
    CHECK(w1.samples.size() == 32000);
    CHECK(w1.sample_rate == 8000);
    data::WaveBuffer w2 = generate(clip.video, tower, flow, s);
    CHECK(w1.samples == w2.samples);
    s.seed = 78;
    CHECK(generate(clip.video, tower, flow, s).samples != w1.samples);

    data::FrameSequence half = clip.video;
    half.frames = 32;
    half.data.resize(static_cast<size_t>(32) * half.height * half.width * half.channels);
    CHECK_THROWS_AS(generate(half, tower, flow, s), std::invalid_argument);

    FlowConfig bad = cfg;
    bad.lr = 1e10;
    bad.max_epochs = 50;
    std::string bad_ckpt = (dir / "flow_bad.ckpt").string();
    FlowTrainReport crashed =
        train_flow(index, tower, bad, bad_ckpt, (dir / "flow_bad_log.jsonl").string());
    CHECK(crashed.aborted);
    FlowCheckpoint rescued = load_flow_checkpoint(bad_ckpt);
    for (const auto& [name, m] : rescued.params.tensors) CHECK(m.allFinite());

    FlowConfig mismatched = cfg;
    mismatched.enc.embed_dim = 32;
    CHECK_THROWS_AS(
        train_flow(index, tower, mismatched, bad_ckpt, (dir / "x.jsonl").string()),
        std::invalid_argument);
}
