// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "vaflow/common.hpp"
#include "vaflow/data/dataset.hpp"
#include "vaflow/data/dsp.hpp"
#include "vaflow/data/synth.hpp"

using namespace vaflow;
using namespace vaflow::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("vaflow_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Pearson correlation between two spectrograms, flattened.
double pearson(const MatF& a, const MatF& b) {
    double ma = a.cast<double>().mean(), mb = b.cast<double>().mean();
    auto da = a.cast<double>().array() - ma;
    auto db = b.cast<double>().array() - mb;
    return (da * db).sum() / std::sqrt(da.square().sum() * db.square().sum() + 1e-30);
}

WaveBuffer tone(double freq, double seconds, int sr, double amp) {
    WaveBuffer w;
    w.sample_rate = sr;
    w.samples.resize(static_cast<size_t>(seconds * sr));
    for (size_t i = 0; i < w.samples.size(); ++i)
        w.samples[i] = static_cast<float>(amp * std::sin(2.0 * M_PI * freq * i / sr));
    return w;
}

}  // namespace

TEST_CASE("wav round trip preserves samples to quantization accuracy") {
    fs::path dir = temp_dir("wav");
    WaveBuffer w;
    w.sample_rate = 8000;
    w.samples = {0.0f, 0.5f, -0.25f, 0.999f, -1.0f, 0.125f};
    std::string path = (dir / "t.wav").string();
    save_wav(path, w);
    WaveBuffer r = load_wav(path);
    REQUIRE(r.sample_rate == 8000);
    REQUIRE(r.samples.size() == w.samples.size());
    for (size_t i = 0; i < w.samples.size(); ++i)
        CHECK(std::abs(r.samples[i] - w.samples[i]) <= 1.0f / 32768.0f + 1e-6f);
}

TEST_CASE("frames round trip is exact and bad magic is rejected") {
    fs::path dir = temp_dir("frames");
    FrameSequence v;
    v.frames = 3;
    v.height = 4;
    v.width = 5;
    v.channels = 1;
    v.fps = 16.0f;
    v.data.resize(60);
    for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(i) * 0.01f;
    std::string path = (dir / "f.bin").string();
    save_frames(path, v);
    FrameSequence r = load_frames(path, 16.0f);
    CHECK(r.frames == 3);
    CHECK(r.height == 4);
    CHECK(r.width == 5);
    CHECK(r.channels == 1);
    CHECK(r.data == v.data);

    std::ofstream bad(dir / "bad.bin", std::ios::binary);
    bad << "NOPE1234";
    bad.close();
    CHECK_THROWS_AS(load_frames((dir / "bad.bin").string(), 16.0f), std::runtime_error);
}

TEST_CASE("events round trip") {
    fs::path dir = temp_dir("events");
    EventTrack e;
    e.class_id = 2;
    e.onsets = {0.5, 1.2345678, 3.25};
    std::string path = (dir / "e.json").string();
    save_events(path, e);
    EventTrack r = load_events(path);
    CHECK(r.class_id == 2);
    REQUIRE(r.onsets.size() == 3);
    for (size_t i = 0; i < 3; ++i) CHECK(r.onsets[i] == doctest::Approx(e.onsets[i]).epsilon(1e-12));
}

TEST_CASE("fft matches direct DFT and inverts exactly") {
    Rng rng(7);
    std::vector<std::complex<double>> a(64);
    for (auto& x : a) x = {rng.normal(), rng.normal()};
    std::vector<std::complex<double>> orig = a;

    // Direct O(n^2) DFT as the oracle.
    std::vector<std::complex<double>> ref(64);
    for (size_t k = 0; k < 64; ++k) {
        std::complex<double> s = 0;
        for (size_t t = 0; t < 64; ++t)
            s += orig[t] * std::polar(1.0, -2.0 * M_PI * static_cast<double>(k * t) / 64.0);
        ref[k] = s;
    }
    fft(a, false);
    for (size_t k = 0; k < 64; ++k) CHECK(std::abs(a[k] - ref[k]) < 1e-9);
    fft(a, true);
    for (size_t k = 0; k < 64; ++k) CHECK(std::abs(a[k] - orig[k]) < 1e-12);
}

TEST_CASE("stft frame count follows the analysis formula") {
    SpectroConfig cfg;
    // 4 s at 8 kHz: floor((32000 - 400) / 200) + 1 = 159 raw frames.
    CHECK(cfg.raw_frames(32000) == 159);
    CHECK(cfg.crop_offset(32000) == 15);

    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        size_t len = 400 + rng.uniform_int(40000);
        int expected = static_cast<int>((len - 400) / 200) + 1;
        CHECK(cfg.raw_frames(len) == expected);
        WaveBuffer w;
        w.sample_rate = 8000;
        w.samples.assign(len, 0.01f);
        CHECK(stft_magnitude(w, cfg).cols() == expected);
    }
}

TEST_CASE("log-mel output has the configured shape and pads short input") {
    SpectroConfig cfg;
    WaveBuffer w = tone(440.0, 4.0, 8000, 0.3);
    SpectrogramTensor s = stft_logmel(w, cfg);
    CHECK(s.values.rows() == 128);
    CHECK(s.values.cols() == 128);
    CHECK(s.hop_seconds == doctest::Approx(0.025));
    CHECK(s.values.minCoeff() >= 0.0f);

    // 2 s of audio gives 79 raw frames, so the time axis must be padded.
    WaveBuffer shorter = tone(440.0, 2.0, 8000, 0.3);
    SpectrogramTensor p = stft_logmel(shorter, cfg);
    CHECK(p.values.rows() == 128);
    CHECK(p.values.cols() == 128);
    CHECK(p.values.array().isFinite().all());
}

TEST_CASE("pure tone lands in the analytically expected mel band") {
    SpectroConfig cfg;
    // Oracle: evaluate each band's triangle at 1 kHz straight from the mel
    // edge formula, independent of the filterbank implementation.
    auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
    auto hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
    double mel_hi = mel(4000.0);
    int expected = -1;
    double best = -1.0;
    for (int m = 0; m < 128; ++m) {
        double lo = hz(mel_hi * m / 129.0);
        double center = hz(mel_hi * (m + 1) / 129.0);
        double hi = hz(mel_hi * (m + 2) / 129.0);
        double f = 1000.0;
        double w = 0.0;
        if (f >= lo && f <= center) w = (f - lo) / (center - lo);
        else if (f > center && f <= hi) w = (hi - f) / (hi - center);
        if (w > best) {
            best = w;
            expected = m;
        }
    }
    REQUIRE(expected >= 0);

    WaveBuffer w = tone(1000.0, 4.0, 8000, 0.5);
    SpectrogramTensor s = stft_logmel(w, cfg);
    int argmax = 0;
    s.values.col(64).maxCoeff(&argmax);
    CHECK(argmax == expected);
}

TEST_CASE("every mel band has at least one nonzero weight") {
    SpectroConfig cfg;
    MatF fb = mel_filterbank(cfg);
    for (int m = 0; m < fb.rows(); ++m) CHECK(fb.row(m).maxCoeff() > 0.0f);
}

TEST_CASE("normalize and denormalize invert each other") {
    SpectroConfig cfg;
    WaveBuffer w = tone(500.0, 4.0, 8000, 0.4);
    SpectrogramTensor s = stft_logmel(w, cfg);
    NormStats stats = compute_norm_stats({s});
    SpectrogramTensor n = normalize(s, stats);
    CHECK(std::abs(n.values.mean()) < 1e-4f);
    SpectrogramTensor d = denormalize(n, stats);
    CHECK((d.values - s.values).cwiseAbs().maxCoeff() < 1e-6f);

    // Constant input drives std to zero; the clamp must keep the round trip
    // finite and exact.
    SpectrogramTensor flat;
    flat.values = MatF::Constant(128, 128, 0.75f);
    flat.hop_seconds = 0.025f;
    NormStats fstats = compute_norm_stats({flat});
    CHECK(fstats.std < 1e-6f);
    SpectrogramTensor fn = normalize(flat, fstats);
    CHECK(fn.values.array().isFinite().all());
    SpectrogramTensor fd = denormalize(fn, fstats);
    CHECK((fd.values - flat.values).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("norm stats match a hand-computed example") {
    SpectrogramTensor a, b;
    a.values = MatF::Constant(2, 2, 1.0f);
    b.values = MatF::Constant(2, 2, 3.0f);
    NormStats stats = compute_norm_stats({a, b});
    CHECK(stats.mean == doctest::Approx(2.0f));
    CHECK(stats.std == doctest::Approx(1.0f));
}

TEST_CASE("griffin-lim round trip: re-analysis matches the input spectrogram") {
    SpectroConfig scfg;

    // Pure tone, tight gate.
    WaveBuffer w = tone(1000.0, 4.0, 8000, 0.4);
    SpectrogramTensor s = stft_logmel(w, scfg);
    SpectrogramTensor back = stft_logmel(griffin_lim(s, scfg, 32), scfg);
    CHECK(pearson(s.values, back.values) >= 0.95);

    // Rendered event clips.
    SynthConfig cfg;
    for (uint64_t seed : {42u, 43u, 44u}) {
        RawClip clip = synth_clip(cfg, static_cast<int>(seed % 4), seed);
        SpectrogramTensor sc = stft_logmel(clip.audio, scfg);
        SpectrogramTensor rc = stft_logmel(griffin_lim(sc, scfg, 32), scfg);
        CHECK(pearson(sc.values, rc.values) >= 0.9);
    }
}

TEST_CASE("griffin-lim error shrinks with more iterations") {
    SpectroConfig scfg;
    SynthConfig cfg;
    double err4 = 0.0, err64 = 0.0;
    for (uint64_t seed = 400; seed < 410; ++seed) {
        RawClip clip = synth_clip(cfg, static_cast<int>(seed % 4), seed);
        SpectrogramTensor s = stft_logmel(clip.audio, scfg);
        SpectrogramTensor a = stft_logmel(griffin_lim(s, scfg, 4), scfg);
        SpectrogramTensor b = stft_logmel(griffin_lim(s, scfg, 64), scfg);
        err4 += (a.values - s.values).norm() / s.values.norm();
        err64 += (b.values - s.values).norm() / s.values.norm();
    }
    CHECK(err64 <= err4);
}

TEST_CASE("griffin-lim maps silence to silence and rejects normalized input") {
    SpectroConfig cfg;
    SpectrogramTensor zero;
    zero.values = MatF::Zero(128, 128);
    zero.hop_seconds = 0.025f;
    WaveBuffer r = griffin_lim(zero, cfg, 8);
    for (float x : r.samples) CHECK(std::abs(x) < 1e-6f);

    SpectrogramTensor normed;
    normed.values = MatF::Constant(128, 128, -0.5f);
    normed.hop_seconds = 0.025f;
    CHECK_THROWS_AS(griffin_lim(normed, cfg, 8), std::invalid_argument);
}

TEST_CASE("onset sampling respects range and spacing") {
    SynthConfig cfg;
    for (uint64_t seed = 0; seed < 200; ++seed) {
        auto onsets = sample_onsets(cfg, 3, seed);
        REQUIRE(onsets.size() == 3);
        for (size_t i = 0; i < onsets.size(); ++i) {
            CHECK(onsets[i] >= cfg.onset_lo() - 1e-9);
            CHECK(onsets[i] <= cfg.onset_hi() + 1e-9);
            if (i > 0) CHECK(onsets[i] - onsets[i - 1] >= cfg.min_onset_gap - 1e-9);
        }
    }
    // 2.85 s of legal range cannot hold 30 events 0.3 s apart.
    CHECK_THROWS_AS(sample_onsets(cfg, 30, 1), std::runtime_error);
}

TEST_CASE("threshold oracle recovers annotated onsets within 12.5 ms") {
    SynthConfig cfg;
    for (uint64_t seed = 100; seed < 120; ++seed) {
        RawClip clip = synth_clip(cfg, static_cast<int>(seed % 4), seed);
        auto detected = detect_onsets_threshold(clip.audio);
        REQUIRE(detected.size() == clip.events.onsets.size());
        for (size_t i = 0; i < detected.size(); ++i)
            CHECK(std::abs(detected[i] - clip.events.onsets[i]) <= 0.0125);
    }
}

TEST_CASE("rendered audio is at least 20 dB above its noise floor") {
    SynthConfig noisy;
    SynthConfig clean = noisy;
    clean.noise_std = 0.0;
    for (uint64_t seed = 5; seed < 10; ++seed) {
        int cls = static_cast<int>(seed % 4);
        RawClip a = synth_clip(noisy, cls, seed);
        RawClip b = synth_clip(clean, cls, seed);
        REQUIRE(a.audio.samples.size() == b.audio.samples.size());
        double sig = 0, noise = 0;
        for (size_t i = 0; i < a.audio.samples.size(); ++i) {
            double s = b.audio.samples[i];
            double n = a.audio.samples[i] - s;
            sig += s * s;
            noise += n * n;
        }
        double snr_db = 10.0 * std::log10(sig / noise);
        CHECK(snr_db >= 20.0);
    }
}

TEST_CASE("video frames stay in range and flashes encode sub-frame timing") {
    SynthConfig cfg;
    cfg.video_noise_std = 0.0f;
    RawClip clip = render_clip(cfg, 0, {1.0, 2.5}, 3);
    for (float px : clip.video.data) {
        CHECK(px >= 0.0f);
        CHECK(px <= 1.0f);
    }

    // Flash frame is brighter than background and decays over later frames.
    auto frame_max = [&](const RawClip& c, int f) {
        float m = 0.0f;
        const float* p = &c.video.data[static_cast<size_t>(f) * c.video.frame_size()];
        for (size_t i = 0; i < c.video.frame_size(); ++i) m = std::max(m, p[i]);
        return m;
    };
    int f0 = static_cast<int>(1.0 * cfg.video_fps);
    CHECK(frame_max(clip, f0) > cfg.video_background + 0.3f);
    CHECK(frame_max(clip, f0) > frame_max(clip, f0 + 1));
    CHECK(frame_max(clip, f0 + 1) > frame_max(clip, f0 + 2));

    // An onset later within the same frame leaves less exposure, so the
    // first flash frame must get dimmer as the onset slides right.
    double base = 2.0;  // frame 32 spans [2.0, 2.0625)
    float prev = 2.0f;
    for (double frac : {0.0, 0.3, 0.6, 0.9}) {
        RawClip c = render_clip(cfg, 0, {base + frac / cfg.video_fps}, 3);
        float bright = frame_max(c, static_cast<int>(base * cfg.video_fps));
        CHECK(bright < prev);
        prev = bright;
    }
}

TEST_CASE("render rejects onsets that violate spacing or range") {
    SynthConfig cfg;
    CHECK_THROWS_AS(render_clip(cfg, 0, {1.0, 1.1}, 1), std::runtime_error);
    CHECK_THROWS_AS(render_clip(cfg, 0, {0.1}, 1), std::runtime_error);
    CHECK_THROWS_AS(render_clip(cfg, 0, {cfg.duration - 0.1}, 1), std::runtime_error);
}

TEST_CASE("dataset generation writes a loadable, balanced, reproducible corpus") {
    fs::path dir = temp_dir("dataset");
    DatasetConfig cfg;
    cfg.clips = 20;
    cfg.classes = 4;
    cfg.seed = 77;
    generate_dataset(cfg, dir.string());

    DatasetIndex index = load_dataset(dir.string());
    CHECK(index.size() == 20);
    CHECK(index.train.size() == 16);
    CHECK(index.val.size() == 2);
    CHECK(index.test.size() == 2);

    // Round-robin classes plus contiguous splits keep balance within one.
    for (const auto& split : {index.train, index.val, index.test}) {
        std::vector<int> counts(cfg.classes, 0);
        for (int i : split) counts[index.class_ids[i]]++;
        int lo = *std::min_element(counts.begin(), counts.end());
        int hi = *std::max_element(counts.begin(), counts.end());
        CHECK(hi - lo <= 1);
    }

    RawClip clip = load_clip(index, 3);
    CHECK(clip.events.class_id == 3);
    CHECK(clip.audio.samples.size() == 32000);
    CHECK(clip.video.frames == 64);
    CHECK(clip.video.fps == doctest::Approx(16.0f));
    CHECK_FALSE(clip.events.onsets.empty());

    // Regeneration with the same seed must be byte-identical.
    fs::path dir2 = temp_dir("dataset2");
    generate_dataset(cfg, dir2.string());
    for (int i : {0, 7, 19}) {
        auto read_bytes = [](const fs::path& p) {
            std::ifstream is(p, std::ios::binary);
            return std::string(std::istreambuf_iterator<char>(is), {});
        };
        char buf[32];
        std::snprintf(buf, sizeof(buf), "clip_%05d", i);
        CHECK(read_bytes(dir / buf / "audio.wav") == read_bytes(dir2 / buf / "audio.wav"));
        CHECK(read_bytes(dir / buf / "frames.bin") == read_bytes(dir2 / buf / "frames.bin"));
    }
}
