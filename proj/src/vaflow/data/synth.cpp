// SPDX-License-Identifier: Apache-2.0
#include "vaflow/data/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vaflow/common.hpp"

namespace vaflow::data {

double carrier_hz(int class_id) { return 220.0 * std::pow(2.0, class_id / 2.0); }

std::vector<double> sample_onsets(const SynthConfig& cfg, int count, uint64_t seed) {
    double lo = cfg.onset_lo(), hi = cfg.onset_hi();
    if (count < 1) throw std::runtime_error("sample_onsets: need at least one event");
    double needed = (count - 1) * cfg.min_onset_gap;
    if (hi - lo < needed)
        throw std::runtime_error("sample_onsets: cannot fit " + std::to_string(count) +
                                 " events with minimum gap in the legal onset range");

    Rng rng(seed);
    std::vector<double> onsets(count);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        for (int i = 0; i < count; ++i) onsets[i] = rng.uniform(lo, hi);
        std::sort(onsets.begin(), onsets.end());
        bool ok = true;
        for (int i = 1; i < count; ++i)
            if (onsets[i] - onsets[i - 1] < cfg.min_onset_gap) ok = false;
        if (ok) {
            // Quantize to the sample grid so audio, video and annotation agree
            // on the exact instant.
            for (double& t : onsets) t = std::round(t * cfg.sample_rate) / cfg.sample_rate;
            return onsets;
        }
    }
    // Rejection failing 1000 times means the range is too crowded in practice.
    throw std::runtime_error("sample_onsets: rejection sampling failed, onset range too crowded");
}

namespace {

void render_audio(const SynthConfig& cfg, int class_id, const std::vector<double>& onsets,
                  Rng& rng, WaveBuffer& out) {
    size_t n = static_cast<size_t>(std::llround(cfg.duration * cfg.sample_rate));
    out.sample_rate = cfg.sample_rate;
    out.samples.assign(n, 0.0f);
    double freq = carrier_hz(class_id);
    for (double t0 : onsets) {
        size_t start = static_cast<size_t>(std::llround(t0 * cfg.sample_rate));
        // Render until the envelope is inaudible.
        size_t tail = static_cast<size_t>(std::llround(cfg.tone_decay * 10 * cfg.sample_rate));
        size_t end = std::min(n, start + tail);
        for (size_t i = start; i < end; ++i) {
            double dt = static_cast<double>(i - start) / cfg.sample_rate;
            out.samples[i] += static_cast<float>(cfg.tone_amp * std::exp(-dt / cfg.tone_decay) *
                                                 std::sin(2.0 * M_PI * freq * dt));
        }
    }
    for (size_t i = 0; i < n; ++i)
        out.samples[i] += static_cast<float>(cfg.noise_std * rng.normal());
}

// 0/1 mask of the class shape on a height x width canvas, with a small
// per-event center jitter.
void draw_shape(int class_id, int height, int width, int jx, int jy, std::vector<float>& mask) {
    mask.assign(static_cast<size_t>(height) * width, 0.0f);
    double cx = width / 2.0 + jx, cy = height / 2.0 + jy;
    double r = std::min(height, width) * 0.3;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            bool on = false;
            switch (class_id % 4) {
                case 0:  // disc
                    on = dx * dx + dy * dy <= r * r;
                    break;
                case 1:  // square
                    on = std::abs(dx) <= r * 0.9 && std::abs(dy) <= r * 0.9;
                    break;
                case 2:  // upward triangle
                    on = dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.55;
                    break;
                case 3:  // cross
                    on = (std::abs(dx) <= r * 0.33 && std::abs(dy) <= r * 1.1) ||
                         (std::abs(dy) <= r * 0.33 && std::abs(dx) <= r * 1.1);
                    break;
            }
            if (on) mask[static_cast<size_t>(y) * width + x] = 1.0f;
        }
    }
}

void render_video(const SynthConfig& cfg, int class_id, const std::vector<double>& onsets,
                  Rng& rng, FrameSequence& out) {
    out.frames = static_cast<int>(std::llround(cfg.duration * cfg.video_fps));
    out.height = cfg.height;
    out.width = cfg.width;
    out.channels = 1;
    out.fps = cfg.video_fps;
    out.data.assign(static_cast<size_t>(out.frames) * out.frame_size(), cfg.video_background);

    std::vector<float> mask;
    double frame_dt = 1.0 / cfg.video_fps;
    for (double t0 : onsets) {
        int jx = static_cast<int>(rng.uniform_int(9)) - 4;
        int jy = static_cast<int>(rng.uniform_int(9)) - 4;
        draw_shape(class_id, cfg.height, cfg.width, jx, jy, mask);
        int f0 = static_cast<int>(std::floor(t0 * cfg.video_fps));
        for (int f = f0; f < std::min(out.frames, f0 + 4); ++f) {
            // Mean of the flash envelope exp(-(t-t0)/flash_decay) over the
            // frame's exposure interval. The first frame integrates only from
            // the onset, so its brightness encodes the sub-frame timing.
            double a = std::max(t0, f * frame_dt);
            double b = (f + 1) * frame_dt;
            if (b <= a) continue;
            double integral = cfg.flash_decay * (std::exp(-(a - t0) / cfg.flash_decay) -
                                                 std::exp(-(b - t0) / cfg.flash_decay));
            float bright = static_cast<float>(integral / frame_dt);
            if (bright < 1e-3f) continue;
            float* frame = &out.data[static_cast<size_t>(f) * out.frame_size()];
            for (size_t i = 0; i < mask.size(); ++i)
                frame[i] = std::max(frame[i], cfg.video_background + bright * 0.85f * mask[i]);
        }
    }
    for (auto& px : out.data) {
        px += cfg.video_noise_std * static_cast<float>(rng.normal());
        px = std::clamp(px, 0.0f, 1.0f);
    }
}

}  // namespace

RawClip render_clip(const SynthConfig& cfg, int class_id, const std::vector<double>& onsets,
                    uint64_t seed) {
    for (size_t i = 0; i < onsets.size(); ++i) {
        if (onsets[i] < cfg.onset_lo() - 1e-9 || onsets[i] > cfg.onset_hi() + 1e-9)
            throw std::runtime_error("render_clip: onset outside legal range");
        if (i > 0 && onsets[i] - onsets[i - 1] < cfg.min_onset_gap - 1e-9)
            throw std::runtime_error("render_clip: onsets closer than the minimum gap");
    }
    RawClip clip;
    clip.events.class_id = class_id;
    clip.events.onsets = onsets;
    Rng audio_rng(derive_seed(seed, 1));
    Rng video_rng(derive_seed(seed, 2));
    render_audio(cfg, class_id, onsets, audio_rng, clip.audio);
    render_video(cfg, class_id, onsets, video_rng, clip.video);
    return clip;
}

RawClip synth_clip(const SynthConfig& cfg, int class_id, uint64_t seed) {
    Rng rng(derive_seed(seed, 0));
    int span = cfg.events_max - cfg.events_min + 1;
    if (span < 1) throw std::runtime_error("synth_clip: events_max below events_min");
    int count = cfg.events_min + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(span)));
    std::vector<double> onsets = sample_onsets(cfg, count, derive_seed(seed, 3));
    return render_clip(cfg, class_id, onsets, seed);
}

std::vector<double> detect_onsets_threshold(const WaveBuffer& wave, double min_gap) {
    size_t n = wave.samples.size();
    if (n == 0) return {};
    int sr = wave.sample_rate;

    // Forward-looking 2 ms max envelope: env[i] rises at the first sample of
    // an attack, so detected times sit within a couple of milliseconds of the
    // true onset.
    size_t win = static_cast<size_t>(std::max(1, sr / 500));
    std::vector<float> env(n, 0.0f);
    for (size_t i = 0; i < n; ++i) {
        float m = 0.0f;
        size_t end = std::min(n, i + win);
        for (size_t j = i; j < end; ++j) m = std::max(m, std::abs(wave.samples[j]));
        env[i] = m;
    }

    // Robust noise floor from the median absolute sample value. The max of a
    // 2 ms noise window sits near 2.5 sigma, so gate the envelope at 3x the
    // per-sample 3 sigma level to stay clear of it.
    std::vector<float> mags(n);
    for (size_t i = 0; i < n; ++i) mags[i] = std::abs(wave.samples[i]);
    std::nth_element(mags.begin(), mags.begin() + mags.size() / 2, mags.end());
    float sigma = mags[mags.size() / 2] / 0.6745f;
    float threshold = std::max(9.0f * sigma, 1e-4f);

    // A decaying tail from the previous event can stay above any absolute
    // threshold for longer than the minimum event gap, so additionally demand
    // a sharp rise over the envelope from a few milliseconds earlier. Tails
    // decay smoothly (ratio about 1) while a fresh attack jumps by 10x.
    size_t past_lo = static_cast<size_t>(7 * sr / 1000);   // 7 ms back
    size_t past_hi = static_cast<size_t>(3 * sr / 1000);   // to 3 ms back
    auto past_max = [&](size_t i) {
        float m = threshold / 3.0f;
        size_t begin = i > past_lo ? i - past_lo : 0;
        size_t end = i > past_hi ? i - past_hi : 0;
        for (size_t j = begin; j < end; ++j) m = std::max(m, env[j]);
        return m;
    };

    std::vector<double> onsets;
    size_t gap = static_cast<size_t>(min_gap * sr);
    size_t i = 0;
    while (i < n) {
        if (env[i] > threshold && env[i] > 2.5f * past_max(i)) {
            onsets.push_back(static_cast<double>(i) / sr);
            i += gap;
        } else {
            ++i;
        }
    }
    return onsets;
}

}  // namespace vaflow::data
