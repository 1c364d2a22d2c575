// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "vaflow/data/clip.hpp"

namespace vaflow::data {

// Event classes are (carrier pitch, shape) pairs: class c plays a damped
// sinusoid at 220 * 2^(c/2) Hz while flashing its shape on screen.
struct SynthConfig {
    double duration = 4.0;
    int sample_rate = 8000;
    float video_fps = 16.0f;
    int height = 32;
    int width = 32;
    int events_min = 1;
    int events_max = 3;
    double min_onset_gap = 0.3;
    double tone_amp = 0.5;
    double tone_decay = 0.12;    // seconds to fall to 1/e
    double noise_std = 0.003;    // audio background noise
    float video_noise_std = 0.02f;
    float video_background = 0.12f;
    double flash_decay = 0.08;   // seconds, ~3 frames at 16 fps

    // Earliest and latest legal onset. The margins keep every event inside
    // the analysis window that the spectrogram center crop retains.
    double onset_lo() const { return 0.5; }
    double onset_hi() const { return duration - 0.65; }
};

double carrier_hz(int class_id);

// Draw ascending onset times that respect the minimum gap. Throws
// std::runtime_error when count events cannot fit in the legal range.
std::vector<double> sample_onsets(const SynthConfig& cfg, int count, uint64_t seed);

// Deterministic render of a clip from class, onsets and seed (the seed only
// drives the audio/video noise and the shape jitter).
RawClip render_clip(const SynthConfig& cfg, int class_id, const std::vector<double>& onsets,
                    uint64_t seed);

// Sample an event count and onsets, then render.
RawClip synth_clip(const SynthConfig& cfg, int class_id, uint64_t seed);

// Waveform-domain onset estimates: times where the smoothed envelope first
// rises above 3x the noise floor after a quiet stretch. Used as the ground
// truth check on rendered audio; accurate to about one millisecond.
std::vector<double> detect_onsets_threshold(const WaveBuffer& wave, double min_gap = 0.15);

}  // namespace vaflow::data
