// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <complex>
#include <vector>

#include "vaflow/data/clip.hpp"
#include "vaflow/mat.hpp"

namespace vaflow::data {

struct SpectroConfig {
    int sample_rate = 8000;
    int window = 400;      // 50 ms
    int hop = 200;         // 25 ms
    int n_fft = 512;
    int mel_bands = 128;
    int time_frames = 128;  // columns after center crop / reflection pad
    double fmin = 0.0;
    double fmax = 4000.0;

    int bins() const { return n_fft / 2 + 1; }
    double hop_seconds() const { return static_cast<double>(hop) / sample_rate; }
    // Frame count of a raw analysis, before cropping to time_frames.
    int raw_frames(size_t samples) const {
        if (samples < static_cast<size_t>(window)) return 0;
        return static_cast<int>((samples - window) / hop) + 1;
    }
    // Index of the first raw frame kept by the center crop (negative when the
    // raw analysis is shorter than time_frames and gets padded instead).
    int crop_offset(size_t samples) const { return (raw_frames(samples) - time_frames) / 2; }
};

struct SpectrogramTensor {
    MatF values;  // mel_bands x time_frames, log(1 + mel magnitude)
    float hop_seconds = 0.025f;
};

struct NormStats {
    float mean = 0.0f;
    float std = 1.0f;
};

// In-place complex FFT, n must be a power of two.
void fft(std::vector<std::complex<double>>& a, bool inverse);

// Periodic Hann window.
std::vector<double> hann_window(int n);

// Triangular mel filterbank, rows are bands over n_fft/2+1 linear bins. Uses
// the 2595*log10(1+f/700) mel scale. A band too narrow to cover any bin gets
// unit weight at its nearest bin so no band is ever silent.
MatF mel_filterbank(const SpectroConfig& cfg);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Linear magnitude STFT, bins x raw_frames.
MatF stft_magnitude(const WaveBuffer& wave, const SpectroConfig& cfg);

// Full analysis path: STFT magnitude -> mel -> log1p, then center-cropped or
// reflection-padded along time to exactly cfg.time_frames columns.
SpectrogramTensor stft_logmel(const WaveBuffer& wave, const SpectroConfig& cfg);

// Scalar statistics over every element of the given spectrograms.
NormStats compute_norm_stats(const std::vector<SpectrogramTensor>& specs);

// (x - mean) / max(std, eps) and its exact inverse.
SpectrogramTensor normalize(const SpectrogramTensor& spec, const NormStats& stats);
SpectrogramTensor denormalize(const SpectrogramTensor& spec, const NormStats& stats);

// Phase retrieval from a log-mel spectrogram: undo log1p, lift mel to linear
// bins with a regularized pseudo-inverse, then run momentum Griffin-Lim.
// Rejects input that still looks normalized (negative log magnitudes).
WaveBuffer griffin_lim(const SpectrogramTensor& spec, const SpectroConfig& cfg, int iterations = 32);

}  // namespace vaflow::data
