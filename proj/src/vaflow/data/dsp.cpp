// SPDX-License-Identifier: Apache-2.0
#include "vaflow/data/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vaflow::data {

void fft(std::vector<std::complex<double>>& a, bool inverse) {
    size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw std::invalid_argument("fft size must be a power of two");

    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        double ang = 2.0 * M_PI / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                std::complex<double> u = a[i + k];
                std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse) {
        for (auto& x : a) x /= static_cast<double>(n);
    }
}

std::vector<double> hann_window(int n) {
    std::vector<double> w(n);
    for (int i = 0; i < n; ++i)
        w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / static_cast<double>(n));
    return w;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MatF mel_filterbank(const SpectroConfig& cfg) {
    int bins = cfg.bins();
    MatF fb = MatF::Zero(cfg.mel_bands, bins);

    double mel_lo = hz_to_mel(cfg.fmin);
    double mel_hi = hz_to_mel(cfg.fmax);
    std::vector<double> edges(cfg.mel_bands + 2);
    for (int m = 0; m < cfg.mel_bands + 2; ++m)
        edges[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * m / static_cast<double>(cfg.mel_bands + 1));

    double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.n_fft;
    for (int m = 0; m < cfg.mel_bands; ++m) {
        double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
        for (int k = 0; k < bins; ++k) {
            double f = k * bin_hz;
            double w = 0.0;
            if (f >= lo && f <= center && center > lo)
                w = (f - lo) / (center - lo);
            else if (f > center && f <= hi && hi > center)
                w = (hi - f) / (hi - center);
            fb(m, k) = static_cast<float>(w);
        }
        if (fb.row(m).maxCoeff() <= 0.0f) {
            int nearest = static_cast<int>(std::lrint(center / bin_hz));
            nearest = std::clamp(nearest, 0, bins - 1);
            fb(m, nearest) = 1.0f;
        }
    }
    return fb;
}

MatF stft_magnitude(const WaveBuffer& wave, const SpectroConfig& cfg) {
    int frames = cfg.raw_frames(wave.samples.size());
    if (frames <= 0) throw std::runtime_error("waveform shorter than one analysis window");
    int bins = cfg.bins();
    std::vector<double> win = hann_window(cfg.window);

    MatF mag(bins, frames);
    std::vector<std::complex<double>> buf(cfg.n_fft);
    for (int t = 0; t < frames; ++t) {
        size_t start = static_cast<size_t>(t) * cfg.hop;
        for (int i = 0; i < cfg.window; ++i)
            buf[i] = wave.samples[start + i] * win[i];
        std::fill(buf.begin() + cfg.window, buf.end(), std::complex<double>(0.0, 0.0));
        fft(buf, false);
        for (int k = 0; k < bins; ++k) mag(k, t) = static_cast<float>(std::abs(buf[k]));
    }
    return mag;
}

namespace {

// Center crop along columns, or reflection-pad when src is too short.
MatF fit_time_axis(const MatF& src, int target) {
    int raw = static_cast<int>(src.cols());
    if (raw == target) return src;
    if (raw > target) {
        int offset = (raw - target) / 2;
        return src.middleCols(offset, target);
    }
    MatF out(src.rows(), target);
    int left = (target - raw) / 2;
    for (int t = 0; t < target; ++t) {
        int s = t - left;
        // Reflect around the edges without repeating the boundary column.
        while (s < 0 || s >= raw) {
            if (s < 0) s = -s;
            if (s >= raw) s = 2 * (raw - 1) - s;
            if (raw == 1) s = 0;
        }
        out.col(t) = src.col(s);
    }
    return out;
}

}  // namespace

SpectrogramTensor stft_logmel(const WaveBuffer& wave, const SpectroConfig& cfg) {
    MatF mag = stft_magnitude(wave, cfg);
    MatF mel = mel_filterbank(cfg) * mag;
    SpectrogramTensor spec;
    spec.values = fit_time_axis(mel, cfg.time_frames);
    spec.values = (spec.values.array() + 1.0f).log();
    spec.hop_seconds = static_cast<float>(cfg.hop_seconds());
    return spec;
}

NormStats compute_norm_stats(const std::vector<SpectrogramTensor>& specs) {
    if (specs.empty()) throw std::invalid_argument("compute_norm_stats: no spectrograms");
    double sum = 0.0, count = 0.0;
    for (const auto& s : specs) {
        sum += s.values.cast<double>().sum();
        count += static_cast<double>(s.values.size());
    }
    double mean = sum / count;
    double var = 0.0;
    for (const auto& s : specs)
        var += (s.values.cast<double>().array() - mean).square().sum();
    var /= count;
    NormStats stats;
    stats.mean = static_cast<float>(mean);
    stats.std = static_cast<float>(std::sqrt(var));
    return stats;
}

static constexpr float kStdFloor = 1e-5f;

SpectrogramTensor normalize(const SpectrogramTensor& spec, const NormStats& stats) {
    float denom = std::max(stats.std, kStdFloor);
    SpectrogramTensor out = spec;
    out.values = (spec.values.array() - stats.mean) / denom;
    return out;
}

SpectrogramTensor denormalize(const SpectrogramTensor& spec, const NormStats& stats) {
    float denom = std::max(stats.std, kStdFloor);
    SpectrogramTensor out = spec;
    out.values = spec.values.array() * denom + stats.mean;
    return out;
}

namespace {

struct ComplexSpec {
    // bins x frames, interleaved as two real matrices to keep Eigen happy.
    MatF re, im;
};

WaveBuffer istft(const ComplexSpec& spec, const SpectroConfig& cfg) {
    int frames = static_cast<int>(spec.re.cols());
    size_t length = static_cast<size_t>(frames - 1) * cfg.hop + cfg.window;
    std::vector<double> win = hann_window(cfg.window);
    std::vector<double> acc(length, 0.0), wsum(length, 0.0);

    std::vector<std::complex<double>> buf(cfg.n_fft);
    int bins = cfg.bins();
    for (int t = 0; t < frames; ++t) {
        for (int k = 0; k < bins; ++k) buf[k] = {spec.re(k, t), spec.im(k, t)};
        for (int k = bins; k < cfg.n_fft; ++k) buf[k] = std::conj(buf[cfg.n_fft - k]);
        fft(buf, true);
        size_t start = static_cast<size_t>(t) * cfg.hop;
        for (int i = 0; i < cfg.window; ++i) {
            acc[start + i] += buf[i].real() * win[i];
            wsum[start + i] += win[i] * win[i];
        }
    }
    WaveBuffer wave;
    wave.sample_rate = cfg.sample_rate;
    wave.samples.resize(length);
    for (size_t i = 0; i < length; ++i)
        wave.samples[i] = static_cast<float>(acc[i] / std::max(wsum[i], 1e-8));
    return wave;
}

ComplexSpec stft_complex(const WaveBuffer& wave, const SpectroConfig& cfg) {
    int frames = cfg.raw_frames(wave.samples.size());
    int bins = cfg.bins();
    std::vector<double> win = hann_window(cfg.window);
    ComplexSpec out;
    out.re.resize(bins, frames);
    out.im.resize(bins, frames);
    std::vector<std::complex<double>> buf(cfg.n_fft);
    for (int t = 0; t < frames; ++t) {
        size_t start = static_cast<size_t>(t) * cfg.hop;
        for (int i = 0; i < cfg.window; ++i) buf[i] = wave.samples[start + i] * win[i];
        std::fill(buf.begin() + cfg.window, buf.end(), std::complex<double>(0.0, 0.0));
        fft(buf, false);
        for (int k = 0; k < bins; ++k) {
            out.re(k, t) = static_cast<float>(buf[k].real());
            out.im(k, t) = static_cast<float>(buf[k].imag());
        }
    }
    return out;
}

}  // namespace

WaveBuffer griffin_lim(const SpectrogramTensor& spec, const SpectroConfig& cfg, int iterations) {
    if (spec.values.minCoeff() < -1e-4f)
        throw std::invalid_argument(
            "griffin_lim: input has negative log magnitudes; denormalize the spectrogram first");
    if (spec.values.rows() != cfg.mel_bands)
        throw std::invalid_argument("griffin_lim: band count does not match config");

    // Undo log1p. The iteration enforces magnitude consistency per mel band
    // rather than per linear bin: lifting 128 bands onto 257 bins with a
    // pseudo-inverse alone smears a tone over every bin its triangle touches,
    // and the smeared chord never converges to a clean waveform.
    MatF mel_target = (spec.values.array().exp() - 1.0f).max(0.0f);
    MatF fb = mel_filterbank(cfg);
    int bins = cfg.bins();
    int frames = static_cast<int>(mel_target.cols());

    // Ridge pseudo-inverse lift for the starting magnitudes only.
    Eigen::MatrixXd fbd = fb.cast<double>();
    Eigen::MatrixXd gram = fbd.transpose() * fbd;
    gram.diagonal().array() += 1e-5;
    Eigen::MatrixXd pinv = gram.ldlt().solve(fbd.transpose());  // bins x mel_bands
    MatF lin = (pinv * mel_target.cast<double>()).cast<float>().cwiseMax(0.0f);

    // Initial phase advances linearly at each bin's center frequency, the
    // phase track of a stationary sinusoid. A zero init is a symmetric saddle
    // the iteration escapes only slowly.
    ComplexSpec cur;
    cur.re.resize(bins, frames);
    cur.im.resize(bins, frames);
    double phase_step = 2.0 * M_PI * cfg.hop / cfg.n_fft;
    for (int k = 0; k < bins; ++k) {
        for (int t = 0; t < frames; ++t) {
            double ph = phase_step * k * t;
            cur.re(k, t) = lin(k, t) * static_cast<float>(std::cos(ph));
            cur.im(k, t) = lin(k, t) * static_cast<float>(std::sin(ph));
        }
    }

    // Per-bin weight mass, for spreading band gain ratios back onto bins.
    VecF wsum = fb.colwise().sum().transpose();
    // Momentum over the signal-consistency projection, after Perraudin's
    // fast variant.
    const float momentum = 0.9f;
    MatF prev_re, prev_im;
    bool have_prev = false;
    for (int it = 0; it < iterations; ++it) {
        WaveBuffer wave = istft(cur, cfg);
        ComplexSpec proj = stft_complex(wave, cfg);
        MatF acc_re = proj.re, acc_im = proj.im;
        if (have_prev) {
            acc_re += momentum * (proj.re - prev_re);
            acc_im += momentum * (proj.im - prev_im);
        }
        prev_re = proj.re;
        prev_im = proj.im;
        have_prev = true;

        // Rescale magnitudes so each mel band carries the target energy,
        // keeping the projection's phase and its within-band energy layout.
        MatF amp = (acc_re.array().square() + acc_im.array().square()).sqrt().max(1e-12f);
        MatF ratio = (mel_target.array() / (fb * amp).array().max(1e-8f)).min(10.0f);
        MatF gain = fb.transpose() * ratio;
        for (int k = 0; k < bins; ++k) {
            if (wsum(k) > 1e-8f)
                gain.row(k) /= wsum(k);
            else
                gain.row(k).setOnes();
        }
        cur.re = acc_re.array() * gain.array();
        cur.im = acc_im.array() * gain.array();
    }
    return istft(cur, cfg);
}

}  // namespace vaflow::data
