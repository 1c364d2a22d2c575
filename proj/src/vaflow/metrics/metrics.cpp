// SPDX-License-Identifier: Apache-2.0
#include "vaflow/metrics/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <tuple>

#include <json.hpp>

#include "vaflow/common.hpp"
#include "vaflow/nn/blocks.hpp"
#include "vaflow/nn/checkpoint.hpp"
#include "vaflow/nn/graph.hpp"

namespace vaflow::metrics {

using nlohmann::json;

namespace {

nn::ParamStore<float>& mutable_store(const nn::ParamStore<float>& store) {
    return const_cast<nn::ParamStore<float>&>(store);
}

// Mean and standard deviation over every element, one pass each.
std::pair<float, float> row_stats(const MatF& m) {
    float mean = m.mean();
    float var = (m.array() - mean).square().mean();
    return {mean, std::sqrt(std::max(var, 0.0f))};
}

// Zero-mean unit-variance copy; a flat signal comes back as zeros instead of
// dividing by a vanishing deviation.
std::vector<float> standardized(const std::vector<float>& x) {
    double mean = 0.0;
    for (float v : x) mean += v;
    mean /= std::max<size_t>(x.size(), 1);
    double var = 0.0;
    for (float v : x) var += (v - mean) * (v - mean);
    double std_dev = std::sqrt(var / std::max<size_t>(x.size(), 1));
    std::vector<float> out(x.size(), 0.0f);
    if (std_dev < 1e-9) return out;
    for (size_t i = 0; i < x.size(); ++i)
        out[i] = static_cast<float>((x[i] - mean) / std_dev);
    return out;
}

// Positive spectral flux per analysis frame, first frame zero.
std::vector<float> spectral_flux(const data::WaveBuffer& wave, const data::SpectroConfig& spec) {
    MatF mag = data::stft_magnitude(wave, spec);
    std::vector<float> flux(static_cast<size_t>(mag.cols()), 0.0f);
    for (Eigen::Index t = 1; t < mag.cols(); ++t)
        flux[t] = (mag.col(t) - mag.col(t - 1)).cwiseMax(0.0f).sum();
    return flux;
}

// Onset strength accumulated into video-frame bins so audio and video share
// one clock.
std::vector<float> audio_envelope(const data::WaveBuffer& wave, const data::FrameSequence& video,
                                  const data::SpectroConfig& spec) {
    std::vector<float> flux = spectral_flux(wave, spec);
    std::vector<float> env(static_cast<size_t>(video.frames), 0.0f);
    for (size_t f = 0; f < flux.size(); ++f) {
        double center = (f * static_cast<double>(spec.hop) + 0.5 * spec.window) / spec.sample_rate;
        int bin = std::clamp(static_cast<int>(center * video.fps), 0, video.frames - 1);
        env[bin] += flux[f];
    }
    return env;
}

// Mean absolute pixel change between consecutive frames, first frame zero.
std::vector<float> motion_envelope(const data::FrameSequence& video) {
    std::vector<float> env(static_cast<size_t>(video.frames), 0.0f);
    size_t stride = video.frame_size();
    for (int t = 1; t < video.frames; ++t) {
        double acc = 0.0;
        const float* cur = video.data.data() + t * stride;
        const float* prev = cur - stride;
        for (size_t i = 0; i < stride; ++i) acc += std::abs(cur[i] - prev[i]);
        env[t] = static_cast<float>(acc / stride);
    }
    return env;
}

// Forward pass shared by training and inference. Standardization stats live
// in the store as plain tensors, outside the trainable graph.
MatF standardize_features(const nn::ParamStore<float>& params, const MatF& x,
                          const std::string& prefix) {
    const MatF& mean = params.get(prefix + "/feat_mean");
    const MatF& dev = params.get(prefix + "/feat_std");
    if (x.cols() != mean.cols())
        throw std::invalid_argument(prefix + ": feature width does not match checkpoint");
    return (x.rowwise() - mean.row(0)).array().rowwise() /
           dev.row(0).array().max(1e-6f);
}

struct ClassifierGraph {
    nn::NodeP<float> hidden;
    nn::NodeP<float> logits;
};

ClassifierGraph classifier_graph(nn::Params<float>& P, const MatF& x_std,
                                 const std::string& prefix) {
    auto x = nn::make_node<float>(x_std, false);
    auto h = nn::gelu(nn::affine(x, P(prefix + "/w1"), P(prefix + "/b1")));
    auto logits = nn::affine(h, P(prefix + "/w2"), P(prefix + "/b2"));
    return {h, logits};
}

MatF softmax_rows(const MatF& logits) {
    MatF p = logits;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        float m = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

float accuracy(const MatF& logits, const std::vector<int>& labels) {
    int hits = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::Index arg = 0;
        logits.row(r).maxCoeff(&arg);
        hits += (static_cast<int>(arg) == labels[r]);
    }
    return logits.rows() > 0 ? static_cast<float>(hits) / logits.rows() : 0.0f;
}

// Full-batch optimization of the two-layer classifier; returns held-out
// accuracy. Deterministic given the seed.
float train_classifier(nn::ParamStore<float>& params, const std::string& prefix,
                       const MatF& train_x, const std::vector<int>& train_y, const MatF& test_x,
                       const std::vector<int>& test_y, int hidden, int classes, double lr,
                       int steps, uint64_t seed) {
    if (train_x.rows() == 0 || test_x.rows() == 0)
        throw std::invalid_argument(prefix + ": empty split");
    if (train_x.rows() != static_cast<Eigen::Index>(train_y.size()) ||
        test_x.rows() != static_cast<Eigen::Index>(test_y.size()))
        throw std::invalid_argument(prefix + ": label count mismatch");

    params.add_zeros(prefix + "/feat_mean", 1, static_cast<int>(train_x.cols()));
    params.add_zeros(prefix + "/feat_std", 1, static_cast<int>(train_x.cols()));
    MatF& mean = params.get(prefix + "/feat_mean");
    MatF& dev = params.get(prefix + "/feat_std");
    for (Eigen::Index c = 0; c < train_x.cols(); ++c) {
        auto [m, s] = row_stats(train_x.col(c));
        mean(0, c) = m;
        dev(0, c) = s;
    }

    Rng rng(derive_seed(seed, 1));
    params.add_glorot(prefix + "/w1", static_cast<int>(train_x.cols()), hidden, rng);
    params.add_zeros(prefix + "/b1", 1, hidden);
    params.add_glorot(prefix + "/w2", hidden, classes, rng);
    params.add_zeros(prefix + "/b2", 1, classes);

    MatF train_std = standardize_features(params, train_x, prefix);
    nn::Adam<float> opt(lr);
    for (int s = 0; s < steps; ++s) {
        nn::Tape<float> tape(params);
        nn::Params<float> P{&tape, true};
        auto g = classifier_graph(P, train_std, prefix);
        auto loss = nn::softmax_xent(g.logits, train_y);
        nn::backward(loss);
        opt.step(tape);
    }

    nn::Tape<float> tape(params);
    nn::Params<float> P{&tape, false};
    auto g = classifier_graph(P, standardize_features(params, test_x, prefix), prefix);
    return accuracy(g.logits->value, test_y);
}

void put_spec(nn::ParamStore<float>& out, const data::SpectroConfig& spec) {
    auto put = [&](const std::string& name, double v) {
        out.tensors.erase(name);
        nn::put_scalar(out, name, static_cast<float>(v));
    };
    put("meta/sample_rate", spec.sample_rate);
    put("meta/window", spec.window);
    put("meta/hop", spec.hop);
    put("meta/n_fft", spec.n_fft);
    put("meta/mel_bands", spec.mel_bands);
    put("meta/time_frames", spec.time_frames);
    put("meta/fmin", spec.fmin);
    put("meta/fmax", spec.fmax);
}

data::SpectroConfig get_spec(const nn::ParamStore<float>& params) {
    auto geti = [&](const std::string& name) {
        return static_cast<int>(std::lround(nn::get_scalar(params, name)));
    };
    data::SpectroConfig spec;
    spec.sample_rate = geti("meta/sample_rate");
    spec.window = geti("meta/window");
    spec.hop = geti("meta/hop");
    spec.n_fft = geti("meta/n_fft");
    spec.mel_bands = geti("meta/mel_bands");
    spec.time_frames = geti("meta/time_frames");
    spec.fmin = nn::get_scalar(params, "meta/fmin");
    spec.fmax = nn::get_scalar(params, "meta/fmax");
    return spec;
}

// Symmetric PSD square root via eigendecomposition, negative eigenvalues
// clamped to zero.
MatD psd_sqrt(const MatD& m) {
    MatD sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<MatD> eig(sym);
    VecD vals = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

MatF embedder_features(const data::WaveBuffer& wave, const data::SpectroConfig& spec) {
    data::SpectrogramTensor s = data::stft_logmel(wave, spec);
    MatF row(1, s.values.rows());
    row.row(0) = s.values.rowwise().mean().transpose();
    return row;
}

EmbedderOutput embed_batch(const EmbedderCheckpoint& ckpt, const MatF& features) {
    if (features.rows() == 0) throw std::invalid_argument("embed_batch: empty feature matrix");
    nn::Tape<float> tape(mutable_store(ckpt.params));
    nn::Params<float> P{&tape, false};
    auto g = classifier_graph(P, standardize_features(ckpt.params, features, "emb"), "emb");
    return {g.hidden->value, softmax_rows(g.logits->value)};
}

EmbedderOutput embed_clips(const EmbedderCheckpoint& ckpt,
                           const std::vector<data::WaveBuffer>& clips) {
    if (clips.empty()) throw std::invalid_argument("embed_clips: empty clip list");
    MatF features(static_cast<Eigen::Index>(clips.size()), ckpt.cfg.spec.mel_bands);
    for (size_t i = 0; i < clips.size(); ++i)
        features.row(i) = embedder_features(clips[i], ckpt.cfg.spec).row(0);
    return embed_batch(ckpt, features);
}

EmbedderCheckpoint train_embedder(const data::DatasetIndex& index, const EmbedderConfig& cfg) {
    if (index.train.empty() || index.test.empty())
        throw std::invalid_argument("train_embedder: dataset has an empty split");

    auto features_of = [&](const std::vector<int>& split, MatF& x, std::vector<int>& y) {
        x.resize(static_cast<Eigen::Index>(split.size()), cfg.spec.mel_bands);
        y.resize(split.size());
        for (size_t i = 0; i < split.size(); ++i) {
            data::RawClip clip = data::load_clip(index, split[i]);
            x.row(i) = embedder_features(clip.audio, cfg.spec).row(0);
            y[i] = index.class_ids[split[i]];
        }
    };
    MatF train_x, test_x;
    std::vector<int> train_y, test_y;
    features_of(index.train, train_x, train_y);
    features_of(index.test, test_x, test_y);

    EmbedderCheckpoint ckpt;
    ckpt.cfg = cfg;
    ckpt.test_accuracy =
        train_classifier(ckpt.params, "emb", train_x, train_y, test_x, test_y, cfg.embed_dim,
                         cfg.classes, cfg.lr, cfg.steps, cfg.seed);
    ckpt.certified = ckpt.test_accuracy >= cfg.gate;
    return ckpt;
}

void save_embedder(const std::string& path, const EmbedderCheckpoint& ckpt) {
    nn::ParamStore<float> out = ckpt.params;
    auto put = [&](const std::string& name, double v) {
        out.tensors.erase(name);
        nn::put_scalar(out, name, static_cast<float>(v));
    };
    put_spec(out, ckpt.cfg.spec);
    put("meta/classes", ckpt.cfg.classes);
    put("meta/embed_dim", ckpt.cfg.embed_dim);
    put("meta/gate", ckpt.cfg.gate);
    put("meta/test_accuracy", ckpt.test_accuracy);
    put("meta/certified", ckpt.certified ? 1.0 : 0.0);
    nn::save_checkpoint(path, out);
}

EmbedderCheckpoint load_embedder(const std::string& path) {
    EmbedderCheckpoint ckpt;
    ckpt.params = nn::load_checkpoint(path);
    ckpt.cfg.spec = get_spec(ckpt.params);
    ckpt.cfg.classes = static_cast<int>(std::lround(nn::get_scalar(ckpt.params, "meta/classes")));
    ckpt.cfg.embed_dim =
        static_cast<int>(std::lround(nn::get_scalar(ckpt.params, "meta/embed_dim")));
    ckpt.cfg.gate = nn::get_scalar(ckpt.params, "meta/gate");
    ckpt.test_accuracy = nn::get_scalar(ckpt.params, "meta/test_accuracy");
    ckpt.certified = nn::get_scalar(ckpt.params, "meta/certified") > 0.5f;
    return ckpt;
}

double kl_floored(const MatF& p, const MatF& q) {
    if (p.rows() != 1 || q.rows() != 1 || p.cols() != q.cols())
        throw std::invalid_argument("kl_floored: expected matching 1-row distributions");
    VecD pf = p.row(0).transpose().cast<double>().cwiseMax(1e-6);
    VecD qf = q.row(0).transpose().cast<double>().cwiseMax(1e-6);
    pf /= pf.sum();
    qf /= qf.sum();
    double kl = 0.0;
    for (Eigen::Index i = 0; i < pf.size(); ++i) kl += pf[i] * std::log(pf[i] / qf[i]);
    return kl;
}

double kld_metric(const std::vector<data::WaveBuffer>& generated,
                  const std::vector<data::WaveBuffer>& reference,
                  const EmbedderCheckpoint& ckpt) {
    if (!ckpt.certified) throw std::runtime_error("kld_metric: embedder is not certified");
    if (generated.empty() || generated.size() != reference.size())
        throw std::invalid_argument("kld_metric: inputs must be paired per clip");
    MatF gen_post = embed_clips(ckpt, generated).posterior;
    MatF ref_post = embed_clips(ckpt, reference).posterior;
    double acc = 0.0;
    for (Eigen::Index r = 0; r < gen_post.rows(); ++r)
        acc += kl_floored(ref_post.row(r), gen_post.row(r));
    return acc / static_cast<double>(gen_post.rows());
}

EmbeddingStats fit_embedding_stats(const MatF& embeddings) {
    if (embeddings.rows() < 2)
        throw std::invalid_argument("fit_embedding_stats: need at least two rows");
    EmbeddingStats stats;
    stats.n = static_cast<int>(embeddings.rows());
    MatD x = embeddings.cast<double>();
    stats.mean = x.colwise().mean();
    MatD centered = x.rowwise() - stats.mean.row(0);
    stats.cov = centered.transpose() * centered / (stats.n - 1);
    stats.cov = 0.5 * (stats.cov + stats.cov.transpose().eval());
    if (!stats.cov.allFinite())
        throw std::runtime_error("fit_embedding_stats: non-finite covariance");
    return stats;
}

double frechet_distance(const EmbeddingStats& a, const EmbeddingStats& b) {
    if (a.mean.cols() != b.mean.cols())
        throw std::invalid_argument("frechet_distance: dimension mismatch");
    MatD a_half = psd_sqrt(a.cov);
    MatD cross = a_half * b.cov * a_half;
    Eigen::SelfAdjointEigenSolver<MatD> eig(0.5 * (cross + cross.transpose().eval()));
    double trace_sqrt = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt;
    // The exact distance is nonnegative; eigensolver noise can leave a tiny
    // negative residue on identical inputs.
    return std::max(d, 0.0);
}

double fad_metric(const std::vector<data::WaveBuffer>& generated,
                  const std::vector<data::WaveBuffer>& reference,
                  const EmbedderCheckpoint& ckpt) {
    if (!ckpt.certified) throw std::runtime_error("fad_metric: embedder is not certified");
    size_t need = static_cast<size_t>(ckpt.cfg.embed_dim) + 1;
    if (generated.size() < need || reference.size() < need)
        throw std::invalid_argument("fad_metric: each set needs at least embed_dim + 1 clips");
    EmbeddingStats gen = fit_embedding_stats(embed_clips(ckpt, generated).embedding);
    EmbeddingStats ref = fit_embedding_stats(embed_clips(ckpt, reference).embedding);
    return frechet_distance(gen, ref);
}

data::WaveBuffer circular_shift(const data::WaveBuffer& wave, double seconds) {
    data::WaveBuffer out = wave;
    size_t n = wave.samples.size();
    if (n == 0) return out;
    long long k = std::llround(seconds * wave.sample_rate);
    size_t shift = static_cast<size_t>(((k % static_cast<long long>(n)) + n) % n);
    for (size_t i = 0; i < n; ++i) out.samples[i] = wave.samples[(i + shift) % n];
    return out;
}

MatF sync_features(const data::WaveBuffer& wave, const data::FrameSequence& video,
                   const SyncConfig& cfg) {
    if (video.frames < 2) throw std::invalid_argument("sync_features: need at least two frames");
    std::vector<float> a = standardized(audio_envelope(wave, video, cfg.spec));
    std::vector<float> v = standardized(motion_envelope(video));
    int frames = video.frames;
    MatF row(1, 2 * cfg.lags + 1);
    for (int lag = -cfg.lags; lag <= cfg.lags; ++lag) {
        double acc = 0.0;
        for (int t = 0; t < frames; ++t) {
            int ta = t + lag;
            if (ta >= 0 && ta < frames) acc += static_cast<double>(a[ta]) * v[t];
        }
        row(0, lag + cfg.lags) = static_cast<float>(acc / frames);
    }
    return row;
}

VecF sync_scores(const SyncCheckpoint& ckpt, const MatF& features) {
    nn::Tape<float> tape(mutable_store(ckpt.params));
    nn::Params<float> P{&tape, false};
    auto g = classifier_graph(P, standardize_features(ckpt.params, features, "sync"), "sync");
    return softmax_rows(g.logits->value).col(1);
}

SyncCheckpoint train_sync_on(const MatF& train_x, const std::vector<int>& train_y,
                             const MatF& test_x, const std::vector<int>& test_y,
                             const SyncConfig& cfg) {
    SyncCheckpoint ckpt;
    ckpt.cfg = cfg;
    ckpt.test_accuracy = train_classifier(ckpt.params, "sync", train_x, train_y, test_x, test_y,
                                          cfg.hidden, 2, cfg.lr, cfg.steps, cfg.seed);
    ckpt.certified = ckpt.test_accuracy >= cfg.gate;
    return ckpt;
}

SyncCheckpoint train_sync_classifier(const data::DatasetIndex& index, const SyncConfig& cfg) {
    if (index.train.empty() || index.test.empty())
        throw std::invalid_argument("train_sync_classifier: dataset has an empty split");

    auto pairs_of = [&](const std::vector<int>& split, MatF& x, std::vector<int>& y) {
        x.resize(2 * static_cast<Eigen::Index>(split.size()), 2 * cfg.lags + 1);
        y.assign(2 * split.size(), 0);
        for (size_t i = 0; i < split.size(); ++i) {
            data::RawClip clip = data::load_clip(index, split[i]);
            double duration = clip.audio.duration();
            Rng rng(derive_seed(cfg.seed, static_cast<uint64_t>(split[i])));
            double offset = rng.uniform(cfg.min_shift, duration - cfg.min_shift);
            x.row(2 * i) = sync_features(clip.audio, clip.video, cfg).row(0);
            x.row(2 * i + 1) =
                sync_features(circular_shift(clip.audio, offset), clip.video, cfg).row(0);
            y[2 * i] = 1;
            y[2 * i + 1] = 0;
        }
    };
    MatF train_x, test_x;
    std::vector<int> train_y, test_y;
    pairs_of(index.train, train_x, train_y);
    pairs_of(index.test, test_x, test_y);
    return train_sync_on(train_x, train_y, test_x, test_y, cfg);
}

void save_sync(const std::string& path, const SyncCheckpoint& ckpt) {
    nn::ParamStore<float> out = ckpt.params;
    auto put = [&](const std::string& name, double v) {
        out.tensors.erase(name);
        nn::put_scalar(out, name, static_cast<float>(v));
    };
    put_spec(out, ckpt.cfg.spec);
    put("meta/lags", ckpt.cfg.lags);
    put("meta/hidden", ckpt.cfg.hidden);
    put("meta/gate", ckpt.cfg.gate);
    put("meta/min_shift", ckpt.cfg.min_shift);
    put("meta/test_accuracy", ckpt.test_accuracy);
    put("meta/certified", ckpt.certified ? 1.0 : 0.0);
    nn::save_checkpoint(path, out);
}

SyncCheckpoint load_sync(const std::string& path) {
    SyncCheckpoint ckpt;
    ckpt.params = nn::load_checkpoint(path);
    ckpt.cfg.spec = get_spec(ckpt.params);
    ckpt.cfg.lags = static_cast<int>(std::lround(nn::get_scalar(ckpt.params, "meta/lags")));
    ckpt.cfg.hidden = static_cast<int>(std::lround(nn::get_scalar(ckpt.params, "meta/hidden")));
    ckpt.cfg.gate = nn::get_scalar(ckpt.params, "meta/gate");
    ckpt.cfg.min_shift = nn::get_scalar(ckpt.params, "meta/min_shift");
    ckpt.test_accuracy = nn::get_scalar(ckpt.params, "meta/test_accuracy");
    ckpt.certified = nn::get_scalar(ckpt.params, "meta/certified") > 0.5f;
    return ckpt;
}

double align_acc(const std::vector<data::WaveBuffer>& generated,
                 const std::vector<data::FrameSequence>& videos, const SyncCheckpoint& ckpt) {
    if (!ckpt.certified) throw std::runtime_error("align_acc: sync classifier is not certified");
    if (generated.empty() || generated.size() != videos.size())
        throw std::invalid_argument("align_acc: need one video per clip");
    MatF features(static_cast<Eigen::Index>(generated.size()), 2 * ckpt.cfg.lags + 1);
    for (size_t i = 0; i < generated.size(); ++i)
        features.row(i) = sync_features(generated[i], videos[i], ckpt.cfg).row(0);
    VecF scores = sync_scores(ckpt, features);
    return (scores.array() >= 0.5f).cast<double>().mean();
}

std::vector<double> detect_onsets_flux(const data::WaveBuffer& wave,
                                       const data::SpectroConfig& spec) {
    std::vector<float> flux = spectral_flux(wave, spec);
    std::vector<double> onsets;
    if (flux.size() < 3) return onsets;
    float peak = *std::max_element(flux.begin(), flux.end());
    if (peak <= 1e-6f) return onsets;
    float threshold = 0.2f * peak;
    for (size_t t = 1; t + 1 < flux.size(); ++t) {
        if (flux[t] < threshold || flux[t] <= flux[t - 1] || flux[t] < flux[t + 1]) continue;
        // Quadratic vertex through the three samples around the peak.
        double denom = static_cast<double>(flux[t - 1]) - 2.0 * flux[t] + flux[t + 1];
        double delta = std::abs(denom) < 1e-12
                           ? 0.0
                           : 0.5 * (static_cast<double>(flux[t - 1]) - flux[t + 1]) / denom;
        delta = std::clamp(delta, -0.5, 0.5);
        // The flux peaks on the frame whose window holds the onset just
        // before its center weight, 0.46 windows into the frame (measured on
        // rendered clips; residual error is a few milliseconds).
        double samples = (t + delta) * spec.hop + 0.46 * spec.window;
        onsets.push_back(samples / spec.sample_rate);
    }
    return onsets;
}

double onset_f1(const data::WaveBuffer& generated, const data::EventTrack& events, double tol,
                const data::SpectroConfig& spec) {
    if (events.onsets.empty()) throw std::invalid_argument("onset_f1: empty event track");
    std::vector<double> detected = detect_onsets_flux(generated, spec);

    // Greedy one-to-one matching by ascending distance.
    std::vector<std::tuple<double, size_t, size_t>> candidates;
    for (size_t d = 0; d < detected.size(); ++d)
        for (size_t e = 0; e < events.onsets.size(); ++e) {
            double dist = std::abs(detected[d] - events.onsets[e]);
            if (dist <= tol) candidates.emplace_back(dist, d, e);
        }
    std::sort(candidates.begin(), candidates.end());
    std::vector<bool> d_used(detected.size(), false), e_used(events.onsets.size(), false);
    int matched = 0;
    for (const auto& [dist, d, e] : candidates) {
        if (d_used[d] || e_used[e]) continue;
        d_used[d] = e_used[e] = true;
        ++matched;
    }
    int fp = static_cast<int>(detected.size()) - matched;
    int fn = static_cast<int>(events.onsets.size()) - matched;
    double denom = 2.0 * matched + fp + fn;
    return denom > 0.0 ? 2.0 * matched / denom : 0.0;
}

TimingReport time_generation(const std::function<void(int)>& gen, int n) {
    if (n < 1) throw std::invalid_argument("time_generation: need at least one clip");
    gen(0);  // warm-up, untimed
    TimingReport report;
    report.n = n;
    std::vector<double> times(n);
    for (int i = 0; i < n; ++i) {
        auto start = std::chrono::steady_clock::now();
        gen(i);
        times[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        report.mean_seconds += times[i];
    }
    report.mean_seconds /= n;
    for (double t : times)
        report.variance_seconds += (t - report.mean_seconds) * (t - report.mean_seconds);
    report.variance_seconds /= std::max(n - 1, 1);
    return report;
}

std::string report_to_json(const MetricReport& report) {
    for (double v : {report.kld, report.fad, report.align_accuracy, report.onset_f1,
                     report.gen_seconds_per_clip, report.gen_seconds_variance,
                     report.embedder_accuracy, report.sync_accuracy})
        if (!std::isfinite(v)) throw std::invalid_argument("report_to_json: non-finite field");
    json j;
    j["kld"] = report.kld;
    j["fad"] = report.fad;
    j["align_acc"] = report.align_accuracy;
    j["onset_f1"] = report.onset_f1;
    j["gen_seconds_per_clip"] = report.gen_seconds_per_clip;
    j["gen_seconds_variance"] = report.gen_seconds_variance;
    j["embedder_accuracy"] = report.embedder_accuracy;
    j["sync_accuracy"] = report.sync_accuracy;
    j["config_digest"] = report.config_digest;
    return j.dump(2) + "\n";
}

MetricReport report_from_json(const std::string& text) {
    json j = json::parse(text);
    MetricReport report;
    report.kld = j.at("kld").get<double>();
    report.fad = j.at("fad").get<double>();
    report.align_accuracy = j.at("align_acc").get<double>();
    report.onset_f1 = j.at("onset_f1").get<double>();
    report.gen_seconds_per_clip = j.at("gen_seconds_per_clip").get<double>();
    report.gen_seconds_variance = j.at("gen_seconds_variance").get<double>();
    report.embedder_accuracy = j.at("embedder_accuracy").get<double>();
    report.sync_accuracy = j.at("sync_accuracy").get<double>();
    report.config_digest = j.at("config_digest").get<std::string>();
    return report;
}

}  // namespace vaflow::metrics
