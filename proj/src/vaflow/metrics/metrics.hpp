// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vaflow/data/dataset.hpp"
#include "vaflow/data/dsp.hpp"
#include "vaflow/nn/params.hpp"

namespace vaflow::metrics {

// Classifier that doubles as the embedding extractor for KLD and FAD. Input
// is the time-averaged log-mel profile over the analysis window, the hidden
// layer is the embedding, the softmax head is the class posterior.
struct EmbedderConfig {
    data::SpectroConfig spec;
    int classes = 4;
    int embed_dim = 64;  // hidden width, also the embedding dimension
    double lr = 3e-3;
    int steps = 400;  // full-batch optimizer steps
    double gate = 0.95;
    uint64_t seed = 1;
};

struct EmbedderCheckpoint {
    nn::ParamStore<float> params;
    EmbedderConfig cfg;
    float test_accuracy = 0.0f;
    // Set when test_accuracy clears cfg.gate. KLD and FAD refuse to run on an
    // uncertified embedder rather than report numbers nobody should trust.
    bool certified = false;
};

// Time-averaged log-mel profile, 1 x mel_bands.
MatF embedder_features(const data::WaveBuffer& wave, const data::SpectroConfig& spec);

// Hidden activations (rows x embed_dim) and class posteriors (rows x classes)
// for a feature matrix with one clip per row.
struct EmbedderOutput {
    MatF embedding;
    MatF posterior;  // rows sum to 1
};
EmbedderOutput embed_batch(const EmbedderCheckpoint& ckpt, const MatF& features);
EmbedderOutput embed_clips(const EmbedderCheckpoint& ckpt,
                           const std::vector<data::WaveBuffer>& clips);

// Trains on the train split, gates on the test split. Never throws on a weak
// classifier; it returns certified=false and lets the caller decide.
EmbedderCheckpoint train_embedder(const data::DatasetIndex& index, const EmbedderConfig& cfg);

void save_embedder(const std::string& path, const EmbedderCheckpoint& ckpt);
EmbedderCheckpoint load_embedder(const std::string& path);

// KL(p || q) of two 1-row distributions, both floored at 1e-6 and
// renormalized first.
double kl_floored(const MatF& p, const MatF& q);

// Mean over pairs of KL(reference posterior || generated posterior), both
// floored at 1e-6 and renormalized. The lists are paired by index and must
// have equal nonzero length.
double kld_metric(const std::vector<data::WaveBuffer>& generated,
                  const std::vector<data::WaveBuffer>& reference,
                  const EmbedderCheckpoint& ckpt);

// Gaussian fit of an embedding set, one clip per row.
struct EmbeddingStats {
    MatD mean;  // 1 x D
    MatD cov;   // D x D, symmetric, eigenvalues clamped nonnegative
    int n = 0;
};
EmbeddingStats fit_embedding_stats(const MatF& embeddings);

// Fréchet distance |mu1-mu2|^2 + Tr(C1 + C2 - 2(C1 C2)^{1/2}). The matrix
// square root is computed on the symmetrized product C1^{1/2} C2 C1^{1/2}
// by eigendecomposition, clamping negative eigenvalues to zero.
double frechet_distance(const EmbeddingStats& a, const EmbeddingStats& b);

// Fréchet distance between Gaussian fits of two clip sets. Each set needs at
// least embed_dim + 1 clips for a full-rank covariance estimate.
double fad_metric(const std::vector<data::WaveBuffer>& generated,
                  const std::vector<data::WaveBuffer>& reference,
                  const EmbedderCheckpoint& ckpt);

// Binary synchronization probe. Features are the normalized cross
// correlations between the per-video-frame audio onset strength and the
// video motion energy at lags -lags..+lags; aligned pairs peak at lag zero.
struct SyncConfig {
    data::SpectroConfig spec;
    int lags = 8;  // video frames each side, 0.5 s at 16 fps
    int hidden = 16;
    double lr = 1e-2;
    int steps = 300;
    double gate = 0.90;
    double min_shift = 0.5;  // seconds kept clear of zero when shifting
    uint64_t seed = 1;
};

struct SyncCheckpoint {
    nn::ParamStore<float> params;
    SyncConfig cfg;
    float test_accuracy = 0.0f;
    bool certified = false;
};

// Audio rotated left by the given offset; energy wraps around the clip end.
data::WaveBuffer circular_shift(const data::WaveBuffer& wave, double seconds);

// Cross-correlation feature row, 1 x (2*lags + 1).
MatF sync_features(const data::WaveBuffer& wave, const data::FrameSequence& video,
                   const SyncConfig& cfg);

// Probability that each feature row is an aligned pair, rows x 1.
VecF sync_scores(const SyncCheckpoint& ckpt, const MatF& features);

// Core trainer on prebuilt features, exposed so sanity checks can rerun it
// on label-shuffled data. Gates on the held-out rows.
SyncCheckpoint train_sync_on(const MatF& train_x, const std::vector<int>& train_y,
                             const MatF& test_x, const std::vector<int>& test_y,
                             const SyncConfig& cfg);

// Builds aligned positives and circularly shifted negatives from the train
// and test splits, then trains and gates the probe.
SyncCheckpoint train_sync_classifier(const data::DatasetIndex& index, const SyncConfig& cfg);

void save_sync(const std::string& path, const SyncCheckpoint& ckpt);
SyncCheckpoint load_sync(const std::string& path);

// Fraction of clips the certified probe labels as aligned with their video.
double align_acc(const std::vector<data::WaveBuffer>& generated,
                 const std::vector<data::FrameSequence>& videos, const SyncCheckpoint& ckpt);

// Onset times in seconds from spectral flux peaks, refined to sub-frame
// precision by parabolic interpolation around each peak.
std::vector<double> detect_onsets_flux(const data::WaveBuffer& wave,
                                       const data::SpectroConfig& spec);

// F1 of greedy one-to-one matching between detected onsets and the event
// track, a match being a pair within tol seconds.
double onset_f1(const data::WaveBuffer& generated, const data::EventTrack& events,
                double tol = 0.05, const data::SpectroConfig& spec = {});

struct TimingReport {
    double mean_seconds = 0.0;
    double variance_seconds = 0.0;  // sample variance of per-clip times
    int n = 0;
};

// Wall-clock timing of gen(i) over i in [0, n); gen(0) runs once untimed
// first as warm-up.
TimingReport time_generation(const std::function<void(int)>& gen, int n);

struct MetricReport {
    double kld = 0.0;
    double fad = 0.0;
    double align_accuracy = 0.0;
    double onset_f1 = 0.0;
    double gen_seconds_per_clip = 0.0;
    double gen_seconds_variance = 0.0;
    double embedder_accuracy = 0.0;
    double sync_accuracy = 0.0;
    std::string config_digest;
};

// Serialization used by the evaluate command; throws on non-finite fields.
std::string report_to_json(const MetricReport& report);
MetricReport report_from_json(const std::string& text);

}  // namespace vaflow::metrics
