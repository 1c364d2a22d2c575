// SPDX-License-Identifier: Apache-2.0
#pragma once
// Conditional velocity-flow generation of audio spectrograms. A transformer
// velocity field over audio patches cross-attends to pooled video segment
// features with a temporal nearness bias; training regresses the constant
// velocity of a linear noise-to-data path, sampling integrates the field
// with an Euler ODE loop (down to a single step).

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vaflow/align/align.hpp"
#include "vaflow/common.hpp"
#include "vaflow/data/dataset.hpp"
#include "vaflow/data/dsp.hpp"
#include "vaflow/enc/encoder.hpp"
#include "vaflow/nn/blocks.hpp"

namespace vaflow::flow {

// Audio token geometry of the velocity transformer.
struct FlowDims {
    int freq_groups = 0;
    int time_steps = 0;
    int tokens = 0;
    int patch_dim = 0;
};
FlowDims flow_dims(const enc::EncoderConfig& enc_cfg, const data::SpectroConfig& spec_cfg);

// Model and optimization settings for the generation stage. The encoder
// config sizes the velocity transformer; its embed_dim must match the video
// tower the conditioning features come from.
struct FlowConfig {
    enc::EncoderConfig enc;
    data::SpectroConfig spec;
    float clip_seconds = 4.0f;  // training clip duration; generation must match
    int segments = 8;           // pooled video segments used as the condition
    float lambda = 4.0f;        // 1/s decay of the temporal attention bias
    double lr = 1e-4;
    int batch = 32;
    int max_epochs = 100;
    int patience = 5;
    uint64_t seed = 1;
};

struct FlowState {
    MatF x_t;  // mel_bands x time_frames, normalized log-mel units
    float t = 0.0f;
    enc::SegmentFeatures cond;
};

enum class SampleMode { euler_multi, single_step };

struct SamplerConfig {
    int steps = 32;
    SampleMode mode = SampleMode::euler_multi;
    uint64_t seed = 0;
};

struct FlowTrainReport {
    int epochs = 0;
    float best_val = 0.0f;
    bool aborted = false;  // loss went non-finite; checkpoint is the last good state
};

// ---------------------------------------------------------------------------
// Path and schedule primitives

// Linear interpolation between noise and data at time t in [0,1].
MatF interpolate_path(const MatF& x0, const MatF& x1, float t);

// Constant velocity of the linear path, independent of t.
MatF target_velocity(const MatF& x0, const MatF& x1);

// Cross-attention logit bias B[token, segment] = -lambda * |token time -
// segment time|; lambda = 0 turns conditioning into a global mixture.
MatF condition_schedule(const std::vector<float>& token_times,
                        const std::vector<float>& segment_times, float lambda);

// Per-token argmax of a bias matrix row; ties go to the lower segment index.
std::vector<int> nearest_segments(const MatF& bias);

// Clip-clock midpoints of the audio patches the velocity transformer sees,
// one entry per token (repeating within a time step across freq groups).
std::vector<float> flow_token_times(const FlowConfig& cfg);

// Sinusoidal embedding of a scalar time in [0,1], transformer-style with the
// scalar spread over a geometric frequency ladder.
MatD sinusoidal_embed(double t, int dim);

// ---------------------------------------------------------------------------
// Parameters and graph

// Registers the patch embedding, positional codes, cross-attention blocks
// and the zero-initialized output head (so the initial field is v = 0).
void init_flow_params(nn::ParamStore<float>& store, const FlowConfig& cfg, uint64_t seed);

// Velocity estimate for a batch of token rows at per-clip times ts,
// conditioned on frozen segment features. Returns patch-space rows.
template <typename S>
nn::NodeP<S> velocity_graph(const nn::Params<S>& P, const Mat<S>& x_rows,
                            const std::vector<S>& ts, const Mat<S>& cond_rows, int batch,
                            const Mat<S>& bias, const enc::EncoderConfig& cfg) {
    if (batch <= 0 || x_rows.rows() % batch != 0 || cond_rows.rows() % batch != 0)
        throw std::logic_error("velocity_graph: rows not divisible by batch");
    if (static_cast<int>(ts.size()) != batch)
        throw std::logic_error("velocity_graph: one time value per clip required");
    int tokens = static_cast<int>(x_rows.rows()) / batch;

    auto x = nn::make_node<S>(x_rows, false);
    auto h = nn::affine(x, P("flow/patch_w"), P("flow/patch_b"));
    h = nn::add_tiled(h, P("flow/pos"), batch);

    Mat<S> time_rows(x_rows.rows(), cfg.embed_dim);
    for (int b = 0; b < batch; ++b)
        time_rows.middleRows(b * tokens, tokens) =
            sinusoidal_embed(static_cast<double>(ts[b]), cfg.embed_dim)
                .template cast<S>()
                .replicate(tokens, 1);
    h = nn::add(h, nn::make_node<S>(time_rows, false));

    auto cond = nn::make_node<S>(cond_rows, false);
    for (int d = 0; d < cfg.depth; ++d)
        h = nn::cross_block(P, h, cond, batch, cfg.block(), "flow/blk" + std::to_string(d),
                            static_cast<const Mat<S>*>(nullptr), &bias);
    return nn::affine(h, P("flow/head_w"), P("flow/head_b"));
}

// ---------------------------------------------------------------------------
// Float-level operations

// Single-clip velocity field evaluation on a full spectrogram tensor.
MatF velocity_field(const MatF& x_t, float t, const enc::SegmentFeatures& cond,
                    const FlowConfig& cfg, const nn::ParamStore<float>& params);

// Inverse of the audio patch-row layout: token rows back to mel x frames.
MatF unpatchify_audio(const MatF& rows, const enc::EncoderConfig& cfg,
                      const data::SpectroConfig& spec_cfg);

// One batch of clips, rows stacked clip-major, with the shared bias.
struct FlowBatch {
    MatF x1_rows;    // (clips * tokens) x patch_dim, normalized spectrogram patches
    MatF cond_rows;  // (clips * segments) x embed_dim, frozen video features
    MatF bias;       // tokens x segments
    int clips = 0;
};

// Flow-matching loss on one batch: per-sample noise and time are derived
// from (seed, sample index) so sharding cannot change the draw. When opt is
// given, also applies one update. Returns the loss at the incoming params.
float flow_loss(const FlowBatch& batch, const FlowConfig& cfg, nn::ParamStore<float>& params,
                uint64_t seed, nn::Adam<float>* opt = nullptr);

// Euler integration of an arbitrary velocity field from t=0 to t=1.
MatF euler_integrate(const std::function<MatF(const MatF&, float)>& velocity, MatF x, int steps);

// Draws x0 ~ N(0,I) from the sampler seed and integrates the learned field;
// returns the normalized spectrogram at t=1.
MatF sample_euler(const enc::SegmentFeatures& cond, const SamplerConfig& sampler,
                  const FlowConfig& cfg, const nn::ParamStore<float>& params);

// Stage-2 training against a frozen alignment tower: video clips are encoded
// once up front, the velocity net optimizes flow_loss with per-epoch
// validation, best-val checkpointing and a JSONL loss log. A non-finite loss
// aborts and leaves the last good checkpoint in place.
FlowTrainReport train_flow(const data::DatasetIndex& index, const align::AlignCheckpoint& tower,
                           FlowConfig cfg, const std::string& out_ckpt,
                           const std::string& log_path, const std::string& resume_from = "");

struct FlowCheckpoint {
    nn::ParamStore<float> params;
    FlowConfig cfg;
};
FlowCheckpoint load_flow_checkpoint(const std::string& path);

// Full generation: encode video through the frozen tower, pool segments,
// integrate the flow, denormalize and run phase retrieval. The waveform
// spans the configured clip duration with the synthesized span placed at
// the analysis crop offset.
data::WaveBuffer generate(const data::FrameSequence& video, const align::AlignCheckpoint& tower,
                          const FlowCheckpoint& flow, const SamplerConfig& sampler,
                          int gl_iterations = 32);

}  // namespace vaflow::flow
