// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "vaflow/data/dataset.hpp"
#include "vaflow/data/dsp.hpp"
#include "vaflow/enc/encoder.hpp"

namespace vaflow::align {

// Which audio time steps are hidden during alignment training. Indices are
// spectrogram patch-time steps, not tokens; masking a step hides every
// freq token under it.
struct MaskSpec {
    std::vector<int> masked_idx;    // sorted ascending
    std::vector<int> unmasked_idx;  // sorted ascending
    float ratio = 0.0f;
    int block_size = 1;
    uint64_t seed = 0;
};

// Data geometry both alignment stages are built around, derived once from
// the spectrogram config and a probe clip.
struct AlignDims {
    int freq_groups = 0;      // audio patches per time step
    int audio_steps = 0;      // patch-time steps T_a
    int audio_tokens = 0;     // freq_groups * audio_steps
    int audio_patch_dim = 0;  // values per audio patch
    int video_frames = 0;     // tokens T_v
    int video_patches = 0;    // patches per frame
    int video_patch_dim = 0;  // values per video patch
};

AlignDims align_dims(const enc::EncoderConfig& enc_cfg, const data::SpectroConfig& spec_cfg,
                     const data::FrameSequence& probe);

// Model and optimization settings for the alignment stage. The encoder
// config is shared by both towers; the decoder is a stack of cross-attention
// blocks over the full audio slot sequence.
struct AlignConfig {
    enc::EncoderConfig enc;
    data::SpectroConfig spec;
    float mask_ratio = 0.8f;
    int block_size = 2;
    int decoder_depth = 2;
    // Reconstruct frozen patch embeddings of the masked tokens (default), or
    // the raw spectrogram patches when false.
    bool embed_targets = true;
    bool warmup = true;  // unimodal masked pretraining before alignment
    int warmup_steps = 150;
    float warmup_ratio = 0.75f;
    double lr = 1e-4;
    int batch = 32;
    int max_epochs = 100;
    int patience = 5;
    uint64_t seed = 1;

    int target_dim(const AlignDims& d) const {
        return embed_targets ? enc.embed_dim : d.audio_patch_dim;
    }
};

struct AlignTrainReport {
    int epochs = 0;
    float best_val = 0.0f;
    bool aborted = false;  // loss went non-finite; checkpoint is the last good state
};

// ---------------------------------------------------------------------------
// Masking

// Divides the time axis into ceil(T/block) blocks and masks a uniform random
// subset of them, stopping as soon as the masked step count first reaches
// round(ratio * t_steps). Deterministic per seed.
MaskSpec sample_temporal_mask(int t_steps, float ratio, int block_size, uint64_t seed);

// Global token rows hidden by per-clip masks, for clips stacked along rows
// with `slots` tokens each; ascending.
std::vector<int> masked_token_rows(const std::vector<MaskSpec>& masks, int freq_groups, int slots);

// ---------------------------------------------------------------------------
// Parameters

// Registers both towers, their warmup decoders, the frozen target embedding
// snapshot (tgt/*) and the cross-attention decoder (dec/*).
void init_align_params(nn::ParamStore<float>& store, const AlignConfig& cfg, const AlignDims& dims,
                       uint64_t seed);

// Re-snapshots tgt/* from the current audio patch embedding. Called after
// warmup so alignment reconstructs embeddings that no longer move.
void refresh_target_snapshot(nn::ParamStore<float>& store);

// Reconstruction targets for a stack of audio patch rows: their frozen
// embedding, or the rows themselves in spectrogram-space mode.
MatF alignment_targets(const MatF& audio_rows, const AlignConfig& cfg,
                       const nn::ParamStore<float>& params);

// ---------------------------------------------------------------------------
// Graphs

// Masked cross-modal reconstruction: the audio encoder sees unmasked tokens
// only; the decoder fills masked slots with the mask token, adds decoder
// positional codes, then runs cross-attention blocks against the video
// features. Returns head outputs at masked rows only, in mask order.
template <typename S>
nn::NodeP<S> reconstruct_graph(const nn::Params<S>& P, nn::NodeP<S> audio_tokens,
                               nn::NodeP<S> video_feats, const std::vector<MaskSpec>& masks,
                               int slots, int freq_groups, const enc::EncoderConfig& cfg,
                               int decoder_depth) {
    int batch = static_cast<int>(masks.size());
    size_t mask_steps = masks.front().masked_idx.size();
    std::vector<int> keep_g;
    for (int b = 0; b < batch; ++b) {
        if (masks[b].masked_idx.size() != mask_steps)
            throw std::logic_error("reconstruct_graph: uneven mask sizes in batch");
        if (masks[b].masked_idx.empty() || masks[b].unmasked_idx.empty())
            throw std::logic_error("reconstruct_graph: mask must hide some steps and keep some");
        for (int s : masks[b].unmasked_idx)
            for (int f = 0; f < freq_groups; ++f) keep_g.push_back(b * slots + s * freq_groups + f);
    }
    std::vector<int> mask_g = masked_token_rows(masks, freq_groups, slots);

    auto enc_out = enc::encode_graph(P, nn::gather_rows(audio_tokens, keep_g), batch, cfg, "aud");
    auto kept = nn::scatter_rows(enc_out, keep_g, batch * slots);
    auto fill = nn::scatter_rows(
        nn::repeat_rows(P("dec/mask_tok"), static_cast<int>(mask_g.size())), mask_g,
        batch * slots);
    auto x = nn::add_tiled(nn::add(kept, fill), P("dec/pos"), batch);
    for (int d = 0; d < decoder_depth; ++d)
        x = nn::cross_block(P, x, video_feats, batch, cfg.block(), "dec/blk" + std::to_string(d));
    auto pred = nn::affine(x, P("dec/head_w"), P("dec/head_b"));
    return nn::gather_rows(pred, mask_g);
}

// Full alignment objective for a batch: embed both modalities, encode video
// on the clip clock, reconstruct masked audio and compare against `targets`
// at the masked rows.
template <typename S>
nn::NodeP<S> align_loss_graph(const nn::Params<S>& P, const Mat<S>& audio_rows,
                              const Mat<S>& video_rows, const Mat<S>& targets,
                              const std::vector<MaskSpec>& masks, const AlignDims& dims,
                              const enc::EncoderConfig& cfg, int decoder_depth) {
    int batch = static_cast<int>(masks.size());
    auto audio_tokens = enc::embed_audio_graph(P, audio_rows, batch);
    auto vid = enc::embed_video_graph(P, video_rows, batch * dims.video_frames);
    vid = nn::add_tiled(vid, P("vid/pos_t"), batch);
    auto video_feats = enc::encode_graph(P, vid, batch, cfg, "vid");

    auto pred = reconstruct_graph(P, audio_tokens, video_feats, masks, dims.audio_tokens,
                                  dims.freq_groups, cfg, decoder_depth);
    std::vector<int> mask_g = masked_token_rows(masks, dims.freq_groups, dims.audio_tokens);
    Mat<S> want(static_cast<Eigen::Index>(mask_g.size()), targets.cols());
    for (size_t i = 0; i < mask_g.size(); ++i)
        want.row(static_cast<Eigen::Index>(i)) = targets.row(mask_g[i]);
    return nn::mse_vs(pred, want);
}

// ---------------------------------------------------------------------------
// Float-level operations

// Video tower forward on the clip clock: patchify, temporal codes, encoder.
enc::TokenSequence video_features(const data::FrameSequence& frames, const enc::EncoderConfig& cfg,
                                  const nn::ParamStore<float>& params);

// Single-clip masked reconstruction; audio_tokens must be patchify_audio
// output (embedded, unencoded) and video_feats an encoded video sequence.
MatF reconstruct_masked(const enc::TokenSequence& video_feats,
                        const enc::TokenSequence& audio_tokens, const MaskSpec& mask,
                        const AlignConfig& cfg, const nn::ParamStore<float>& params);

// Mean squared error between predictions at masked rows and the matching
// rows of the full target matrix. Unmasked rows never enter the sum.
float vama_loss(const MatF& predicted, const MatF& target_tokens, const MaskSpec& mask,
                int freq_groups);

// One batch of clips, rows stacked clip-major.
struct AlignBatch {
    MatF audio_rows;  // (clips * audio_tokens) x audio_patch_dim
    MatF video_rows;  // (clips * video_frames * video_patches) x video_patch_dim
    int clips = 0;
};

// Evaluates the alignment loss on one batch; when opt is given, also applies
// one update. Returns the loss at the incoming parameters.
float align_step(const AlignBatch& batch, const std::vector<MaskSpec>& masks,
                 const AlignConfig& cfg, const AlignDims& dims, nn::ParamStore<float>& params,
                 nn::Adam<float>* opt = nullptr);

// Stage-1 training: optional unimodal warmup, then alignment epochs over the
// train split with per-epoch validation, best-val checkpointing to out_ckpt
// and a JSONL loss log beside it. A non-finite loss aborts and leaves the
// last good checkpoint in place. Passing resume_from warm-starts parameters
// and normalization from an earlier checkpoint and skips the warmup.
AlignTrainReport train_align(const data::DatasetIndex& index, const AlignConfig& cfg,
                             const std::string& out_ckpt, const std::string& log_path,
                             const std::string& resume_from = "");

// Rebuilds the config and normalization stats stored in a checkpoint.
struct AlignCheckpoint {
    nn::ParamStore<float> params;
    AlignConfig cfg;
    AlignDims dims;
    data::NormStats norm;
};
void save_align_checkpoint(const std::string& path, const nn::ParamStore<float>& params,
                           const AlignConfig& cfg, const AlignDims& dims,
                           const data::NormStats& norm);
AlignCheckpoint load_align_checkpoint(const std::string& path);

}  // namespace vaflow::align
