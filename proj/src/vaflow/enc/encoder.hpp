// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "vaflow/data/clip.hpp"
#include "vaflow/data/dsp.hpp"
#include "vaflow/mat.hpp"
#include "vaflow/nn/blocks.hpp"

namespace vaflow::enc {

enum class Modality { video, audio };

// Architecture of the patch-embedding transformer towers. Both modalities
// share the embedding width so cross-attention between them needs no adapter.
struct EncoderConfig {
    int embed_dim = 128;
    int depth = 4;
    int heads = 4;
    int video_patch = 16;  // square spatial patch; temporal extent is one frame
    int audio_patch_freq = 16;
    int audio_patch_time = 4;
    double mlp_ratio = 4.0;

    nn::BlockCfg block() const { return {embed_dim, heads, mlp_ratio}; }
};

// A tokenized clip of one modality. Video carries one pooled token per
// frame. Audio carries one token per freq-by-time patch, stored time-major
// (all patches of a time step are adjacent) so temporal_index never
// decreases along the sequence.
struct TokenSequence {
    MatF tokens;                        // L x D
    std::vector<float> temporal_index;  // seconds, one entry per token
    Modality modality = Modality::video;
    int tokens_per_step = 1;  // tokens sharing one time step (audio freq groups)

    int length() const { return static_cast<int>(tokens.rows()); }
    int time_steps() const { return length() / tokens_per_step; }
};

// Temporally pooled video features, the dynamic condition of the generator.
struct SegmentFeatures {
    MatF segments;                     // S x D
    std::vector<float> segment_times;  // group midpoints in seconds
};

inline const char* tower_prefix(Modality m) { return m == Modality::audio ? "aud" : "vid"; }
inline std::string mae_prefix(Modality m) { return std::string(tower_prefix(m)) + "/mae"; }

// ---------------------------------------------------------------------------
// Patch extraction (plain float, shared by graph builders and loss targets)

// Flattens a spectrogram into non-overlapping patch rows, time-major: row
// s * freq_groups + f covers mel rows [f*pf, (f+1)*pf) and time columns
// [s*pt, (s+1)*pt), scanned mel-row first within the patch.
MatF audio_patch_rows(const MatF& spec_values, const EncoderConfig& cfg);

// Flattens every frame into spatial patch rows, frame-major: row t*P + p is
// patch p of frame t, patches scanned top-to-bottom then left-to-right,
// pixels row-major with the channel fastest.
MatF video_patch_rows(const data::FrameSequence& frames, const EncoderConfig& cfg);

// Reconstruction targets for masked video pretraining: row t holds frame t's
// patch rows concatenated in patch order (that frame's pixels, regrouped).
MatF video_frame_targets(const data::FrameSequence& frames, const EncoderConfig& cfg);

// ---------------------------------------------------------------------------
// Parameter layout

// Registers one tower: linear patch embedding, an n_pos-row positional-code
// table, and the transformer stack under <prefix>/enc.
template <typename S>
void add_tower_params(nn::ParamStore<S>& store, Rng& rng, const EncoderConfig& cfg, int patch_dim,
                      int n_pos, const std::string& prefix) {
    store.add_glorot(prefix + "/patch_w", patch_dim, cfg.embed_dim, rng);
    store.add_zeros(prefix + "/patch_b", 1, cfg.embed_dim);
    store.add_normal(prefix + "/pos", n_pos, cfg.embed_dim, rng, 0.02);
    nn::add_encoder_stack_params(store, rng, cfg.block(), cfg.depth, prefix + "/enc");
}

// Learned per-time-step codes. Video tokens need them because the spatial
// codes pool to the same vector in every frame; they are added by the stage
// models, after patchify, so patchify itself stays frame-permutation
// equivariant.
template <typename S>
void add_temporal_table(nn::ParamStore<S>& store, Rng& rng, int steps, int dim,
                        const std::string& prefix) {
    store.add_normal(prefix + "/pos_t", steps, dim, rng, 0.02);
}

// Registers the reconstruction-only machinery for masked pretraining: mask
// token, decoder positional codes, a two-block decoder stack and a linear
// head back to patch space.
template <typename S>
void add_mae_params(nn::ParamStore<S>& store, Rng& rng, const EncoderConfig& cfg, int target_dim,
                    int n_slots, const std::string& prefix) {
    store.add_normal(prefix + "/mask_tok", 1, cfg.embed_dim, rng, 0.02);
    store.add_normal(prefix + "/dec_pos", n_slots, cfg.embed_dim, rng, 0.02);
    nn::add_encoder_stack_params(store, rng, cfg.block(), 2, prefix + "/dec");
    store.add_glorot(prefix + "/head_w", cfg.embed_dim, target_dim, rng);
    store.add_zeros(prefix + "/head_b", 1, target_dim);
}

// ---------------------------------------------------------------------------
// Graph builders (shared by training loops and the float wrappers below)

// Embeds audio patch rows and adds positional codes. patch_rows holds
// `batch` clips stacked; returns (batch * n_pos) x D.
template <typename S>
nn::NodeP<S> embed_audio_graph(const nn::Params<S>& P, const Mat<S>& patch_rows, int batch,
                               const std::string& prefix = "aud") {
    auto x = nn::make_node<S>(patch_rows, false);
    auto h = nn::affine(x, P(prefix + "/patch_w"), P(prefix + "/patch_b"));
    return nn::add_tiled(h, P(prefix + "/pos"), batch);
}

// Embeds video patch rows, adds the spatial codes per frame and pools each
// frame to one token. patch_rows holds `frames` frames stacked; returns
// frames x D. No temporal information yet; see add_temporal_table.
template <typename S>
nn::NodeP<S> embed_video_graph(const nn::Params<S>& P, const Mat<S>& patch_rows, int frames,
                               const std::string& prefix = "vid") {
    auto x = nn::make_node<S>(patch_rows, false);
    auto h = nn::affine(x, P(prefix + "/patch_w"), P(prefix + "/patch_b"));
    int per_frame = static_cast<int>(patch_rows.rows()) / frames;
    h = nn::add_tiled(h, P(prefix + "/pos"), frames);
    return nn::mean_pool_rows(h, per_frame);
}

template <typename S>
nn::NodeP<S> encode_graph(const nn::Params<S>& P, nn::NodeP<S> tokens, int batch,
                          const EncoderConfig& cfg, const std::string& prefix) {
    return nn::encoder_stack(P, tokens, batch, cfg.block(), cfg.depth, prefix + "/enc");
}

// Masked-reconstruction loss for a batch of token sequences with `slots`
// tokens each and the same mask size per clip. The encoder sees only
// unmasked tokens; the decoder fills masked slots with the mask token, adds
// its own positional codes and predicts the source patches there. The loss
// is the MSE over masked positions only.
template <typename S>
nn::NodeP<S> mae_loss_graph(const nn::Params<S>& P, nn::NodeP<S> tokens, const Mat<S>& targets,
                            const std::vector<std::vector<int>>& masked, int slots,
                            const EncoderConfig& cfg, const std::string& tower,
                            const std::string& mae) {
    int batch = static_cast<int>(masked.size());
    size_t mask_count = masked.front().size();
    std::vector<int> keep_g, mask_g;
    for (int b = 0; b < batch; ++b) {
        if (masked[b].size() != mask_count)
            throw std::logic_error("mae_loss_graph: uneven mask sizes in batch");
        std::vector<char> is_masked(slots, 0);
        for (int i : masked[b]) is_masked.at(i) = 1;
        for (int i = 0; i < slots; ++i)
            (is_masked[i] ? mask_g : keep_g).push_back(b * slots + i);
    }
    if (mask_g.empty() || keep_g.empty())
        throw std::logic_error("mae_loss_graph: mask must hide some tokens and keep some");

    auto enc_out = encode_graph(P, nn::gather_rows(tokens, keep_g), batch, cfg, tower);
    auto kept = nn::scatter_rows(enc_out, keep_g, batch * slots);
    auto fill = nn::scatter_rows(
        nn::repeat_rows(P(mae + "/mask_tok"), static_cast<int>(mask_g.size())), mask_g,
        batch * slots);
    auto dec_in = nn::add_tiled(nn::add(kept, fill), P(mae + "/dec_pos"), batch);
    auto dec_out = nn::encoder_stack(P, dec_in, batch, cfg.block(), 2, mae + "/dec");
    auto pred = nn::affine(dec_out, P(mae + "/head_w"), P(mae + "/head_b"));

    Mat<S> want(static_cast<Eigen::Index>(mask_g.size()), targets.cols());
    for (size_t i = 0; i < mask_g.size(); ++i) want.row(static_cast<Eigen::Index>(i)) = targets.row(mask_g[i]);
    return nn::mse_vs(nn::gather_rows(pred, mask_g), want);
}

// ---------------------------------------------------------------------------
// Float-level operations

// Spectrogram to audio tokens: patch embedding plus positional codes. Token
// times are patch-column midpoints; time_origin shifts them onto the clip
// clock when the spectrogram window was cropped out of a longer clip.
TokenSequence patchify_audio(const data::SpectrogramTensor& spec, const EncoderConfig& cfg,
                             const nn::ParamStore<float>& params, float time_origin = 0.0f);

// Frames to video tokens, one per frame at time i / fps. Deliberately free
// of temporal codes: permuting frames permutes tokens.
TokenSequence patchify_video(const data::FrameSequence& frames, const EncoderConfig& cfg,
                             const nn::ParamStore<float>& params);

// Runs a tower's transformer stack over one clip's tokens. Shape-preserving;
// depth 0 is the identity. Rejects non-finite parameters under the prefix.
TokenSequence encode(const TokenSequence& in, const EncoderConfig& cfg,
                     const nn::ParamStore<float>& params, const std::string& prefix);

// Pools video tokens into n_segments contiguous groups of equal size,
// repeating the last token when the division is ragged. Segment times are
// the group midpoints.
SegmentFeatures pool_segments(const TokenSequence& video_tokens, int n_segments);

// Uniform random choice of `count` distinct token indices out of `slots`,
// sorted ascending.
std::vector<int> sample_token_mask(int slots, int count, uint64_t seed);

// How many tokens a mask ratio hides: round(ratio * slots).
inline int masked_token_count(float ratio, int slots) {
    return static_cast<int>(std::lround(static_cast<double>(ratio) * slots));
}

// Masked-autoencoder pretraining objective on a batch of clips of one
// modality, evaluated at the current parameters; when opt is given, also
// applies one update. patch_rows and targets hold `clips` clips stacked.
// Masks are drawn per clip from `seed` with round(mask_ratio * slots)
// entries. Returns the loss before the update.
float pretrain_unimodal(const MatF& patch_rows, const MatF& targets, int clips, Modality modality,
                        float mask_ratio, const EncoderConfig& cfg, nn::ParamStore<float>& params,
                        uint64_t seed, nn::Adam<float>* opt = nullptr);

}  // namespace vaflow::enc
