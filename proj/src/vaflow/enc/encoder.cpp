// SPDX-License-Identifier: Apache-2.0
#include "vaflow/enc/encoder.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "vaflow/common.hpp"

namespace vaflow::enc {

namespace {

// Graph building only reads tensor values; Tape wants a mutable store
// because training sessions reuse it for optimizer updates.
nn::ParamStore<float>& mutable_store(const nn::ParamStore<float>& store) {
    return const_cast<nn::ParamStore<float>&>(store);
}

void require_finite(const nn::ParamStore<float>& params, const std::string& prefix) {
    for (const auto& [name, m] : params.tensors)
        if (name.rfind(prefix + "/", 0) == 0 && !m.allFinite())
            throw std::invalid_argument("non-finite values in parameter " + name);
}

}  // namespace

MatF audio_patch_rows(const MatF& spec_values, const EncoderConfig& cfg) {
    int F = static_cast<int>(spec_values.rows());
    int T = static_cast<int>(spec_values.cols());
    int pf = cfg.audio_patch_freq, pt = cfg.audio_patch_time;
    if (pf <= 0 || pt <= 0 || F % pf != 0 || T % pt != 0)
        throw std::invalid_argument("audio patch size does not divide the spectrogram");
    int freq_groups = F / pf, steps = T / pt;

    MatF rows(freq_groups * steps, pf * pt);
    for (int s = 0; s < steps; ++s)
        for (int f = 0; f < freq_groups; ++f) {
            int r = s * freq_groups + f;
            for (int fr = 0; fr < pf; ++fr)
                for (int tc = 0; tc < pt; ++tc)
                    rows(r, fr * pt + tc) = spec_values(f * pf + fr, s * pt + tc);
        }
    return rows;
}

MatF video_patch_rows(const data::FrameSequence& frames, const EncoderConfig& cfg) {
    int ps = cfg.video_patch;
    if (ps <= 0 || frames.height % ps != 0 || frames.width % ps != 0)
        throw std::invalid_argument("video patch size does not divide the frame");
    int py_n = frames.height / ps, px_n = frames.width / ps;
    int per_frame = py_n * px_n;

    MatF rows(frames.frames * per_frame, ps * ps * frames.channels);
    for (int t = 0; t < frames.frames; ++t)
        for (int py = 0; py < py_n; ++py)
            for (int px = 0; px < px_n; ++px) {
                int r = t * per_frame + py * px_n + px;
                int col = 0;
                for (int y = 0; y < ps; ++y)
                    for (int x = 0; x < ps; ++x)
                        for (int c = 0; c < frames.channels; ++c)
                            rows(r, col++) = frames.at(t, py * ps + y, px * ps + x, c);
            }
    return rows;
}

MatF video_frame_targets(const data::FrameSequence& frames, const EncoderConfig& cfg) {
    MatF rows = video_patch_rows(frames, cfg);
    int per_frame = static_cast<int>(rows.rows()) / frames.frames;
    MatF out(frames.frames, per_frame * rows.cols());
    for (int t = 0; t < frames.frames; ++t)
        for (int p = 0; p < per_frame; ++p)
            out.block(t, p * rows.cols(), 1, rows.cols()) = rows.row(t * per_frame + p);
    return out;
}

TokenSequence patchify_audio(const data::SpectrogramTensor& spec, const EncoderConfig& cfg,
                             const nn::ParamStore<float>& params, float time_origin) {
    MatF rows = audio_patch_rows(spec.values, cfg);
    int freq_groups = static_cast<int>(spec.values.rows()) / cfg.audio_patch_freq;
    int steps = static_cast<int>(spec.values.cols()) / cfg.audio_patch_time;

    nn::Tape<float> tape(mutable_store(params));
    nn::Params<float> P{&tape, false};
    auto tokens = embed_audio_graph(P, rows, 1);

    TokenSequence out;
    out.tokens = tokens->value;
    out.modality = Modality::audio;
    out.tokens_per_step = freq_groups;
    out.temporal_index.resize(static_cast<size_t>(freq_groups) * steps);
    for (int s = 0; s < steps; ++s) {
        float mid = time_origin + (s * cfg.audio_patch_time + (cfg.audio_patch_time - 1) * 0.5f) *
                                      spec.hop_seconds;
        for (int f = 0; f < freq_groups; ++f)
            out.temporal_index[static_cast<size_t>(s) * freq_groups + f] = mid;
    }
    return out;
}

TokenSequence patchify_video(const data::FrameSequence& frames, const EncoderConfig& cfg,
                             const nn::ParamStore<float>& params) {
    MatF rows = video_patch_rows(frames, cfg);

    nn::Tape<float> tape(mutable_store(params));
    nn::Params<float> P{&tape, false};
    auto tokens = embed_video_graph(P, rows, frames.frames);

    TokenSequence out;
    out.tokens = tokens->value;
    out.modality = Modality::video;
    out.tokens_per_step = 1;
    out.temporal_index.resize(frames.frames);
    for (int t = 0; t < frames.frames; ++t)
        out.temporal_index[t] = static_cast<float>(t) / frames.fps;
    return out;
}

TokenSequence encode(const TokenSequence& in, const EncoderConfig& cfg,
                     const nn::ParamStore<float>& params, const std::string& prefix) {
    require_finite(params, prefix);
    nn::Tape<float> tape(mutable_store(params));
    nn::Params<float> P{&tape, false};
    auto out_node = encode_graph(P, nn::make_node<float>(in.tokens, false), 1, cfg, prefix);

    TokenSequence out = in;
    out.tokens = out_node->value;
    return out;
}

SegmentFeatures pool_segments(const TokenSequence& video_tokens, int n_segments) {
    if (n_segments <= 0) throw std::invalid_argument("segment count must be positive");
    if (video_tokens.tokens_per_step != 1)
        throw std::invalid_argument("segment pooling expects one token per time step");
    int T = video_tokens.length();
    if (n_segments > T) throw std::invalid_argument("more segments than tokens");
    int group = (T + n_segments - 1) / n_segments;

    SegmentFeatures out;
    out.segments.setZero(n_segments, video_tokens.tokens.cols());
    out.segment_times.resize(n_segments);
    for (int s = 0; s < n_segments; ++s) {
        int start = s * group;
        for (int j = 0; j < group; ++j)
            out.segments.row(s) += video_tokens.tokens.row(std::min(start + j, T - 1));
        out.segments.row(s) /= static_cast<float>(group);
        float t0 = video_tokens.temporal_index[std::min(start, T - 1)];
        float t1 = video_tokens.temporal_index[std::min(start + group - 1, T - 1)];
        out.segment_times[s] = 0.5f * (t0 + t1);
    }
    return out;
}

std::vector<int> sample_token_mask(int slots, int count, uint64_t seed) {
    if (count < 0 || count > slots) throw std::invalid_argument("mask count out of range");
    std::vector<int> idx(slots);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (int i = 0; i < count; ++i) {
        int j = i + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(slots - i)));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return idx;
}

float pretrain_unimodal(const MatF& patch_rows, const MatF& targets, int clips, Modality modality,
                        float mask_ratio, const EncoderConfig& cfg, nn::ParamStore<float>& params,
                        uint64_t seed, nn::Adam<float>* opt) {
    if (!(mask_ratio > 0.0f && mask_ratio < 1.0f))
        throw std::invalid_argument("mask ratio must lie in (0, 1)");
    if (clips <= 0 || targets.rows() % clips != 0)
        throw std::invalid_argument("target rows must split evenly across clips");
    int slots = static_cast<int>(targets.rows()) / clips;
    int count = masked_token_count(mask_ratio, slots);
    if (count < 1 || count >= slots)
        throw std::invalid_argument("mask ratio hides none or all of the tokens");

    std::vector<std::vector<int>> masks(clips);
    for (int b = 0; b < clips; ++b)
        masks[b] = sample_token_mask(slots, count, derive_seed(seed, static_cast<uint64_t>(b)));

    nn::Tape<float> tape(params);
    nn::Params<float> P{&tape, true};
    nn::NodeP<float> tokens;
    if (modality == Modality::audio) {
        tokens = embed_audio_graph(P, patch_rows, clips);
    } else {
        tokens = embed_video_graph(P, patch_rows, clips * slots);
        tokens = nn::add_tiled(tokens, P("vid/pos_t"), clips);
    }
    auto loss = mae_loss_graph(P, tokens, targets, masks, slots, cfg, tower_prefix(modality),
                               mae_prefix(modality));
    float value = loss->value(0, 0);
    if (opt) {
        nn::backward(loss);
        opt->step(tape);
    }
    return value;
}

}  // namespace vaflow::enc
