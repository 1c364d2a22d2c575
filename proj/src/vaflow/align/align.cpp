// SPDX-License-Identifier: Apache-2.0
#include "vaflow/align/align.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "vaflow/nn/checkpoint.hpp"

namespace vaflow::align {

using nlohmann::json;

AlignDims align_dims(const enc::EncoderConfig& enc_cfg, const data::SpectroConfig& spec_cfg,
                     const data::FrameSequence& probe) {
    if (spec_cfg.mel_bands % enc_cfg.audio_patch_freq != 0 ||
        spec_cfg.time_frames % enc_cfg.audio_patch_time != 0)
        throw std::invalid_argument("audio patch size does not divide the spectrogram");
    if (probe.height % enc_cfg.video_patch != 0 || probe.width % enc_cfg.video_patch != 0)
        throw std::invalid_argument("video patch size does not divide the frame");

    AlignDims d;
    d.freq_groups = spec_cfg.mel_bands / enc_cfg.audio_patch_freq;
    d.audio_steps = spec_cfg.time_frames / enc_cfg.audio_patch_time;
    d.audio_tokens = d.freq_groups * d.audio_steps;
    d.audio_patch_dim = enc_cfg.audio_patch_freq * enc_cfg.audio_patch_time;
    d.video_frames = probe.frames;
    d.video_patches = (probe.height / enc_cfg.video_patch) * (probe.width / enc_cfg.video_patch);
    d.video_patch_dim = enc_cfg.video_patch * enc_cfg.video_patch * probe.channels;
    return d;
}

MaskSpec sample_temporal_mask(int t_steps, float ratio, int block_size, uint64_t seed) {
    if (t_steps <= 0) throw std::invalid_argument("mask needs at least one time step");
    if (!(ratio > 0.0f && ratio < 1.0f))
        throw std::invalid_argument("mask ratio must lie in (0, 1)");
    if (block_size < 1 || block_size > t_steps)
        throw std::invalid_argument("mask block size must lie in [1, t_steps]");

    int n_blocks = (t_steps + block_size - 1) / block_size;
    std::vector<int> order(n_blocks);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    for (int i = n_blocks - 1; i > 0; --i) {
        int j = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(i + 1)));
        std::swap(order[i], order[j]);
    }

    int target = enc::masked_token_count(ratio, t_steps);
    std::vector<char> is_masked(t_steps, 0);
    int covered = 0;
    for (int b : order) {
        if (covered >= target) break;
        int lo = b * block_size, hi = std::min(t_steps, lo + block_size);
        for (int s = lo; s < hi; ++s) {
            is_masked[s] = 1;
            ++covered;
        }
    }

    MaskSpec out;
    out.ratio = ratio;
    out.block_size = block_size;
    out.seed = seed;
    for (int s = 0; s < t_steps; ++s) (is_masked[s] ? out.masked_idx : out.unmasked_idx).push_back(s);
    return out;
}

std::vector<int> masked_token_rows(const std::vector<MaskSpec>& masks, int freq_groups,
                                   int slots) {
    std::vector<int> rows;
    for (size_t b = 0; b < masks.size(); ++b)
        for (int s : masks[b].masked_idx)
            for (int f = 0; f < freq_groups; ++f)
                rows.push_back(static_cast<int>(b) * slots + s * freq_groups + f);
    return rows;
}

void init_align_params(nn::ParamStore<float>& store, const AlignConfig& cfg, const AlignDims& dims,
                       uint64_t seed) {
    Rng rng(seed);
    enc::add_tower_params(store, rng, cfg.enc, dims.audio_patch_dim, dims.audio_tokens, "aud");
    enc::add_tower_params(store, rng, cfg.enc, dims.video_patch_dim, dims.video_patches, "vid");
    enc::add_temporal_table(store, rng, dims.video_frames, cfg.enc.embed_dim, "vid");
    enc::add_mae_params(store, rng, cfg.enc, dims.audio_patch_dim, dims.audio_tokens, "aud/mae");
    enc::add_mae_params(store, rng, cfg.enc, dims.video_patches * dims.video_patch_dim,
                        dims.video_frames, "vid/mae");

    store.add_normal("dec/mask_tok", 1, cfg.enc.embed_dim, rng, 0.02);
    store.add_normal("dec/pos", dims.audio_tokens, cfg.enc.embed_dim, rng, 0.02);
    for (int d = 0; d < cfg.decoder_depth; ++d)
        nn::add_cross_block_params(store, rng, cfg.enc.block(), "dec/blk" + std::to_string(d));
    store.add_glorot("dec/head_w", cfg.enc.embed_dim, cfg.target_dim(dims), rng);
    store.add_zeros("dec/head_b", 1, cfg.target_dim(dims));

    store.tensors["tgt/patch_w"] = store.get("aud/patch_w");
    store.tensors["tgt/patch_b"] = store.get("aud/patch_b");
}

void refresh_target_snapshot(nn::ParamStore<float>& store) {
    store.tensors["tgt/patch_w"] = store.get("aud/patch_w");
    store.tensors["tgt/patch_b"] = store.get("aud/patch_b");
}

MatF alignment_targets(const MatF& audio_rows, const AlignConfig& cfg,
                       const nn::ParamStore<float>& params) {
    if (!cfg.embed_targets) return audio_rows;
    const MatF& w = params.get("tgt/patch_w");
    const MatF& b = params.get("tgt/patch_b");
    return (audio_rows * w).rowwise() + b.row(0);
}

enc::TokenSequence video_features(const data::FrameSequence& frames,
                                  const enc::EncoderConfig& cfg,
                                  const nn::ParamStore<float>& params) {
    enc::TokenSequence tok = enc::patchify_video(frames, cfg, params);
    const MatF& pos_t = params.get("vid/pos_t");
    if (pos_t.rows() != tok.tokens.rows())
        throw std::invalid_argument("temporal code table does not match the frame count");
    tok.tokens += pos_t;
    return enc::encode(tok, cfg, params, "vid");
}

MatF reconstruct_masked(const enc::TokenSequence& video_feats,
                        const enc::TokenSequence& audio_tokens, const MaskSpec& mask,
                        const AlignConfig& cfg, const nn::ParamStore<float>& params) {
    if (mask.masked_idx.empty()) throw std::invalid_argument("mask hides no time steps");
    if (mask.unmasked_idx.empty())
        throw std::invalid_argument("mask leaves no audio context to encode");
    int slots = audio_tokens.length();
    int fg = audio_tokens.tokens_per_step;
    int steps = audio_tokens.time_steps();
    for (int s : mask.masked_idx)
        if (s < 0 || s >= steps) throw std::invalid_argument("mask index out of range");

    auto& store = const_cast<nn::ParamStore<float>&>(params);
    nn::Tape<float> tape(store);
    nn::Params<float> P{&tape, false};
    auto audio = nn::make_node<float>(audio_tokens.tokens, false);
    auto video = nn::make_node<float>(video_feats.tokens, false);
    auto pred = reconstruct_graph(P, audio, video, {mask}, slots, fg, cfg.enc, cfg.decoder_depth);
    return pred->value;
}

float vama_loss(const MatF& predicted, const MatF& target_tokens, const MaskSpec& mask,
                int freq_groups) {
    std::vector<int> rows = masked_token_rows({mask}, freq_groups,
                                              static_cast<int>(target_tokens.rows()));
    if (predicted.rows() != static_cast<Eigen::Index>(rows.size()) ||
        predicted.cols() != target_tokens.cols())
        throw std::invalid_argument("prediction shape does not match the mask");
    double acc = 0.0;
    for (size_t i = 0; i < rows.size(); ++i) {
        MatF diff = predicted.row(static_cast<Eigen::Index>(i)) - target_tokens.row(rows[i]);
        acc += static_cast<double>(diff.array().square().sum());
    }
    return static_cast<float>(acc / (static_cast<double>(rows.size()) * predicted.cols()));
}

float align_step(const AlignBatch& batch, const std::vector<MaskSpec>& masks,
                 const AlignConfig& cfg, const AlignDims& dims, nn::ParamStore<float>& params,
                 nn::Adam<float>* opt) {
    if (static_cast<int>(masks.size()) != batch.clips)
        throw std::invalid_argument("one mask per clip required");
    MatF targets = alignment_targets(batch.audio_rows, cfg, params);

    nn::Tape<float> tape(params);
    nn::Params<float> P{&tape, true};
    auto loss = align_loss_graph(P, batch.audio_rows, batch.video_rows, targets, masks, dims,
                                 cfg.enc, cfg.decoder_depth);
    float value = loss->value(0, 0);
    if (opt && std::isfinite(value)) {
        nn::backward(loss);
        opt->step(tape);
    }
    return value;
}

namespace {

struct ClipCache {
    MatF audio_rows;
    MatF video_rows;
};

// Video MAE targets straight from cached patch rows: row t concatenates the
// P patch rows of frame t.
MatF frame_targets_from_rows(const MatF& video_rows, int per_frame) {
    int frames = static_cast<int>(video_rows.rows()) / per_frame;
    MatF out(frames, per_frame * video_rows.cols());
    for (int t = 0; t < frames; ++t)
        for (int p = 0; p < per_frame; ++p)
            out.block(t, p * video_rows.cols(), 1, video_rows.cols()) =
                video_rows.row(t * per_frame + p);
    return out;
}

AlignBatch gather_batch(const std::vector<ClipCache>& cache, const std::vector<int>& picks) {
    AlignBatch b;
    b.clips = static_cast<int>(picks.size());
    Eigen::Index ar = cache[picks[0]].audio_rows.rows();
    Eigen::Index vr = cache[picks[0]].video_rows.rows();
    b.audio_rows.resize(b.clips * ar, cache[picks[0]].audio_rows.cols());
    b.video_rows.resize(b.clips * vr, cache[picks[0]].video_rows.cols());
    for (int i = 0; i < b.clips; ++i) {
        b.audio_rows.middleRows(i * ar, ar) = cache[picks[i]].audio_rows;
        b.video_rows.middleRows(i * vr, vr) = cache[picks[i]].video_rows;
    }
    return b;
}

}  // namespace

void save_align_checkpoint(const std::string& path, const nn::ParamStore<float>& params,
                           const AlignConfig& cfg, const AlignDims& dims,
                           const data::NormStats& norm) {
    nn::ParamStore<float> out = params;
    auto put = [&](const std::string& name, double v) {
        out.tensors.erase(name);
        nn::put_scalar(out, name, static_cast<float>(v));
    };
    put("meta/embed_dim", cfg.enc.embed_dim);
    put("meta/depth", cfg.enc.depth);
    put("meta/heads", cfg.enc.heads);
    put("meta/video_patch", cfg.enc.video_patch);
    put("meta/audio_patch_freq", cfg.enc.audio_patch_freq);
    put("meta/audio_patch_time", cfg.enc.audio_patch_time);
    put("meta/mlp_ratio", cfg.enc.mlp_ratio);
    put("meta/decoder_depth", cfg.decoder_depth);
    put("meta/embed_targets", cfg.embed_targets ? 1.0 : 0.0);
    put("meta/mask_ratio", cfg.mask_ratio);
    put("meta/block_size", cfg.block_size);
    put("meta/freq_groups", dims.freq_groups);
    put("meta/audio_steps", dims.audio_steps);
    put("meta/audio_patch_dim", dims.audio_patch_dim);
    put("meta/video_frames", dims.video_frames);
    put("meta/video_patches", dims.video_patches);
    put("meta/video_patch_dim", dims.video_patch_dim);
    put("meta/sample_rate", cfg.spec.sample_rate);
    put("meta/window", cfg.spec.window);
    put("meta/hop", cfg.spec.hop);
    put("meta/n_fft", cfg.spec.n_fft);
    put("meta/mel_bands", cfg.spec.mel_bands);
    put("meta/time_frames", cfg.spec.time_frames);
    put("meta/fmin", cfg.spec.fmin);
    put("meta/fmax", cfg.spec.fmax);
    put("norm/mean", norm.mean);
    put("norm/std", norm.std);
    nn::save_checkpoint(path, out);
}

AlignCheckpoint load_align_checkpoint(const std::string& path) {
    AlignCheckpoint ck;
    ck.params = nn::load_checkpoint(path);
    auto geti = [&](const std::string& name) {
        return static_cast<int>(std::lround(nn::get_scalar(ck.params, name)));
    };
    ck.cfg.enc.embed_dim = geti("meta/embed_dim");
    ck.cfg.enc.depth = geti("meta/depth");
    ck.cfg.enc.heads = geti("meta/heads");
    ck.cfg.enc.video_patch = geti("meta/video_patch");
    ck.cfg.enc.audio_patch_freq = geti("meta/audio_patch_freq");
    ck.cfg.enc.audio_patch_time = geti("meta/audio_patch_time");
    ck.cfg.enc.mlp_ratio = nn::get_scalar(ck.params, "meta/mlp_ratio");
    ck.cfg.decoder_depth = geti("meta/decoder_depth");
    ck.cfg.embed_targets = geti("meta/embed_targets") != 0;
    ck.cfg.mask_ratio = nn::get_scalar(ck.params, "meta/mask_ratio");
    ck.cfg.block_size = geti("meta/block_size");
    ck.dims.freq_groups = geti("meta/freq_groups");
    ck.dims.audio_steps = geti("meta/audio_steps");
    ck.dims.audio_tokens = ck.dims.freq_groups * ck.dims.audio_steps;
    ck.dims.audio_patch_dim = geti("meta/audio_patch_dim");
    ck.dims.video_frames = geti("meta/video_frames");
    ck.dims.video_patches = geti("meta/video_patches");
    ck.dims.video_patch_dim = geti("meta/video_patch_dim");
    ck.cfg.spec.sample_rate = geti("meta/sample_rate");
    ck.cfg.spec.window = geti("meta/window");
    ck.cfg.spec.hop = geti("meta/hop");
    ck.cfg.spec.n_fft = geti("meta/n_fft");
    ck.cfg.spec.mel_bands = geti("meta/mel_bands");
    ck.cfg.spec.time_frames = geti("meta/time_frames");
    ck.cfg.spec.fmin = nn::get_scalar(ck.params, "meta/fmin");
    ck.cfg.spec.fmax = nn::get_scalar(ck.params, "meta/fmax");
    ck.norm.mean = nn::get_scalar(ck.params, "norm/mean");
    ck.norm.std = nn::get_scalar(ck.params, "norm/std");
    return ck;
}

AlignTrainReport train_align(const data::DatasetIndex& index, const AlignConfig& cfg,
                             const std::string& out_ckpt, const std::string& log_path,
                             const std::string& resume_from) {
    if (index.train.empty() || index.val.empty())
        throw std::invalid_argument("dataset needs nonempty train and val splits");

    data::RawClip probe = data::load_clip(index, index.train[0]);
    AlignDims dims = align_dims(cfg.enc, cfg.spec, probe.video);

    // Warm start: continue from an earlier checkpoint's parameters and
    // normalization instead of a fresh init. Warmup already happened there.
    const bool resumed = !resume_from.empty();
    AlignCheckpoint prior;
    if (resumed) {
        prior = load_align_checkpoint(resume_from);
        if (prior.cfg.enc.embed_dim != cfg.enc.embed_dim ||
            prior.cfg.enc.depth != cfg.enc.depth ||
            prior.cfg.decoder_depth != cfg.decoder_depth ||
            prior.cfg.embed_targets != cfg.embed_targets ||
            prior.dims.audio_tokens != dims.audio_tokens ||
            prior.dims.video_frames != dims.video_frames)
            throw std::invalid_argument("train_align: resume checkpoint geometry mismatch");
    }

    // Cache patch rows for train and val clips. Normalization statistics come
    // from the train split only.
    std::vector<data::SpectrogramTensor> train_specs;
    train_specs.reserve(index.train.size());
    std::vector<ClipCache> train_cache(index.train.size()), val_cache(index.val.size());
    auto load_rows = [&](int clip) {
        data::RawClip raw = data::load_clip(index, clip);
        ClipCache c;
        c.video_rows = enc::video_patch_rows(raw.video, cfg.enc);
        data::SpectrogramTensor spec = data::stft_logmel(raw.audio, cfg.spec);
        return std::make_pair(std::move(c), std::move(spec));
    };
    for (size_t i = 0; i < index.train.size(); ++i) {
        auto [c, spec] = load_rows(index.train[i]);
        train_cache[i] = std::move(c);
        train_specs.push_back(std::move(spec));
    }
    data::NormStats norm = resumed ? prior.norm : data::compute_norm_stats(train_specs);
    for (size_t i = 0; i < index.train.size(); ++i) {
        train_cache[i].audio_rows =
            enc::audio_patch_rows(data::normalize(train_specs[i], norm).values, cfg.enc);
        train_specs[i].values.resize(0, 0);
    }
    train_specs.clear();
    for (size_t i = 0; i < index.val.size(); ++i) {
        auto [c, spec] = load_rows(index.val[i]);
        val_cache[i] = std::move(c);
        val_cache[i].audio_rows = enc::audio_patch_rows(data::normalize(spec, norm).values, cfg.enc);
    }

    nn::ParamStore<float> params;
    init_align_params(params, cfg, dims, derive_seed(cfg.seed, 0));
    if (resumed) params = prior.params;

    // Unimodal warmup: masked reconstruction inside each modality, so both
    // towers produce informative patch embeddings before alignment starts.
    if (!resumed && cfg.warmup && cfg.warmup_steps > 0) {
        nn::Adam<float> opt_a(cfg.lr), opt_v(cfg.lr);
        Rng pick(derive_seed(cfg.seed, 1));
        int wb = std::min<int>(8, static_cast<int>(train_cache.size()));
        for (int step = 0; step < cfg.warmup_steps; ++step) {
            std::vector<int> picks(wb);
            for (int& p : picks)
                p = static_cast<int>(pick.uniform_int(train_cache.size()));
            AlignBatch b = gather_batch(train_cache, picks);
            enc::pretrain_unimodal(b.audio_rows, b.audio_rows, wb, enc::Modality::audio,
                                   cfg.warmup_ratio, cfg.enc, params,
                                   derive_seed(cfg.seed, 0x10000u + step), &opt_a);
            MatF vtargets(wb * dims.video_frames, dims.video_patches * dims.video_patch_dim);
            for (int i = 0; i < wb; ++i)
                vtargets.middleRows(i * dims.video_frames, dims.video_frames) =
                    frame_targets_from_rows(train_cache[picks[i]].video_rows, dims.video_patches);
            enc::pretrain_unimodal(b.video_rows, vtargets, wb, enc::Modality::video,
                                   cfg.warmup_ratio, cfg.enc, params,
                                   derive_seed(cfg.seed, 0x20000u + step), &opt_v);
        }
    }
    if (!resumed) refresh_target_snapshot(params);

    std::ofstream log(log_path);
    if (!log) throw std::runtime_error("cannot open " + log_path);

    auto eval_val = [&]() {
        double acc = 0.0;
        int batches = 0;
        for (size_t at = 0; at < val_cache.size(); at += cfg.batch) {
            std::vector<int> picks;
            for (size_t i = at; i < std::min(val_cache.size(), at + cfg.batch); ++i)
                picks.push_back(static_cast<int>(i));
            std::vector<MaskSpec> masks;
            for (int p : picks)
                masks.push_back(sample_temporal_mask(dims.audio_steps, cfg.mask_ratio,
                                                     cfg.block_size,
                                                     derive_seed(cfg.seed, 0x7A70000u + p)));
            AlignBatch b = gather_batch(val_cache, picks);
            acc += align_step(b, masks, cfg, dims, params, nullptr);
            ++batches;
        }
        return static_cast<float>(acc / std::max(1, batches));
    };

    AlignTrainReport report;
    float best_val = eval_val();
    save_align_checkpoint(out_ckpt, params, cfg, dims, norm);
    report.best_val = best_val;

    nn::Adam<float> opt(cfg.lr);
    Rng shuffle_rng(derive_seed(cfg.seed, 2));
    uint64_t mask_counter = 0;
    int best_epoch = 0;
    std::vector<int> order(train_cache.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

        double train_acc = 0.0;
        int train_batches = 0;
        for (size_t at = 0; at < order.size(); at += cfg.batch) {
            std::vector<int> picks(order.begin() + at,
                                   order.begin() + std::min(order.size(), at + cfg.batch));
            std::vector<MaskSpec> masks;
            masks.reserve(picks.size());
            for (size_t i = 0; i < picks.size(); ++i)
                masks.push_back(sample_temporal_mask(dims.audio_steps, cfg.mask_ratio,
                                                     cfg.block_size,
                                                     derive_seed(cfg.seed, 0xBA7C000u + mask_counter++)));
            AlignBatch b = gather_batch(train_cache, picks);
            float loss = align_step(b, masks, cfg, dims, params, &opt);
            if (!std::isfinite(loss)) {
                report.aborted = true;
                report.epochs = epoch;
                return report;
            }
            train_acc += loss;
            ++train_batches;
        }
        float train_loss = static_cast<float>(train_acc / std::max(1, train_batches));
        float val_loss = eval_val();
        if (!std::isfinite(val_loss)) {
            report.aborted = true;
            report.epochs = epoch;
            return report;
        }

        log << json{{"epoch", epoch}, {"train_loss", train_loss}, {"val_loss", val_loss}}.dump()
            << "\n";
        log.flush();

        report.epochs = epoch;
        if (val_loss < best_val) {
            best_val = val_loss;
            best_epoch = epoch;
            save_align_checkpoint(out_ckpt, params, cfg, dims, norm);
        } else if (epoch - best_epoch >= cfg.patience) {
            break;
        }
    }
    report.best_val = best_val;
    return report;
}

}  // namespace vaflow::align
