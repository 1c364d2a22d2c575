// SPDX-License-Identifier: Apache-2.0
#include "vaflow/flow/flow.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "vaflow/nn/checkpoint.hpp"

namespace vaflow::flow {

using nlohmann::json;

namespace {

nn::ParamStore<float>& mutable_store(const nn::ParamStore<float>& store) {
    return const_cast<nn::ParamStore<float>&>(store);
}

void require_finite(const nn::ParamStore<float>& params) {
    for (const auto& [name, m] : params.tensors)
        if (name.rfind("flow/", 0) == 0 && !m.allFinite())
            throw std::invalid_argument("non-finite values in parameter " + name);
}

}  // namespace

FlowDims flow_dims(const enc::EncoderConfig& enc_cfg, const data::SpectroConfig& spec_cfg) {
    if (spec_cfg.mel_bands % enc_cfg.audio_patch_freq != 0 ||
        spec_cfg.time_frames % enc_cfg.audio_patch_time != 0)
        throw std::invalid_argument("audio patch size does not divide the spectrogram");
    FlowDims d;
    d.freq_groups = spec_cfg.mel_bands / enc_cfg.audio_patch_freq;
    d.time_steps = spec_cfg.time_frames / enc_cfg.audio_patch_time;
    d.tokens = d.freq_groups * d.time_steps;
    d.patch_dim = enc_cfg.audio_patch_freq * enc_cfg.audio_patch_time;
    return d;
}

MatF interpolate_path(const MatF& x0, const MatF& x1, float t) {
    if (x0.rows() != x1.rows() || x0.cols() != x1.cols())
        throw std::invalid_argument("interpolate_path: shape mismatch");
    if (!(t >= 0.0f && t <= 1.0f))
        throw std::invalid_argument("interpolate_path: t outside [0,1]");
    return (1.0f - t) * x0 + t * x1;
}

MatF target_velocity(const MatF& x0, const MatF& x1) {
    if (x0.rows() != x1.rows() || x0.cols() != x1.cols())
        throw std::invalid_argument("target_velocity: shape mismatch");
    return x1 - x0;
}

MatF condition_schedule(const std::vector<float>& token_times,
                        const std::vector<float>& segment_times, float lambda) {
    if (token_times.empty() || segment_times.empty())
        throw std::invalid_argument("condition_schedule: empty time grid");
    if (!std::is_sorted(segment_times.begin(), segment_times.end()))
        throw std::invalid_argument("condition_schedule: segment times must be sorted");
    MatF bias(static_cast<Eigen::Index>(token_times.size()),
              static_cast<Eigen::Index>(segment_times.size()));
    for (Eigen::Index i = 0; i < bias.rows(); ++i)
        for (Eigen::Index j = 0; j < bias.cols(); ++j)
            bias(i, j) = -lambda * std::abs(token_times[i] - segment_times[j]);
    return bias;
}

std::vector<int> nearest_segments(const MatF& bias) {
    std::vector<int> best(bias.rows());
    for (Eigen::Index i = 0; i < bias.rows(); ++i) {
        int arg = 0;
        for (Eigen::Index j = 1; j < bias.cols(); ++j)
            if (bias(i, j) > bias(i, arg)) arg = static_cast<int>(j);
        best[i] = arg;
    }
    return best;
}

std::vector<float> flow_token_times(const FlowConfig& cfg) {
    FlowDims d = flow_dims(cfg.enc, cfg.spec);
    size_t samples =
        static_cast<size_t>(std::llround(static_cast<double>(cfg.clip_seconds) * cfg.spec.sample_rate));
    float origin =
        std::max(0, cfg.spec.crop_offset(samples)) * static_cast<float>(cfg.spec.hop_seconds());
    std::vector<float> times(static_cast<size_t>(d.tokens));
    for (int s = 0; s < d.time_steps; ++s) {
        float mid = origin + (s * cfg.enc.audio_patch_time + (cfg.enc.audio_patch_time - 1) * 0.5f) *
                                 static_cast<float>(cfg.spec.hop_seconds());
        for (int f = 0; f < d.freq_groups; ++f) times[s * d.freq_groups + f] = mid;
    }
    return times;
}

MatD sinusoidal_embed(double t, int dim) {
    if (dim < 2) throw std::invalid_argument("sinusoidal_embed: dim must be at least 2");
    MatD e = MatD::Zero(1, dim);
    int half = dim / 2;
    // t lives in [0,1]; spread it to a [0,1000] phase range so the fastest
    // channels resolve fine time differences and the slowest stay monotone.
    double scaled = 1000.0 * t;
    for (int i = 0; i < half; ++i) {
        double omega = std::exp(-std::log(10000.0) * i / half);
        e(0, i) = std::sin(scaled * omega);
        e(0, half + i) = std::cos(scaled * omega);
    }
    return e;
}

void init_flow_params(nn::ParamStore<float>& store, const FlowConfig& cfg, uint64_t seed) {
    FlowDims d = flow_dims(cfg.enc, cfg.spec);
    Rng rng(seed);
    store.add_glorot("flow/patch_w", d.patch_dim, cfg.enc.embed_dim, rng);
    store.add_zeros("flow/patch_b", 1, cfg.enc.embed_dim);
    store.add_normal("flow/pos", d.tokens, cfg.enc.embed_dim, rng, 0.02);
    for (int blk = 0; blk < cfg.enc.depth; ++blk)
        nn::add_cross_block_params(store, rng, cfg.enc.block(), "flow/blk" + std::to_string(blk));
    // Zero head: the initial field is exactly v = 0, so training starts at
    // the noise-to-data baseline instead of an arbitrary offset.
    store.add_zeros("flow/head_w", cfg.enc.embed_dim, d.patch_dim);
    store.add_zeros("flow/head_b", 1, d.patch_dim);
}

MatF unpatchify_audio(const MatF& rows, const enc::EncoderConfig& cfg,
                      const data::SpectroConfig& spec_cfg) {
    FlowDims d = flow_dims(cfg, spec_cfg);
    if (rows.rows() != d.tokens || rows.cols() != d.patch_dim)
        throw std::invalid_argument("unpatchify_audio: row shape does not match geometry");
    MatF spec(spec_cfg.mel_bands, spec_cfg.time_frames);
    int pf = cfg.audio_patch_freq, pt = cfg.audio_patch_time;
    for (int s = 0; s < d.time_steps; ++s)
        for (int f = 0; f < d.freq_groups; ++f) {
            int r = s * d.freq_groups + f;
            for (int fr = 0; fr < pf; ++fr)
                for (int tc = 0; tc < pt; ++tc)
                    spec(f * pf + fr, s * pt + tc) = rows(r, fr * pt + tc);
        }
    return spec;
}

MatF velocity_field(const MatF& x_t, float t, const enc::SegmentFeatures& cond,
                    const FlowConfig& cfg, const nn::ParamStore<float>& params) {
    if (!x_t.allFinite()) throw std::invalid_argument("velocity_field: non-finite input");
    if (!(t >= 0.0f && t <= 1.0f))
        throw std::invalid_argument("velocity_field: t outside [0,1]");
    if (cond.segments.rows() < 1)
        throw std::invalid_argument("velocity_field: condition needs at least one segment");
    if (cond.segments.cols() != cfg.enc.embed_dim)
        throw std::invalid_argument("velocity_field: condition dim does not match the model");
    require_finite(params);

    MatF rows = enc::audio_patch_rows(x_t, cfg.enc);
    MatF bias = condition_schedule(flow_token_times(cfg), cond.segment_times, cfg.lambda);

    nn::Tape<float> tape(mutable_store(params));
    nn::Params<float> P{&tape, false};
    auto v = velocity_graph(P, rows, std::vector<float>{t}, cond.segments, 1, bias, cfg.enc);
    if (!v->value.allFinite()) throw std::runtime_error("velocity_field: non-finite output");
    return unpatchify_audio(v->value, cfg.enc, cfg.spec);
}

float flow_loss(const FlowBatch& batch, const FlowConfig& cfg, nn::ParamStore<float>& params,
                uint64_t seed, nn::Adam<float>* opt) {
    FlowDims d = flow_dims(cfg.enc, cfg.spec);
    if (batch.clips <= 0 || batch.x1_rows.rows() != batch.clips * d.tokens ||
        batch.x1_rows.cols() != d.patch_dim)
        throw std::invalid_argument("flow_loss: batch shape does not match geometry");
    if (batch.cond_rows.rows() % batch.clips != 0 ||
        batch.cond_rows.cols() != cfg.enc.embed_dim)
        throw std::invalid_argument("flow_loss: condition shape does not match geometry");

    // Noise and time per sample, keyed by (seed, sample index) so the draw
    // does not depend on how the corpus was sharded into batches.
    MatF x0(batch.x1_rows.rows(), batch.x1_rows.cols());
    std::vector<float> ts(batch.clips);
    for (int b = 0; b < batch.clips; ++b) {
        Rng rng(derive_seed(seed, static_cast<uint64_t>(b)));
        ts[b] = static_cast<float>(rng.uniform());
        auto block = x0.middleRows(b * d.tokens, d.tokens);
        for (Eigen::Index r = 0; r < block.rows(); ++r)
            for (Eigen::Index c = 0; c < block.cols(); ++c)
                block(r, c) = static_cast<float>(rng.normal());
    }
    MatF x_t(x0.rows(), x0.cols());
    for (int b = 0; b < batch.clips; ++b)
        x_t.middleRows(b * d.tokens, d.tokens) =
            interpolate_path(x0.middleRows(b * d.tokens, d.tokens),
                             batch.x1_rows.middleRows(b * d.tokens, d.tokens), ts[b]);
    MatF target = target_velocity(x0, batch.x1_rows);

    nn::Tape<float> tape(params);
    nn::Params<float> P{&tape, true};
    auto v = velocity_graph(P, x_t, ts, batch.cond_rows, batch.clips, batch.bias, cfg.enc);
    auto loss = nn::mse_vs(v, target);
    float value = loss->value(0, 0);
    if (opt && std::isfinite(value)) {
        nn::backward(loss);
        opt->step(tape);
    }
    return value;
}

MatF euler_integrate(const std::function<MatF(const MatF&, float)>& velocity, MatF x, int steps) {
    if (steps < 1) throw std::invalid_argument("euler_integrate: steps must be at least 1");
    float dt = 1.0f / static_cast<float>(steps);
    for (int k = 0; k < steps; ++k)
        x += dt * velocity(x, static_cast<float>(k) / static_cast<float>(steps));
    return x;
}

MatF sample_euler(const enc::SegmentFeatures& cond, const SamplerConfig& sampler,
                  const FlowConfig& cfg, const nn::ParamStore<float>& params) {
    if (sampler.steps < 1) throw std::invalid_argument("sample_euler: steps must be at least 1");
    if (sampler.mode == SampleMode::single_step && sampler.steps != 1)
        throw std::invalid_argument("sample_euler: single_step mode requires steps == 1");
    Rng rng(sampler.seed);
    MatF x(cfg.spec.mel_bands, cfg.spec.time_frames);
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = static_cast<float>(rng.normal());
    return euler_integrate(
        [&](const MatF& y, float t) { return velocity_field(y, t, cond, cfg, params); },
        std::move(x), sampler.steps);
}

namespace {

struct FlowClipCache {
    MatF x1_rows;
    MatF cond_rows;
};

FlowBatch gather_batch(const std::vector<FlowClipCache>& cache, const std::vector<int>& picks,
                       const MatF& bias) {
    FlowBatch b;
    b.clips = static_cast<int>(picks.size());
    Eigen::Index xr = cache[picks[0]].x1_rows.rows();
    Eigen::Index cr = cache[picks[0]].cond_rows.rows();
    b.x1_rows.resize(b.clips * xr, cache[picks[0]].x1_rows.cols());
    b.cond_rows.resize(b.clips * cr, cache[picks[0]].cond_rows.cols());
    for (int i = 0; i < b.clips; ++i) {
        b.x1_rows.middleRows(i * xr, xr) = cache[picks[i]].x1_rows;
        b.cond_rows.middleRows(i * cr, cr) = cache[picks[i]].cond_rows;
    }
    b.bias = bias;
    return b;
}

void save_flow_checkpoint(const std::string& path, const nn::ParamStore<float>& params,
                          const FlowConfig& cfg) {
    nn::ParamStore<float> out = params;
    auto put = [&](const std::string& name, double v) {
        out.tensors.erase(name);
        nn::put_scalar(out, name, static_cast<float>(v));
    };
    put("meta/embed_dim", cfg.enc.embed_dim);
    put("meta/depth", cfg.enc.depth);
    put("meta/heads", cfg.enc.heads);
    put("meta/mlp_ratio", cfg.enc.mlp_ratio);
    put("meta/audio_patch_freq", cfg.enc.audio_patch_freq);
    put("meta/audio_patch_time", cfg.enc.audio_patch_time);
    put("meta/clip_seconds", cfg.clip_seconds);
    put("meta/segments", cfg.segments);
    put("meta/lambda", cfg.lambda);
    put("meta/sample_rate", cfg.spec.sample_rate);
    put("meta/window", cfg.spec.window);
    put("meta/hop", cfg.spec.hop);
    put("meta/n_fft", cfg.spec.n_fft);
    put("meta/mel_bands", cfg.spec.mel_bands);
    put("meta/time_frames", cfg.spec.time_frames);
    put("meta/fmin", cfg.spec.fmin);
    put("meta/fmax", cfg.spec.fmax);
    nn::save_checkpoint(path, out);
}

}  // namespace

FlowCheckpoint load_flow_checkpoint(const std::string& path) {
    FlowCheckpoint ck;
    ck.params = nn::load_checkpoint(path);
    auto geti = [&](const std::string& name) {
        return static_cast<int>(std::lround(nn::get_scalar(ck.params, name)));
    };
    ck.cfg.enc.embed_dim = geti("meta/embed_dim");
    ck.cfg.enc.depth = geti("meta/depth");
    ck.cfg.enc.heads = geti("meta/heads");
    ck.cfg.enc.mlp_ratio = nn::get_scalar(ck.params, "meta/mlp_ratio");
    ck.cfg.enc.audio_patch_freq = geti("meta/audio_patch_freq");
    ck.cfg.enc.audio_patch_time = geti("meta/audio_patch_time");
    ck.cfg.clip_seconds = nn::get_scalar(ck.params, "meta/clip_seconds");
    ck.cfg.segments = geti("meta/segments");
    ck.cfg.lambda = nn::get_scalar(ck.params, "meta/lambda");
    ck.cfg.spec.sample_rate = geti("meta/sample_rate");
    ck.cfg.spec.window = geti("meta/window");
    ck.cfg.spec.hop = geti("meta/hop");
    ck.cfg.spec.n_fft = geti("meta/n_fft");
    ck.cfg.spec.mel_bands = geti("meta/mel_bands");
    ck.cfg.spec.time_frames = geti("meta/time_frames");
    ck.cfg.spec.fmin = nn::get_scalar(ck.params, "meta/fmin");
    ck.cfg.spec.fmax = nn::get_scalar(ck.params, "meta/fmax");
    return ck;
}

FlowTrainReport train_flow(const data::DatasetIndex& index, const align::AlignCheckpoint& tower,
                           FlowConfig cfg, const std::string& out_ckpt,
                           const std::string& log_path, const std::string& resume_from) {
    if (index.train.empty() || index.val.empty())
        throw std::invalid_argument("dataset needs nonempty train and val splits");
    if (cfg.enc.embed_dim != tower.cfg.enc.embed_dim)
        throw std::invalid_argument("flow embed_dim must match the alignment tower");
    if (cfg.segments < 1 || cfg.segments > tower.dims.video_frames)
        throw std::invalid_argument("segment count must be in [1, video frames]");
    // Spectrogram geometry and normalization are owned by the stage-1
    // checkpoint; the flow trains and samples in exactly those units.
    cfg.spec = tower.cfg.spec;

    // Encode every clip through the frozen tower once; only pooled segment
    // features and normalized audio patches enter the training loop.
    std::vector<float> segment_times;
    auto load_cache = [&](int clip) {
        data::RawClip raw = data::load_clip(index, clip);
        FlowClipCache c;
        data::SpectrogramTensor spec = data::stft_logmel(raw.audio, cfg.spec);
        c.x1_rows = enc::audio_patch_rows(data::normalize(spec, tower.norm).values, cfg.enc);
        enc::SegmentFeatures seg = enc::pool_segments(
            align::video_features(raw.video, tower.cfg.enc, tower.params), cfg.segments);
        c.cond_rows = seg.segments;
        if (segment_times.empty()) segment_times = seg.segment_times;
        return c;
    };
    std::vector<FlowClipCache> train_cache(index.train.size()), val_cache(index.val.size());
    for (size_t i = 0; i < index.train.size(); ++i) train_cache[i] = load_cache(index.train[i]);
    for (size_t i = 0; i < index.val.size(); ++i) val_cache[i] = load_cache(index.val[i]);

    MatF bias = condition_schedule(flow_token_times(cfg), segment_times, cfg.lambda);

    nn::ParamStore<float> params;
    init_flow_params(params, cfg, derive_seed(cfg.seed, 0));
    if (!resume_from.empty()) {
        // Warm start from an earlier run of the same geometry.
        FlowCheckpoint prior = load_flow_checkpoint(resume_from);
        if (prior.cfg.enc.embed_dim != cfg.enc.embed_dim || prior.cfg.enc.depth != cfg.enc.depth ||
            prior.cfg.segments != cfg.segments ||
            prior.cfg.spec.mel_bands != cfg.spec.mel_bands ||
            prior.cfg.spec.time_frames != cfg.spec.time_frames)
            throw std::invalid_argument("train_flow: resume checkpoint geometry mismatch");
        params = prior.params;
    }

    std::ofstream log(log_path);
    if (!log) throw std::runtime_error("cannot open " + log_path);

    auto eval_val = [&]() {
        double acc = 0.0;
        int batches = 0;
        for (size_t at = 0; at < val_cache.size(); at += cfg.batch) {
            std::vector<int> picks;
            for (size_t i = at; i < std::min(val_cache.size(), at + cfg.batch); ++i)
                picks.push_back(static_cast<int>(i));
            FlowBatch b = gather_batch(val_cache, picks, bias);
            acc += flow_loss(b, cfg, params, derive_seed(cfg.seed, 0x7A10000u + batches), nullptr);
            ++batches;
        }
        return static_cast<float>(acc / std::max(1, batches));
    };

    FlowTrainReport report;
    float best_val = eval_val();
    save_flow_checkpoint(out_ckpt, params, cfg);
    report.best_val = best_val;

    nn::Adam<float> opt(cfg.lr);
    Rng shuffle_rng(derive_seed(cfg.seed, 2));
    uint64_t step_counter = 0;
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
            FlowBatch b = gather_batch(train_cache, picks, bias);
            float loss =
                flow_loss(b, cfg, params, derive_seed(cfg.seed, 0xF100000u + step_counter++), &opt);
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
            save_flow_checkpoint(out_ckpt, params, cfg);
        } else if (epoch - best_epoch >= cfg.patience) {
            break;
        }
    }
    report.best_val = best_val;
    return report;
}

data::WaveBuffer generate(const data::FrameSequence& video, const align::AlignCheckpoint& tower,
                          const FlowCheckpoint& flow, const SamplerConfig& sampler,
                          int gl_iterations) {
    float video_seconds = static_cast<float>(video.frames) / video.fps;
    if (std::abs(video_seconds - flow.cfg.clip_seconds) > 1e-3f)
        throw std::invalid_argument("generate: video duration does not match the clip length");
    if (tower.cfg.enc.embed_dim != flow.cfg.enc.embed_dim)
        throw std::invalid_argument("generate: checkpoints disagree on embed_dim");

    enc::SegmentFeatures cond = enc::pool_segments(
        align::video_features(video, tower.cfg.enc, tower.params), flow.cfg.segments);
    MatF spec_values = sample_euler(cond, sampler, flow.cfg, flow.params);

    data::SpectrogramTensor spec;
    spec.values = spec_values;
    spec.hop_seconds = static_cast<float>(flow.cfg.spec.hop_seconds());
    spec = data::denormalize(spec, tower.norm);
    // Log magnitudes are nonnegative by construction; clamp model undershoot
    // onto the valid domain before phase retrieval.
    spec.values = spec.values.cwiseMax(0.0f);
    data::WaveBuffer synth = data::griffin_lim(spec, flow.cfg.spec, gl_iterations);

    data::WaveBuffer out;
    out.sample_rate = flow.cfg.spec.sample_rate;
    size_t total = static_cast<size_t>(
        std::llround(static_cast<double>(flow.cfg.clip_seconds) * flow.cfg.spec.sample_rate));
    out.samples.assign(total, 0.0f);
    size_t offset =
        static_cast<size_t>(std::max(0, flow.cfg.spec.crop_offset(total))) * flow.cfg.spec.hop;
    for (size_t i = 0; i < synth.samples.size() && offset + i < total; ++i)
        out.samples[offset + i] = synth.samples[i];
    return out;
}

}  // namespace vaflow::flow
