// SPDX-License-Identifier: Apache-2.0
#include "vaflow/cli/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vaflow/align/align.hpp"
#include "vaflow/cli/plot.hpp"
#include "vaflow/common.hpp"
#include "vaflow/data/clip.hpp"
#include "vaflow/data/dataset.hpp"
#include "vaflow/data/dsp.hpp"
#include "vaflow/flow/flow.hpp"

namespace vaflow::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string parent_dir(const std::string& path) {
    fs::path parent = fs::path(path).parent_path();
    return parent.empty() ? std::string(".") : parent.string();
}

std::string clip_name(const data::DatasetIndex& index, int clip) {
    return fs::path(index.clip_dir(clip)).filename().string();
}

std::vector<int> split_clips(const data::DatasetIndex& index, const std::string& split) {
    if (split == "train") return index.train;
    if (split == "val") return index.val;
    if (split == "test") return index.test;
    if (split == "all") {
        std::vector<int> all(static_cast<size_t>(index.size()));
        for (int i = 0; i < index.size(); ++i) all[static_cast<size_t>(i)] = i;
        return all;
    }
    throw UsageError("unknown split '" + split + "', expected train, val, test or all");
}

data::FrameSequence clip_video(const data::DatasetIndex& index, int clip) {
    return data::load_frames(index.clip_dir(clip) + "/frames.bin", index.config.synth.video_fps);
}

// Loads the gate model from path when present, otherwise trains it on the
// dataset and saves it there. A model below its accuracy gate is a gate
// failure either way: metrics computed through it would be meaningless.
metrics::EmbedderCheckpoint ensure_embedder(const RunConfig& cfg, const data::DatasetIndex& index,
                                            const std::string& path) {
    if (fs::exists(path)) {
        metrics::EmbedderCheckpoint ckpt = metrics::load_embedder(path);
        if (!ckpt.certified)
            throw GateError("embedder checkpoint below its accuracy gate: " + path);
        return ckpt;
    }
    metrics::EmbedderCheckpoint ckpt = metrics::train_embedder(index, build_embedder_config(cfg));
    if (!ckpt.certified)
        throw GateError("embedder gate missed: test accuracy " +
                        std::to_string(ckpt.test_accuracy));
    fs::create_directories(parent_dir(path));
    metrics::save_embedder(path, ckpt);
    return ckpt;
}

metrics::SyncCheckpoint ensure_sync(const RunConfig& cfg, const data::DatasetIndex& index,
                                    const std::string& path) {
    if (fs::exists(path)) {
        metrics::SyncCheckpoint ckpt = metrics::load_sync(path);
        if (!ckpt.certified)
            throw GateError("sync checkpoint below its accuracy gate: " + path);
        return ckpt;
    }
    metrics::SyncCheckpoint ckpt = metrics::train_sync_classifier(index, build_sync_config(cfg));
    if (!ckpt.certified)
        throw GateError("sync gate missed: test accuracy " + std::to_string(ckpt.test_accuracy));
    fs::create_directories(parent_dir(path));
    metrics::save_sync(path, ckpt);
    return ckpt;
}

struct GeneratedSet {
    std::vector<int> clips;  // dataset indices that have a wav in gen_dir
    std::vector<data::WaveBuffer> waves;
};

GeneratedSet load_generated(const data::DatasetIndex& index, const std::string& gen_dir) {
    GeneratedSet out;
    for (int clip = 0; clip < index.size(); ++clip) {
        fs::path wav = fs::path(gen_dir) / (clip_name(index, clip) + ".wav");
        if (!fs::exists(wav)) continue;
        out.clips.push_back(clip);
        out.waves.push_back(data::load_wav(wav.string()));
    }
    if (out.clips.empty())
        throw std::runtime_error("no generated clips matching the dataset under " + gen_dir);
    return out;
}

void write_report_json(const std::string& path, const EvalSummary& s,
                       const flow::SamplerConfig& sampler) {
    json j = json::parse(metrics::report_to_json(s.report));
    j["class_accuracy"] = s.class_accuracy;
    j["clips"] = s.clips;
    j["sampler_steps"] = sampler.steps;
    j["sampler_mode"] =
        sampler.mode == flow::SampleMode::single_step ? "single_step" : "euler_multi";
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write report to " + path);
    out << j.dump(2) << "\n";
}

// One JSONL training log (epoch, train_loss, val_loss) into two plot series.
void append_loss_series(const std::string& log_path, const std::string& stage,
                        std::vector<Series>& series) {
    std::ifstream in(log_path);
    if (!in) throw std::runtime_error("cannot read loss log " + log_path);
    Series train{stage + " train", {}};
    Series val{stage + " val", {}};
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        train.values.push_back(j.at("train_loss").get<double>());
        val.values.push_back(j.at("val_loss").get<double>());
    }
    if (train.values.empty()) throw std::runtime_error("empty loss log " + log_path);
    series.push_back(std::move(train));
    series.push_back(std::move(val));
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_generate_data(const RunConfig& cfg, const std::string& out) {
    if (cfg.get_int("data.clips") < 1) throw UsageError("data.clips must be at least 1");
    data::DatasetConfig dc = build_dataset_config(cfg);
    data::generate_dataset(dc, out);
    write_resolved(cfg, out);
    std::cout << "wrote " << dc.clips << " clips under " << out << "\n";
    return 0;
}

int cmd_train_align(const RunConfig& cfg, const std::string& data_root,
                    const std::string& out_ckpt, const std::string& resume) {
    data::DatasetIndex index = data::load_dataset(data_root);
    std::string dir = parent_dir(out_ckpt);
    fs::create_directories(dir);
    write_resolved(cfg, dir);
    align::AlignTrainReport rep = align::train_align(index, build_align_config(cfg), out_ckpt,
                                                     dir + "/align_log.jsonl", resume);
    if (rep.aborted)
        throw std::runtime_error("alignment training aborted on a non-finite loss");
    std::cout << "align: " << rep.epochs << " epochs, best val " << rep.best_val << "\n";
    return 0;
}

int cmd_train_flow(const RunConfig& cfg, const std::string& data_root,
                   const std::string& align_ckpt, const std::string& out_ckpt,
                   const std::string& resume) {
    data::DatasetIndex index = data::load_dataset(data_root);
    align::AlignCheckpoint tower = align::load_align_checkpoint(align_ckpt);
    flow::FlowConfig fc = build_flow_config(cfg);
    // The velocity net reads tokens and conditions in the tower's units, so
    // its transformer geometry follows the stage-1 checkpoint, not the flags.
    fc.enc = tower.cfg.enc;
    std::string dir = parent_dir(out_ckpt);
    fs::create_directories(dir);
    write_resolved(cfg, dir);
    flow::FlowTrainReport rep =
        flow::train_flow(index, tower, fc, out_ckpt, dir + "/flow_log.jsonl", resume);
    if (rep.aborted) throw std::runtime_error("flow training aborted on a non-finite loss");
    std::cout << "flow: " << rep.epochs << " epochs, best val " << rep.best_val << "\n";
    return 0;
}

int cmd_generate(const RunConfig& cfg, const std::string& data_root,
                 const std::string& align_ckpt, const std::string& flow_ckpt,
                 const std::string& split, const std::string& out) {
    data::DatasetIndex index = data::load_dataset(data_root);
    if (!fs::exists(align_ckpt))
        throw std::runtime_error("missing alignment checkpoint: " + align_ckpt);
    if (!fs::exists(flow_ckpt)) throw std::runtime_error("missing flow checkpoint: " + flow_ckpt);
    align::AlignCheckpoint tower = align::load_align_checkpoint(align_ckpt);
    flow::FlowCheckpoint fck = flow::load_flow_checkpoint(flow_ckpt);
    flow::SamplerConfig sampler = build_sampler_config(cfg);
    int gl = cfg.get_int("gl.iterations");

    std::vector<int> clips = split_clips(index, split);
    fs::create_directories(out);
    write_resolved(cfg, out);
    for (int clip : clips) {
        std::string name = clip_name(index, clip);
        flow::SamplerConfig per_clip = sampler;
        per_clip.seed = derive_seed(cfg.seed(), fnv1a64(name));
        data::WaveBuffer wave = flow::generate(clip_video(index, clip), tower, fck, per_clip, gl);
        data::save_wav((fs::path(out) / (name + ".wav")).string(), wave);
    }
    std::cout << "generated " << clips.size() << " clips into " << out << "\n";
    return 0;
}

struct EvaluateArgs {
    std::string data_root;
    std::string gen_dir;
    std::string embedder;
    std::string sync;
    std::string out;        // report.json path
    std::string align_ckpt; // with flow_ckpt, enables the timing measurement
    std::string flow_ckpt;
    std::string align_log;  // optional loss logs for the curve plot
    std::string flow_log;
};

int cmd_evaluate(const RunConfig& cfg, const EvaluateArgs& a) {
    data::DatasetIndex index = data::load_dataset(a.data_root);
    metrics::EmbedderCheckpoint emb = ensure_embedder(cfg, index, a.embedder);
    metrics::SyncCheckpoint sync = ensure_sync(cfg, index, a.sync);

    GeneratedSet gen = load_generated(index, a.gen_dir);
    EvalSummary s = evaluate_generated(index, gen.clips, gen.waves, emb, sync,
                                       cfg.get_real("eval.onset_tol"),
                                       digest_hex(cfg.resolved_text()));

    flow::SamplerConfig sampler = build_sampler_config(cfg);
    if (!a.align_ckpt.empty() && !a.flow_ckpt.empty()) {
        align::AlignCheckpoint tower = align::load_align_checkpoint(a.align_ckpt);
        flow::FlowCheckpoint fck = flow::load_flow_checkpoint(a.flow_ckpt);
        int n = std::min(cfg.get_int("eval.timing_clips"), static_cast<int>(gen.clips.size()));
        std::vector<data::FrameSequence> videos;
        videos.reserve(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) videos.push_back(clip_video(index, gen.clips[i]));
        metrics::TimingReport t = metrics::time_generation(
            [&](int i) {
                flow::SamplerConfig per_run = sampler;
                per_run.seed = derive_seed(sampler.seed, static_cast<uint64_t>(i));
                flow::generate(videos[static_cast<size_t>(i % n)], tower, fck, per_run,
                               cfg.get_int("gl.iterations"));
            },
            n);
        s.report.gen_seconds_per_clip = t.mean_seconds;
        s.report.gen_seconds_variance = t.variance_seconds;
    }

    std::string dir = parent_dir(a.out);
    fs::create_directories(dir);
    write_resolved(cfg, dir);
    write_report_json(a.out, s, sampler);
    write_bar_chart(dir + "/metrics.svg", "held-out metrics",
                    {"kld", "fad", "align_acc", "onset_f1", "class_acc"},
                    {s.report.kld, s.report.fad, s.report.align_accuracy, s.report.onset_f1,
                     s.class_accuracy});
    std::vector<Series> curves;
    if (!a.align_log.empty()) append_loss_series(a.align_log, "align", curves);
    if (!a.flow_log.empty()) append_loss_series(a.flow_log, "flow", curves);
    if (!curves.empty()) write_line_chart(dir + "/loss_curves.svg", "training loss", curves);

    std::cout << "kld " << s.report.kld << "  fad " << s.report.fad << "  align_acc "
              << s.report.align_accuracy << "  onset_f1 " << s.report.onset_f1 << "  class_acc "
              << s.class_accuracy << " over " << s.clips << " clips\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Ablation arms

// Direct video-to-spectrogram regression through the alignment decoder, the
// generator-free arm: every audio step except the first is masked, the one
// visible step carries silence, and the decoder must paint the rest from
// video features alone. Requires a tower trained on raw spectrogram targets.
data::WaveBuffer generate_direct(const data::FrameSequence& video,
                                 const align::AlignCheckpoint& tower, int gl_iterations) {
    if (tower.cfg.embed_targets)
        throw std::invalid_argument(
            "generate_direct: tower must be trained on spectrogram targets");
    const data::SpectroConfig& sc = tower.cfg.spec;

    data::SpectrogramTensor silence;
    silence.values = MatF::Zero(sc.mel_bands, sc.time_frames);
    silence.hop_seconds = static_cast<float>(sc.hop_seconds());
    data::SpectrogramTensor seeded = data::normalize(silence, tower.norm);

    align::MaskSpec mask;
    mask.unmasked_idx = {0};
    for (int s = 1; s < tower.dims.audio_steps; ++s) mask.masked_idx.push_back(s);
    mask.ratio = static_cast<float>(mask.masked_idx.size()) /
                 static_cast<float>(tower.dims.audio_steps);
    mask.block_size = 1;

    enc::TokenSequence audio_tokens = enc::patchify_audio(seeded, tower.cfg.enc, tower.params);
    enc::TokenSequence vid = align::video_features(video, tower.cfg.enc, tower.params);
    MatF pred = align::reconstruct_masked(vid, audio_tokens, mask, tower.cfg, tower.params);

    MatF rows = enc::audio_patch_rows(seeded.values, tower.cfg.enc);
    std::vector<int> mask_rows =
        align::masked_token_rows({mask}, tower.dims.freq_groups, tower.dims.audio_tokens);
    for (size_t i = 0; i < mask_rows.size(); ++i)
        rows.row(mask_rows[i]) = pred.row(static_cast<Eigen::Index>(i));

    data::SpectrogramTensor spec;
    spec.values = flow::unpatchify_audio(rows, tower.cfg.enc, sc);
    spec.hop_seconds = silence.hop_seconds;
    spec = data::denormalize(spec, tower.norm);
    spec.values = spec.values.cwiseMax(0.0f);
    data::WaveBuffer synth = data::griffin_lim(spec, sc, gl_iterations);

    float clip_seconds = static_cast<float>(video.frames) / video.fps;
    data::WaveBuffer out;
    out.sample_rate = sc.sample_rate;
    size_t total =
        static_cast<size_t>(std::llround(static_cast<double>(clip_seconds) * sc.sample_rate));
    out.samples.assign(total, 0.0f);
    size_t offset = static_cast<size_t>(std::max(0, sc.crop_offset(total))) *
                    static_cast<size_t>(sc.hop);
    for (size_t i = 0; i < synth.samples.size() && offset + i < total; ++i)
        out.samples[offset + i] = synth.samples[i];
    return out;
}

// Loads the arm's stage-1 checkpoint, training it first when absent.
align::AlignCheckpoint arm_align(const RunConfig& cfg, const data::DatasetIndex& index,
                                 const fs::path& arm_dir, float mask_ratio, bool embed_targets) {
    std::string ckpt = (arm_dir / "align.ckpt").string();
    if (!fs::exists(ckpt)) {
        fs::create_directories(arm_dir);
        align::AlignConfig ac = build_align_config(cfg);
        ac.mask_ratio = mask_ratio;
        ac.embed_targets = embed_targets;
        align::AlignTrainReport rep =
            align::train_align(index, ac, ckpt, (arm_dir / "align_log.jsonl").string());
        if (rep.aborted)
            throw std::runtime_error("alignment training aborted in " + arm_dir.string());
    }
    return align::load_align_checkpoint(ckpt);
}

// Freshly initialized tower, never trained: the conditioning source for the
// arm that removes stage-1 alignment. Normalization still comes from the
// train split so the flow sees sane spectrogram units.
align::AlignCheckpoint arm_untrained_tower(const RunConfig& cfg, const data::DatasetIndex& index,
                                           const fs::path& arm_dir) {
    std::string ckpt = (arm_dir / "align.ckpt").string();
    if (!fs::exists(ckpt)) {
        fs::create_directories(arm_dir);
        align::AlignConfig ac = build_align_config(cfg);
        data::RawClip probe = data::load_clip(index, index.train.at(0));
        align::AlignDims dims = align::align_dims(ac.enc, ac.spec, probe.video);
        std::vector<data::SpectrogramTensor> specs;
        specs.reserve(index.train.size());
        for (int clip : index.train)
            specs.push_back(data::stft_logmel(data::load_clip(index, clip).audio, ac.spec));
        nn::ParamStore<float> params;
        align::init_align_params(params, ac, dims, derive_seed(ac.seed, 0));
        align::save_align_checkpoint(ckpt, params, ac, dims, data::compute_norm_stats(specs));
    }
    return align::load_align_checkpoint(ckpt);
}

flow::FlowCheckpoint arm_flow(const RunConfig& cfg, const data::DatasetIndex& index,
                              const align::AlignCheckpoint& tower, const fs::path& arm_dir,
                              int segments) {
    std::string ckpt = (arm_dir / "flow.ckpt").string();
    if (!fs::exists(ckpt)) {
        fs::create_directories(arm_dir);
        flow::FlowConfig fc = build_flow_config(cfg);
        fc.enc = tower.cfg.enc;
        fc.segments = segments;
        flow::FlowTrainReport rep = flow::train_flow(index, tower, fc, ckpt,
                                                     (arm_dir / "flow_log.jsonl").string());
        if (rep.aborted) throw std::runtime_error("flow training aborted in " + arm_dir.string());
    }
    return flow::load_flow_checkpoint(ckpt);
}

// Generates (or reloads) the arm's corpus over the given clips. A null flow
// checkpoint selects the direct-regression path.
std::vector<data::WaveBuffer> arm_corpus(const RunConfig& cfg, const data::DatasetIndex& index,
                                         const std::vector<int>& clips,
                                         const align::AlignCheckpoint& tower,
                                         const flow::FlowCheckpoint* fck, const fs::path& gen_dir) {
    flow::SamplerConfig sampler = build_sampler_config(cfg);
    int gl = cfg.get_int("gl.iterations");
    fs::create_directories(gen_dir);
    std::vector<data::WaveBuffer> waves;
    waves.reserve(clips.size());
    for (int clip : clips) {
        std::string name = clip_name(index, clip);
        fs::path wav = gen_dir / (name + ".wav");
        if (fs::exists(wav)) {
            waves.push_back(data::load_wav(wav.string()));
            continue;
        }
        data::FrameSequence video = clip_video(index, clip);
        data::WaveBuffer w;
        if (fck != nullptr) {
            flow::SamplerConfig per_clip = sampler;
            per_clip.seed = derive_seed(cfg.seed(), fnv1a64(name));
            w = flow::generate(video, tower, *fck, per_clip, gl);
        } else {
            w = generate_direct(video, tower, gl);
        }
        data::save_wav(wav.string(), w);
        waves.push_back(std::move(w));
    }
    return waves;
}

bool load_arm_report(const fs::path& arm_dir, EvalSummary& s) {
    fs::path path = arm_dir / "report.json";
    if (!fs::exists(path)) return false;
    std::ifstream in(path);
    std::stringstream buf;
    buf << in.rdbuf();
    json j = json::parse(buf.str());
    s.report = metrics::report_from_json(buf.str());
    s.class_accuracy = j.at("class_accuracy").get<double>();
    s.clips = j.at("clips").get<int>();
    return true;
}

// Runs one arm for one seed, reusing any artifact already on disk so an
// interrupted sweep picks up where it stopped.
EvalSummary run_arm(const RunConfig& cfg, const data::DatasetIndex& index,
                    const fs::path& seed_dir, const std::string& arm,
                    const metrics::EmbedderCheckpoint& emb, const metrics::SyncCheckpoint& sync) {
    fs::path arm_dir = seed_dir / arm;
    EvalSummary cached;
    if (load_arm_report(arm_dir, cached)) return cached;
    fs::create_directories(arm_dir);

    const std::vector<int>& clips = index.test;
    align::AlignCheckpoint tower;
    flow::FlowCheckpoint fck;
    bool direct = false;

    if (arm == "no-flow") {
        tower = arm_align(cfg, index, arm_dir, static_cast<float>(cfg.get_real("align.mask_ratio")),
                          false);
        direct = true;
    } else if (arm == "no-vama") {
        tower = arm_untrained_tower(cfg, index, arm_dir);
        fck = arm_flow(cfg, index, tower, arm_dir, cfg.get_int("flow.segments"));
    } else if (arm == "static-cond") {
        // Same stage-1 model as the full arm; only the conditioning
        // granularity changes.
        tower = arm_align(cfg, index, seed_dir / "full",
                          static_cast<float>(cfg.get_real("align.mask_ratio")), true);
        fck = arm_flow(cfg, index, tower, arm_dir, 1);
    } else {
        float ratio = static_cast<float>(cfg.get_real("align.mask_ratio"));
        if (arm.rfind("ratio-", 0) == 0) ratio = std::stof(arm.substr(6));
        tower = arm_align(cfg, index, arm_dir, ratio, true);
        fck = arm_flow(cfg, index, tower, arm_dir, cfg.get_int("flow.segments"));
    }

    std::vector<data::WaveBuffer> waves =
        arm_corpus(cfg, index, clips, tower, direct ? nullptr : &fck, arm_dir / "gen");
    EvalSummary s = evaluate_generated(index, clips, waves, emb, sync,
                                       cfg.get_real("eval.onset_tol"),
                                       digest_hex(cfg.resolved_text()));
    json j = json::parse(metrics::report_to_json(s.report));
    j["class_accuracy"] = s.class_accuracy;
    j["clips"] = s.clips;
    std::ofstream out(arm_dir / "report.json");
    if (!out) throw std::runtime_error("cannot write report in " + arm_dir.string());
    out << j.dump(2) << "\n";
    return s;
}

ArmMetrics to_metrics(const std::string& arm, const EvalSummary& s) {
    ArmMetrics m;
    m.arm = arm;
    m.kld = s.report.kld;
    m.fad = s.report.fad;
    m.align_accuracy = s.report.align_accuracy;
    m.onset_f1 = s.report.onset_f1;
    m.class_accuracy = s.class_accuracy;
    return m;
}

std::string format_table(const AblationTable& table) {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %8s %8s %10s %9s %10s\n", "arm", "kld", "fad",
                  "align_acc", "onset_f1", "class_acc");
    out << line;
    for (const ArmMetrics& m : table.mean) {
        std::snprintf(line, sizeof line, "%-12s %8.4f %8.4f %10.4f %9.4f %10.4f\n", m.arm.c_str(),
                      m.kld, m.fad, m.align_accuracy, m.onset_f1, m.class_accuracy);
        out << line;
    }
    return out.str();
}

void write_ablation_outputs(const AblationTable& table, const std::string& out_dir) {
    std::ofstream txt(out_dir + "/table.txt");
    if (!txt) throw std::runtime_error("cannot write table into " + out_dir);
    txt << format_table(table);

    json j;
    j["arms"] = table.arms;
    j["seeds"] = table.per_seed.size();
    auto arm_json = [](const ArmMetrics& m) {
        return json{{"kld", m.kld},
                    {"fad", m.fad},
                    {"align_acc", m.align_accuracy},
                    {"onset_f1", m.onset_f1},
                    {"class_acc", m.class_accuracy}};
    };
    for (const ArmMetrics& m : table.mean) j["mean"][m.arm] = arm_json(m);
    for (const auto& seed_rows : table.per_seed) {
        json row;
        for (const ArmMetrics& m : seed_rows) row[m.arm] = arm_json(m);
        j["per_seed"].push_back(row);
    }
    std::ofstream js(out_dir + "/table.json");
    js << j.dump(2) << "\n";

    std::vector<std::string> labels;
    for (const ArmMetrics& m : table.mean) labels.push_back(m.arm);
    auto chart = [&](const std::string& name, const std::string& title, auto pick) {
        std::vector<double> values;
        for (const ArmMetrics& m : table.mean) values.push_back(pick(m));
        write_bar_chart(out_dir + "/" + name, title, labels, values);
    };
    chart("ablate_kld.svg", "kld by arm (seed mean)", [](const ArmMetrics& m) { return m.kld; });
    chart("ablate_fad.svg", "fad by arm (seed mean)", [](const ArmMetrics& m) { return m.fad; });
    chart("ablate_align_acc.svg", "alignment accuracy by arm (seed mean)",
          [](const ArmMetrics& m) { return m.align_accuracy; });
    chart("ablate_onset_f1.svg", "onset f1 by arm (seed mean)",
          [](const ArmMetrics& m) { return m.onset_f1; });
}

int cmd_ablate(const RunConfig& cfg, const std::string& out) {
    fs::create_directories(out);
    write_resolved(cfg, out);
    AblationTable table = run_ablation(cfg, out);
    std::cout << format_table(table);
    return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public pieces

EvalSummary evaluate_generated(const data::DatasetIndex& index, const std::vector<int>& clip_ids,
                               const std::vector<data::WaveBuffer>& generated,
                               const metrics::EmbedderCheckpoint& emb,
                               const metrics::SyncCheckpoint& sync, double onset_tol,
                               const std::string& config_digest) {
    if (clip_ids.size() != generated.size() || generated.empty())
        throw std::invalid_argument("evaluate_generated: one generated wave per clip required");

    std::vector<data::WaveBuffer> reference;
    std::vector<data::FrameSequence> videos;
    std::vector<data::EventTrack> events;
    reference.reserve(clip_ids.size());
    for (int clip : clip_ids) {
        data::RawClip raw = data::load_clip(index, clip);
        reference.push_back(std::move(raw.audio));
        videos.push_back(std::move(raw.video));
        events.push_back(std::move(raw.events));
    }

    EvalSummary s;
    s.clips = static_cast<int>(clip_ids.size());
    s.report.kld = metrics::kld_metric(generated, reference, emb);
    s.report.fad = metrics::fad_metric(generated, reference, emb);
    s.report.align_accuracy = metrics::align_acc(generated, videos, sync);
    double f1 = 0.0;
    for (size_t i = 0; i < generated.size(); ++i)
        f1 += metrics::onset_f1(generated[i], events[i], onset_tol, emb.cfg.spec);
    s.report.onset_f1 = f1 / static_cast<double>(generated.size());
    s.report.embedder_accuracy = emb.test_accuracy;
    s.report.sync_accuracy = sync.test_accuracy;
    s.report.config_digest = config_digest;

    metrics::EmbedderOutput scored = metrics::embed_clips(emb, generated);
    int hits = 0;
    for (size_t i = 0; i < clip_ids.size(); ++i) {
        Eigen::Index best = 0;
        scored.posterior.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
        if (static_cast<int>(best) == index.class_ids[static_cast<size_t>(clip_ids[i])]) ++hits;
    }
    s.class_accuracy = static_cast<double>(hits) / static_cast<double>(clip_ids.size());
    return s;
}

AblationTable run_ablation(const RunConfig& base, const std::string& out_dir) {
    int n_seeds = base.get_int("ablate.seeds");
    if (n_seeds < 1) throw UsageError("ablate.seeds must be at least 1");
    if (base.get_int("ablate.clips") < 1) throw UsageError("ablate.clips must be at least 1");

    // Arms that need their own training runs; the 0.8 sweep point is the
    // full arm under another row label.
    const std::vector<std::string> work = {"full",      "no-vama",   "no-flow",   "static-cond",
                                           "ratio-0.3", "ratio-0.5", "ratio-0.7", "ratio-0.9"};
    AblationTable table;
    table.arms = {"full",      "no-vama",   "no-flow",   "static-cond", "ratio-0.3",
                  "ratio-0.5", "ratio-0.7", "ratio-0.8", "ratio-0.9"};
    table.per_seed.resize(static_cast<size_t>(n_seeds));

    uint64_t seed0 = base.seed();
    for (int s = 0; s < n_seeds; ++s) {
        RunConfig cfg = base;
        cfg.set("seed", std::to_string(seed0 + static_cast<uint64_t>(s)));
        cfg.set("data.clips", std::to_string(base.get_int("ablate.clips")));
        fs::path seed_dir = fs::path(out_dir) / ("seed" + std::to_string(s));
        std::string data_root = (seed_dir / "data").string();
        if (!fs::exists(data_root + "/manifest.json"))
            data::generate_dataset(build_dataset_config(cfg), data_root);
        data::DatasetIndex index = data::load_dataset(data_root);
        metrics::EmbedderCheckpoint emb =
            ensure_embedder(cfg, index, (seed_dir / "emb.ckpt").string());
        metrics::SyncCheckpoint sync = ensure_sync(cfg, index, (seed_dir / "sync.ckpt").string());

        std::map<std::string, EvalSummary> results;
        for (const std::string& arm : work)
            results[arm] = run_arm(cfg, index, seed_dir, arm, emb, sync);
        results["ratio-0.8"] = results["full"];
        for (const std::string& arm : table.arms)
            table.per_seed[static_cast<size_t>(s)].push_back(to_metrics(arm, results[arm]));
    }

    for (size_t a = 0; a < table.arms.size(); ++a) {
        ArmMetrics m;
        m.arm = table.arms[a];
        for (int s = 0; s < n_seeds; ++s) {
            const ArmMetrics& r = table.per_seed[static_cast<size_t>(s)][a];
            m.kld += r.kld;
            m.fad += r.fad;
            m.align_accuracy += r.align_accuracy;
            m.onset_f1 += r.onset_f1;
            m.class_accuracy += r.class_accuracy;
        }
        m.kld /= n_seeds;
        m.fad /= n_seeds;
        m.align_accuracy /= n_seeds;
        m.onset_f1 /= n_seeds;
        m.class_accuracy /= n_seeds;
        table.mean.push_back(m);
    }
    write_ablation_outputs(table, out_dir);
    return table;
}

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"two-stage video-to-audio pipeline on a synthetic dataset"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, out_path, seed_text;
    app.add_option("--config", config_path, "flat key = value config file");
    app.add_option("--seed", seed_text, "base seed override");
    app.add_option("--out", out_path, "output path; its role depends on the subcommand");

    std::string gd_clips, gd_classes;
    CLI::App* gd = app.add_subcommand("generate-data", "render the synthetic dataset into --out");
    gd->add_option("--clips", gd_clips, "number of clips");
    gd->add_option("--classes", gd_classes, "number of classes");

    std::string ta_data, ta_ratio, ta_block, ta_epochs, ta_resume;
    CLI::App* ta = app.add_subcommand("train-align", "train stage 1, checkpoint at --out");
    ta->add_option("--data", ta_data, "dataset root")->required();
    ta->add_option("--mask-ratio", ta_ratio, "fraction of audio steps hidden");
    ta->add_option("--block", ta_block, "masked block size in steps");
    ta->add_option("--epochs", ta_epochs, "epoch budget");
    ta->add_option("--resume", ta_resume, "checkpoint to warm-start from");

    std::string tf_data, tf_align, tf_epochs, tf_resume;
    CLI::App* tf = app.add_subcommand("train-flow", "train stage 2, checkpoint at --out");
    tf->add_option("--data", tf_data, "dataset root")->required();
    tf->add_option("--align", tf_align, "stage-1 checkpoint")->required();
    tf->add_option("--epochs", tf_epochs, "epoch budget");
    tf->add_option("--resume", tf_resume, "checkpoint to warm-start from");

    std::string gn_data, gn_align, gn_flow, gn_split = "test", gn_steps, gn_mode;
    CLI::App* gn = app.add_subcommand("generate", "synthesize audio for a split into --out");
    gn->add_option("--data", gn_data, "dataset root")->required();
    gn->add_option("--align", gn_align, "stage-1 checkpoint")->required();
    gn->add_option("--flow", gn_flow, "stage-2 checkpoint")->required();
    gn->add_option("--split", gn_split, "train, val, test or all (default test)");
    gn->add_option("--steps", gn_steps, "sampler steps");
    gn->add_option("--mode", gn_mode, "sampler mode: euler_multi or single_step");

    EvaluateArgs ev;
    CLI::App* evc = app.add_subcommand("evaluate", "score a generated corpus, report at --out");
    evc->add_option("--data", ev.data_root, "dataset root")->required();
    evc->add_option("--gen-dir", ev.gen_dir, "directory of generated wavs")->required();
    evc->add_option("--embedder", ev.embedder, "oracle classifier checkpoint")->required();
    evc->add_option("--sync", ev.sync, "sync classifier checkpoint")->required();
    evc->add_option("--align", ev.align_ckpt, "stage-1 checkpoint, enables timing");
    evc->add_option("--flow", ev.flow_ckpt, "stage-2 checkpoint, enables timing");
    evc->add_option("--align-log", ev.align_log, "stage-1 loss log for the curve plot");
    evc->add_option("--flow-log", ev.flow_log, "stage-2 loss log for the curve plot");

    std::string ab_seeds, ab_clips;
    CLI::App* ab = app.add_subcommand("ablate", "run every ablation arm under --out");
    ab->add_option("--seeds", ab_seeds, "number of seeds");
    ab->add_option("--clips", ab_clips, "clips per ablation dataset");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        try {
            app.parse(reversed);
        } catch (const CLI::ParseError& e) {
            int code = app.exit(e);
            return code == 0 ? 0 : 1;
        }

        RunConfig cfg;
        if (!config_path.empty()) apply_config_file(cfg, config_path);
        auto override_key = [&cfg](const std::string& key, const std::string& value) {
            if (!value.empty()) cfg.set(key, value);
        };
        override_key("seed", seed_text);

        auto require_out = [&out_path]() -> const std::string& {
            if (out_path.empty()) throw UsageError("--out is required");
            return out_path;
        };

        if (app.got_subcommand(gd)) {
            override_key("data.clips", gd_clips);
            override_key("data.classes", gd_classes);
            return cmd_generate_data(cfg, require_out());
        }
        if (app.got_subcommand(ta)) {
            override_key("align.mask_ratio", ta_ratio);
            override_key("align.block_size", ta_block);
            override_key("align.max_epochs", ta_epochs);
            return cmd_train_align(cfg, ta_data, require_out(), ta_resume);
        }
        if (app.got_subcommand(tf)) {
            override_key("flow.max_epochs", tf_epochs);
            return cmd_train_flow(cfg, tf_data, tf_align, require_out(), tf_resume);
        }
        if (app.got_subcommand(gn)) {
            override_key("sampler.steps", gn_steps);
            override_key("sampler.mode", gn_mode);
            return cmd_generate(cfg, gn_data, gn_align, gn_flow, gn_split, require_out());
        }
        if (app.got_subcommand(evc)) {
            ev.out = require_out();
            return cmd_evaluate(cfg, ev);
        }
        if (app.got_subcommand(ab)) {
            override_key("ablate.seeds", ab_seeds);
            override_key("ablate.clips", ab_clips);
            return cmd_ablate(cfg, require_out());
        }
        throw UsageError("no subcommand selected");
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const GateError& e) {
        std::cerr << "gate failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace vaflow::cli
