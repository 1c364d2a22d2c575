// SPDX-License-Identifier: Apache-2.0
#include "vaflow/cli/config.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vaflow/common.hpp"

#ifndef VAFLOW_VERSION
#define VAFLOW_VERSION "untracked"
#endif

namespace vaflow::cli {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig::RunConfig() {
    values = {
        {"seed", "1"},
        // Dataset synthesis.
        {"data.clips", "2000"},
        {"data.classes", "4"},
        {"data.duration", "4"},
        {"data.sample_rate", "8000"},
        {"data.fps", "16"},
        {"data.height", "32"},
        {"data.width", "32"},
        {"data.events_min", "1"},
        {"data.events_max", "3"},
        {"data.min_onset_gap", "0.3"},
        {"data.tone_amp", "0.5"},
        {"data.tone_decay", "0.12"},
        {"data.noise_std", "0.003"},
        {"data.video_noise_std", "0.02"},
        {"data.video_background", "0.12"},
        {"data.flash_decay", "0.08"},
        // Spectrogram analysis.
        {"spec.window", "400"},
        {"spec.hop", "200"},
        {"spec.n_fft", "512"},
        {"spec.mel_bands", "128"},
        {"spec.time_frames", "128"},
        {"spec.fmin", "0"},
        {"spec.fmax", "4000"},
        // Shared transformer towers.
        {"enc.embed_dim", "128"},
        {"enc.depth", "4"},
        {"enc.heads", "4"},
        {"enc.mlp_ratio", "4"},
        {"enc.video_patch", "16"},
        {"enc.audio_patch_freq", "16"},
        {"enc.audio_patch_time", "4"},
        // Alignment stage.
        {"align.mask_ratio", "0.8"},
        {"align.block_size", "2"},
        {"align.decoder_depth", "2"},
        {"align.embed_targets", "true"},
        {"align.warmup", "true"},
        {"align.warmup_steps", "150"},
        {"align.warmup_ratio", "0.75"},
        {"align.lr", "1e-4"},
        {"align.batch", "32"},
        {"align.max_epochs", "100"},
        {"align.patience", "5"},
        // Flow stage.
        {"flow.segments", "8"},
        {"flow.lambda", "4"},
        {"flow.lr", "1e-4"},
        {"flow.batch", "32"},
        {"flow.max_epochs", "100"},
        {"flow.patience", "5"},
        // Sampling and inversion.
        {"sampler.steps", "32"},
        {"sampler.mode", "euler_multi"},
        {"gl.iterations", "32"},
        // Metric gates.
        {"emb.embed_dim", "64"},
        {"emb.lr", "3e-3"},
        {"emb.steps", "400"},
        {"emb.gate", "0.95"},
        {"sync.lags", "8"},
        {"sync.hidden", "16"},
        {"sync.lr", "1e-2"},
        {"sync.steps", "300"},
        {"sync.gate", "0.90"},
        {"sync.min_shift", "0.5"},
        // Evaluation.
        {"eval.onset_tol", "0.05"},
        {"eval.timing_clips", "10"},
        // Ablations.
        {"ablate.seeds", "3"},
        {"ablate.clips", "600"},
    };
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = values.find(key);
    if (it == values.end()) throw UsageError("unknown config key: " + key);
    it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw UsageError("unknown config key: " + key);
    return it->second;
}

int RunConfig::get_int(const std::string& key) const {
    const std::string& v = get(key);
    size_t used = 0;
    int out = 0;
    try {
        out = std::stoi(v, &used);
    } catch (const std::exception&) {
        throw UsageError("config key " + key + " needs an integer, got '" + v + "'");
    }
    if (used != v.size())
        throw UsageError("config key " + key + " needs an integer, got '" + v + "'");
    return out;
}

double RunConfig::get_real(const std::string& key) const {
    const std::string& v = get(key);
    size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        throw UsageError("config key " + key + " needs a number, got '" + v + "'");
    }
    if (used != v.size())
        throw UsageError("config key " + key + " needs a number, got '" + v + "'");
    return out;
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw UsageError("config key " + key + " needs true/false, got '" + v + "'");
}

std::string RunConfig::resolved_text() const {
    std::ostringstream out;
    for (const auto& [key, value] : values) out << key << " = " << value << "\n";
    return out.str();
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw UsageError(path + ":" + std::to_string(lineno) + ": expected key = value");
        cfg.set(key, value);
    }
}

uint64_t fnv1a64(const std::string& text) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string digest_hex(const std::string& text) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
    return buf;
}

std::string version_string() { return VAFLOW_VERSION; }

void write_resolved(const RunConfig& cfg, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::string text = cfg.resolved_text();
    std::ofstream out(dir + "/config_resolved.txt");
    if (!out) throw std::runtime_error("cannot write resolved config into " + dir);
    out << "# version = " << version_string() << "\n";
    out << "# config_digest = " << digest_hex(text) << "\n";
    out << text;
}

data::DatasetConfig build_dataset_config(const RunConfig& cfg) {
    data::DatasetConfig dc;
    dc.clips = cfg.get_int("data.clips");
    dc.classes = cfg.get_int("data.classes");
    dc.seed = cfg.seed();
    dc.synth.duration = cfg.get_real("data.duration");
    dc.synth.sample_rate = cfg.get_int("data.sample_rate");
    dc.synth.video_fps = static_cast<float>(cfg.get_real("data.fps"));
    dc.synth.height = cfg.get_int("data.height");
    dc.synth.width = cfg.get_int("data.width");
    dc.synth.events_min = cfg.get_int("data.events_min");
    dc.synth.events_max = cfg.get_int("data.events_max");
    dc.synth.min_onset_gap = cfg.get_real("data.min_onset_gap");
    dc.synth.tone_amp = cfg.get_real("data.tone_amp");
    dc.synth.tone_decay = cfg.get_real("data.tone_decay");
    dc.synth.noise_std = cfg.get_real("data.noise_std");
    dc.synth.video_noise_std = static_cast<float>(cfg.get_real("data.video_noise_std"));
    dc.synth.video_background = static_cast<float>(cfg.get_real("data.video_background"));
    dc.synth.flash_decay = cfg.get_real("data.flash_decay");
    return dc;
}

data::SpectroConfig build_spectro_config(const RunConfig& cfg) {
    data::SpectroConfig spec;
    spec.sample_rate = cfg.get_int("data.sample_rate");
    spec.window = cfg.get_int("spec.window");
    spec.hop = cfg.get_int("spec.hop");
    spec.n_fft = cfg.get_int("spec.n_fft");
    spec.mel_bands = cfg.get_int("spec.mel_bands");
    spec.time_frames = cfg.get_int("spec.time_frames");
    spec.fmin = cfg.get_real("spec.fmin");
    spec.fmax = cfg.get_real("spec.fmax");
    return spec;
}

enc::EncoderConfig build_encoder_config(const RunConfig& cfg) {
    enc::EncoderConfig enc;
    enc.embed_dim = cfg.get_int("enc.embed_dim");
    enc.depth = cfg.get_int("enc.depth");
    enc.heads = cfg.get_int("enc.heads");
    enc.mlp_ratio = cfg.get_real("enc.mlp_ratio");
    enc.video_patch = cfg.get_int("enc.video_patch");
    enc.audio_patch_freq = cfg.get_int("enc.audio_patch_freq");
    enc.audio_patch_time = cfg.get_int("enc.audio_patch_time");
    return enc;
}

align::AlignConfig build_align_config(const RunConfig& cfg) {
    align::AlignConfig a;
    a.enc = build_encoder_config(cfg);
    a.spec = build_spectro_config(cfg);
    a.mask_ratio = static_cast<float>(cfg.get_real("align.mask_ratio"));
    a.block_size = cfg.get_int("align.block_size");
    a.decoder_depth = cfg.get_int("align.decoder_depth");
    a.embed_targets = cfg.get_bool("align.embed_targets");
    a.warmup = cfg.get_bool("align.warmup");
    a.warmup_steps = cfg.get_int("align.warmup_steps");
    a.warmup_ratio = static_cast<float>(cfg.get_real("align.warmup_ratio"));
    a.lr = cfg.get_real("align.lr");
    a.batch = cfg.get_int("align.batch");
    a.max_epochs = cfg.get_int("align.max_epochs");
    a.patience = cfg.get_int("align.patience");
    a.seed = derive_seed(cfg.seed(), 1);
    return a;
}

flow::FlowConfig build_flow_config(const RunConfig& cfg) {
    flow::FlowConfig f;
    f.enc = build_encoder_config(cfg);
    f.spec = build_spectro_config(cfg);
    f.clip_seconds = static_cast<float>(cfg.get_real("data.duration"));
    f.segments = cfg.get_int("flow.segments");
    f.lambda = static_cast<float>(cfg.get_real("flow.lambda"));
    f.lr = cfg.get_real("flow.lr");
    f.batch = cfg.get_int("flow.batch");
    f.max_epochs = cfg.get_int("flow.max_epochs");
    f.patience = cfg.get_int("flow.patience");
    f.seed = derive_seed(cfg.seed(), 2);
    return f;
}

flow::SamplerConfig build_sampler_config(const RunConfig& cfg) {
    flow::SamplerConfig s;
    const std::string& mode = cfg.get("sampler.mode");
    if (mode == "euler_multi") {
        s.mode = flow::SampleMode::euler_multi;
        s.steps = cfg.get_int("sampler.steps");
    } else if (mode == "single_step") {
        s.mode = flow::SampleMode::single_step;
        s.steps = 1;
    } else {
        throw UsageError("sampler.mode must be euler_multi or single_step, got '" + mode + "'");
    }
    return s;
}

metrics::EmbedderConfig build_embedder_config(const RunConfig& cfg) {
    metrics::EmbedderConfig e;
    e.spec = build_spectro_config(cfg);
    e.classes = cfg.get_int("data.classes");
    e.embed_dim = cfg.get_int("emb.embed_dim");
    e.lr = cfg.get_real("emb.lr");
    e.steps = cfg.get_int("emb.steps");
    e.gate = cfg.get_real("emb.gate");
    e.seed = derive_seed(cfg.seed(), 3);
    return e;
}

metrics::SyncConfig build_sync_config(const RunConfig& cfg) {
    metrics::SyncConfig s;
    s.spec = build_spectro_config(cfg);
    s.lags = cfg.get_int("sync.lags");
    s.hidden = cfg.get_int("sync.hidden");
    s.lr = cfg.get_real("sync.lr");
    s.steps = cfg.get_int("sync.steps");
    s.gate = cfg.get_real("sync.gate");
    s.min_shift = cfg.get_real("sync.min_shift");
    s.seed = derive_seed(cfg.seed(), 4);
    return s;
}

}  // namespace vaflow::cli
