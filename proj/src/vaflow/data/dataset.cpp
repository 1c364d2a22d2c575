// SPDX-License-Identifier: Apache-2.0
#include "vaflow/data/dataset.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "vaflow/common.hpp"

namespace fs = std::filesystem;

namespace vaflow::data {

std::string DatasetIndex::clip_dir(int index) const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "clip_%05d", index);
    return (fs::path(root) / buf).string();
}

void generate_dataset(const DatasetConfig& cfg, const std::string& root) {
    if (cfg.clips < 1) throw std::runtime_error("generate_dataset: need at least one clip");
    if (cfg.classes < 1) throw std::runtime_error("generate_dataset: need at least one class");
    fs::create_directories(root);

    DatasetIndex index;
    index.config = cfg;
    index.root = root;
    for (int i = 0; i < cfg.clips; ++i) {
        int class_id = i % cfg.classes;
        index.class_ids.push_back(class_id);
        RawClip clip = synth_clip(cfg.synth, class_id, derive_seed(cfg.seed, i));

        std::string dir = index.clip_dir(i);
        fs::create_directories(dir);
        save_wav((fs::path(dir) / "audio.wav").string(), clip.audio);
        save_frames((fs::path(dir) / "frames.bin").string(), clip.video);
        save_events((fs::path(dir) / "events.json").string(), clip.events);
    }

    int train_end = cfg.clips * 8 / 10;
    int val_end = cfg.clips * 9 / 10;
    nlohmann::json split;
    for (int i = 0; i < cfg.clips; ++i) {
        const char* key = i < train_end ? "train" : (i < val_end ? "val" : "test");
        split[key].push_back(i);
    }
    if (!split.contains("train")) split["train"] = nlohmann::json::array();
    if (!split.contains("val")) split["val"] = nlohmann::json::array();
    if (!split.contains("test")) split["test"] = nlohmann::json::array();

    nlohmann::json j;
    j["clips"] = cfg.clips;
    j["classes"] = cfg.classes;
    j["seed"] = cfg.seed;
    j["duration_seconds"] = cfg.synth.duration;
    j["sample_rate"] = cfg.synth.sample_rate;
    j["video_fps"] = cfg.synth.video_fps;
    j["height"] = cfg.synth.height;
    j["width"] = cfg.synth.width;
    j["events_min"] = cfg.synth.events_min;
    j["events_max"] = cfg.synth.events_max;
    j["min_onset_gap"] = cfg.synth.min_onset_gap;
    j["class_ids"] = index.class_ids;
    j["split"] = split;
    std::ofstream os(fs::path(root) / "manifest.json");
    if (!os) throw std::runtime_error("cannot write manifest under " + root);
    os << j.dump(2) << "\n";
}

DatasetIndex load_dataset(const std::string& root) {
    std::ifstream is(fs::path(root) / "manifest.json");
    if (!is) throw std::runtime_error("cannot open manifest under " + root);
    nlohmann::json j = nlohmann::json::parse(is);

    DatasetIndex index;
    index.root = root;
    index.config.clips = j.at("clips").get<int>();
    index.config.classes = j.at("classes").get<int>();
    index.config.seed = j.at("seed").get<uint64_t>();
    index.config.synth.duration = j.at("duration_seconds").get<double>();
    index.config.synth.sample_rate = j.at("sample_rate").get<int>();
    index.config.synth.video_fps = j.at("video_fps").get<float>();
    index.config.synth.height = j.at("height").get<int>();
    index.config.synth.width = j.at("width").get<int>();
    index.config.synth.events_min = j.at("events_min").get<int>();
    index.config.synth.events_max = j.at("events_max").get<int>();
    index.config.synth.min_onset_gap = j.at("min_onset_gap").get<double>();
    index.class_ids = j.at("class_ids").get<std::vector<int>>();
    index.train = j.at("split").at("train").get<std::vector<int>>();
    index.val = j.at("split").at("val").get<std::vector<int>>();
    index.test = j.at("split").at("test").get<std::vector<int>>();
    if (static_cast<int>(index.class_ids.size()) != index.config.clips)
        throw std::runtime_error("manifest class_ids length does not match clip count");
    return index;
}

RawClip load_clip(const DatasetIndex& index, int clip) {
    if (clip < 0 || clip >= index.size())
        throw std::runtime_error("load_clip: clip index out of range");
    std::string dir = index.clip_dir(clip);
    RawClip out;
    out.audio = load_wav((fs::path(dir) / "audio.wav").string());
    out.video = load_frames((fs::path(dir) / "frames.bin").string(), index.config.synth.video_fps);
    out.events = load_events((fs::path(dir) / "events.json").string());
    return out;
}

}  // namespace vaflow::data
