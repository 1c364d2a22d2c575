// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vaflow/data/synth.hpp"

namespace vaflow::data {

struct DatasetConfig {
    int clips = 100;
    int classes = 4;
    uint64_t seed = 1234;
    SynthConfig synth;
};

// On-disk layout: <root>/manifest.json plus one clip_NNNNN directory per clip
// holding audio.wav, frames.bin and events.json.
struct DatasetIndex {
    DatasetConfig config;
    std::string root;
    std::vector<int> class_ids;           // per clip index
    std::vector<int> train, val, test;    // clip indices per split

    std::string clip_dir(int index) const;
    int size() const { return static_cast<int>(class_ids.size()); }
};

// Round-robin classes over clip indices, 80/10/10 contiguous split. Both
// choices together keep the class balance of every split within one clip.
void generate_dataset(const DatasetConfig& cfg, const std::string& root);

DatasetIndex load_dataset(const std::string& root);
RawClip load_clip(const DatasetIndex& index, int clip);

}  // namespace vaflow::data
