// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vaflow::data {

struct WaveBuffer {
    std::vector<float> samples;  // mono, [-1, 1]
    int sample_rate = 8000;

    double duration() const {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
};

// Grayscale or multi-channel frame stack, frame-major float32 in [0, 1].
struct FrameSequence {
    int frames = 0;
    int height = 0;
    int width = 0;
    int channels = 0;
    float fps = 16.0f;
    std::vector<float> data;  // frames * height * width * channels

    float& at(int t, int y, int x, int c) {
        return data[((static_cast<size_t>(t) * height + y) * width + x) * channels + c];
    }
    float at(int t, int y, int x, int c) const {
        return data[((static_cast<size_t>(t) * height + y) * width + x) * channels + c];
    }
    size_t frame_size() const { return static_cast<size_t>(height) * width * channels; }
};

struct EventTrack {
    int class_id = 0;
    std::vector<double> onsets;  // seconds, ascending
};

struct RawClip {
    WaveBuffer audio;
    FrameSequence video;
    EventTrack events;
};

// audio.wav: RIFF/WAVE, PCM16 little-endian, mono.
WaveBuffer load_wav(const std::string& path);
void save_wav(const std::string& path, const WaveBuffer& wave);

// frames.bin: magic "AVT1", four little-endian uint32 dims (frames, height,
// width, channels), then float32 pixel data in that row-major order. The file
// carries no frame rate; callers pass the fps the clip was rendered at.
FrameSequence load_frames(const std::string& path, float fps);
void save_frames(const std::string& path, const FrameSequence& video);

// events.json: {"class_id": int, "onsets": [seconds...]}
EventTrack load_events(const std::string& path);
void save_events(const std::string& path, const EventTrack& events);

}  // namespace vaflow::data
