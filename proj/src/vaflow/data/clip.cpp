// SPDX-License-Identifier: Apache-2.0
#include "vaflow/data/clip.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace vaflow::data {
namespace {

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u16(std::ostream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

uint16_t read_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | b[1] << 8);
}

}  // namespace

WaveBuffer load_wav(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open wav file: " + path);

    char tag[4];
    is.read(tag, 4);
    if (std::memcmp(tag, "RIFF", 4) != 0) throw std::runtime_error("not a RIFF file: " + path);
    read_u32(is);  // chunk size
    is.read(tag, 4);
    if (std::memcmp(tag, "WAVE", 4) != 0) throw std::runtime_error("not a WAVE file: " + path);

    WaveBuffer wave;
    uint16_t channels = 0, bits = 0;
    bool have_fmt = false;
    while (is.read(tag, 4)) {
        uint32_t size = read_u32(is);
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            uint16_t format = read_u16(is);
            channels = read_u16(is);
            wave.sample_rate = static_cast<int>(read_u32(is));
            read_u32(is);  // byte rate
            read_u16(is);  // block align
            bits = read_u16(is);
            if (size > 16) is.seekg(size - 16, std::ios::cur);
            if (format != 1) throw std::runtime_error("wav is not PCM: " + path);
            have_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            if (!have_fmt) throw std::runtime_error("wav data before fmt chunk: " + path);
            if (channels != 1 || bits != 16)
                throw std::runtime_error("expected 16-bit mono wav: " + path);
            size_t n = size / 2;
            wave.samples.resize(n);
            std::vector<unsigned char> raw(size);
            is.read(reinterpret_cast<char*>(raw.data()), size);
            if (!is) throw std::runtime_error("truncated wav data: " + path);
            for (size_t i = 0; i < n; ++i) {
                int16_t s = static_cast<int16_t>(raw[2 * i] | raw[2 * i + 1] << 8);
                // Same scale the writer uses, so a round trip only costs the
                // quantization rounding.
                wave.samples[i] = std::clamp(static_cast<float>(s) / 32767.0f, -1.0f, 1.0f);
            }
            return wave;
        } else {
            is.seekg(size + (size & 1), std::ios::cur);
        }
    }
    throw std::runtime_error("wav has no data chunk: " + path);
}

void save_wav(const std::string& path, const WaveBuffer& wave) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write wav file: " + path);

    uint32_t data_bytes = static_cast<uint32_t>(wave.samples.size() * 2);
    os.write("RIFF", 4);
    write_u32(os, 36 + data_bytes);
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    write_u32(os, 16);
    write_u16(os, 1);  // PCM
    write_u16(os, 1);  // mono
    write_u32(os, static_cast<uint32_t>(wave.sample_rate));
    write_u32(os, static_cast<uint32_t>(wave.sample_rate * 2));
    write_u16(os, 2);
    write_u16(os, 16);
    os.write("data", 4);
    write_u32(os, data_bytes);
    for (float s : wave.samples) {
        float clipped = std::clamp(s, -1.0f, 1.0f);
        int16_t q = static_cast<int16_t>(std::lrintf(clipped * 32767.0f));
        write_u16(os, static_cast<uint16_t>(q));
    }
    if (!os) throw std::runtime_error("failed writing wav file: " + path);
}

FrameSequence load_frames(const std::string& path, float fps) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open frames file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "AVT1", 4) != 0)
        throw std::runtime_error("bad frames magic (want AVT1): " + path);

    FrameSequence video;
    video.frames = static_cast<int>(read_u32(is));
    video.height = static_cast<int>(read_u32(is));
    video.width = static_cast<int>(read_u32(is));
    video.channels = static_cast<int>(read_u32(is));
    video.fps = fps;
    size_t n = static_cast<size_t>(video.frames) * video.height * video.width * video.channels;
    if (n == 0 || n > (1u << 30)) throw std::runtime_error("implausible frames shape: " + path);
    video.data.resize(n);
    is.read(reinterpret_cast<char*>(video.data.data()), static_cast<std::streamsize>(n * 4));
    if (!is) throw std::runtime_error("truncated frames data: " + path);
    return video;
}

void save_frames(const std::string& path, const FrameSequence& video) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write frames file: " + path);
    os.write("AVT1", 4);
    write_u32(os, static_cast<uint32_t>(video.frames));
    write_u32(os, static_cast<uint32_t>(video.height));
    write_u32(os, static_cast<uint32_t>(video.width));
    write_u32(os, static_cast<uint32_t>(video.channels));
    os.write(reinterpret_cast<const char*>(video.data.data()),
             static_cast<std::streamsize>(video.data.size() * 4));
    if (!os) throw std::runtime_error("failed writing frames file: " + path);
}

EventTrack load_events(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open events file: " + path);
    nlohmann::json j = nlohmann::json::parse(is);
    EventTrack events;
    events.class_id = j.at("class_id").get<int>();
    events.onsets = j.at("onsets").get<std::vector<double>>();
    return events;
}

void save_events(const std::string& path, const EventTrack& events) {
    nlohmann::json j;
    j["class_id"] = events.class_id;
    j["onsets"] = events.onsets;
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write events file: " + path);
    os << j.dump(2) << "\n";
}

}  // namespace vaflow::data
