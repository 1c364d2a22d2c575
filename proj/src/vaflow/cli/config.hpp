// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "vaflow/align/align.hpp"
#include "vaflow/data/dataset.hpp"
#include "vaflow/flow/flow.hpp"
#include "vaflow/metrics/metrics.hpp"

namespace vaflow::cli {

// Bad arguments or config contents; maps to exit code 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A metric gate refused to certify; maps to exit code 2.
struct GateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat key-value run configuration. Every knob of every stage has a key and
// a default; files may override any subset and unknown keys are rejected.
struct RunConfig {
    std::map<std::string, std::string> values;

    RunConfig();

    bool has(const std::string& key) const { return values.count(key) > 0; }
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    int get_int(const std::string& key) const;
    double get_real(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    uint64_t seed() const { return static_cast<uint64_t>(get_int("seed")); }

    // Sorted `key = value` lines, the canonical resolved form.
    std::string resolved_text() const;
};

// Parses `key = value` lines into cfg; `#` starts a comment, blank lines are
// skipped. Throws UsageError on unknown keys or malformed lines.
void apply_config_file(RunConfig& cfg, const std::string& path);

// FNV-1a over the given text; the hex form is the config digest, the raw
// value seeds per-clip generation from clip names.
uint64_t fnv1a64(const std::string& text);
std::string digest_hex(const std::string& text);

// Compile-time source version plus the resolved-config digest.
std::string version_string();

// Writes resolved config and version digest into dir/config_resolved.txt.
void write_resolved(const RunConfig& cfg, const std::string& dir);

// Adapters from the flat config to per-stage structs.
data::DatasetConfig build_dataset_config(const RunConfig& cfg);
data::SpectroConfig build_spectro_config(const RunConfig& cfg);
enc::EncoderConfig build_encoder_config(const RunConfig& cfg);
align::AlignConfig build_align_config(const RunConfig& cfg);
flow::FlowConfig build_flow_config(const RunConfig& cfg);
flow::SamplerConfig build_sampler_config(const RunConfig& cfg);
metrics::EmbedderConfig build_embedder_config(const RunConfig& cfg);
metrics::SyncConfig build_sync_config(const RunConfig& cfg);

}  // namespace vaflow::cli
