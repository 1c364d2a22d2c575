// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "vaflow/cli/config.hpp"
#include "vaflow/data/dataset.hpp"
#include "vaflow/metrics/metrics.hpp"

namespace vaflow::cli {

// One generated corpus measured against its source dataset: the metric
// report plus the oracle classifier's accuracy on the generated audio.
struct EvalSummary {
    metrics::MetricReport report;
    double class_accuracy = 0.0;
    int clips = 0;
};

EvalSummary evaluate_generated(const data::DatasetIndex& index, const std::vector<int>& clip_ids,
                               const std::vector<data::WaveBuffer>& generated,
                               const metrics::EmbedderCheckpoint& emb,
                               const metrics::SyncCheckpoint& sync, double onset_tol,
                               const std::string& config_digest);

// One ablation arm's metrics, either for a single seed or averaged.
struct ArmMetrics {
    std::string arm;
    double kld = 0.0;
    double fad = 0.0;
    double align_accuracy = 0.0;
    double onset_f1 = 0.0;
    double class_accuracy = 0.0;
};

struct AblationTable {
    std::vector<std::string> arms;                 // row order
    std::vector<std::vector<ArmMetrics>> per_seed; // [seed][row]
    std::vector<ArmMetrics> mean;                  // per row, over seeds
};

// Runs every ablation arm for ablate.seeds consecutive seeds under out_dir,
// reusing finished arms from disk, and writes table.txt, table.json and the
// per-metric bar charts. Also exposed directly so tests can read the table
// without re-parsing the emitted files.
AblationTable run_ablation(const RunConfig& cfg, const std::string& out_dir);

// Entry point behind the vaflow binary. Returns the process exit code:
// 0 success, 1 usage error, 2 metric gate failure, 3 runtime failure.
int run_cli(const std::vector<std::string>& args);

}  // namespace vaflow::cli
