#pragma once

#include <map>
#include <string>
#include <vector>

#include "gep/decoder.hpp"
#include "gep/encoder.hpp"
#include "gep/evolution.hpp"
#include "gep/tokenizer.hpp"

namespace gep::train {

struct TaskData {
    Matrix X;
    std::vector<double> y;
};

struct CorpusRecord {
    std::string task;
    TokenSequence tokens;
    double fitness = 0.0;
    Chromosome chrom;
};

struct TrainingCorpus {
    ChromosomeShape shape;
    SymbolId linker = 0;
    Vocabulary vocab;
    std::vector<CorpusRecord> records;
    std::map<std::string, TaskData> tasks;
};

struct TrainingConfig {
    int epochs = 50;
    int batch_size = 128;
    double peak_lr = 3e-4;
    double warmup_frac = 0.05;
    double final_lr_frac = 0.1;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;

    void validate() const;
};

class EmptyCorpusError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Per source task, keeps harvest entries with fitness <= (1+keep_margin)*min
/// (minimum over that task's runs, non-finite entries never qualify) and
/// deduplicates identical token sequences within a task. Runs are grouped by
/// their `task` label, which must resolve into `tasks`.
TrainingCorpus harvest(const std::vector<RunLog>& runs,
                       const std::map<std::string, TaskData>& tasks, const SymbolTable& table,
                       const Vocabulary& vocab, int window, double keep_margin = 0.15,
                       bool dedup = true);

/// Drops records whose decoded tree nests a unary function directly inside the
/// same unary function.
TrainingCorpus filter_nested(TrainingCorpus corpus, const SymbolTable& table);

/// Column statistics over every task's padded (X,Y) matrix.
nn::ColumnStats compute_column_stats(const std::map<std::string, TaskData>& tasks, int m);

struct Checkpoint {
    std::uint32_t format = 1;
    nn::EncoderConfig enc_cfg;
    nn::DecoderConfig dec_cfg;
    Vocabulary vocab;
    nn::ColumnStats stats;
    nn::EncoderWeights enc;
    nn::DecoderWeights dec;
    float final_loss = 0.0f;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<float> losses;  // per optimizer step, mean cross entropy
    bool aborted_non_finite = false;
};

/// Joint next-token training of encoder and decoder: cross entropy on targets
/// shifted by one (<pad> ignored), each sequence conditioned on its task
/// latent. Linear warmup then cosine decay; AdamW.
TrainResult train(const TrainingCorpus& corpus, const nn::EncoderConfig& enc_cfg,
                  nn::DecoderConfig dec_cfg, const TrainingConfig& cfg);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

nn::EncoderWeights clone_weights(nn::EncoderWeights& w);
nn::DecoderWeights clone_weights(nn::DecoderWeights& w);

}  // namespace gep::train
