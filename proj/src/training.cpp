#include "gep/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <zlib.h>

#include <nlohmann/json.hpp>

#include "gep/parallel.hpp"

namespace gep::train {

using json = nlohmann::ordered_json;

void TrainingConfig::validate() const {
    if (epochs < 1 || batch_size < 1) {
        throw std::invalid_argument("epochs and batch_size must be positive");
    }
    if (!(peak_lr > 0.0) || !(weight_decay >= 0.0)) {
        throw std::invalid_argument("invalid optimizer settings");
    }
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0) ||
        !(final_lr_frac >= 0.0 && final_lr_frac <= 1.0)) {
        throw std::invalid_argument("invalid schedule settings");
    }
}

TrainingCorpus harvest(const std::vector<RunLog>& runs,
                       const std::map<std::string, TaskData>& tasks, const SymbolTable& table,
                       const Vocabulary& vocab, int window, double keep_margin, bool dedup) {
    TrainingCorpus corpus;
    corpus.tasks = tasks;
    corpus.vocab = vocab;

    // per-task minimum over finite entries
    std::map<std::string, double> task_min;
    for (const RunLog& run : runs) {
        if (tasks.find(run.task) == tasks.end()) {
            throw std::invalid_argument(fmt::format("run references unknown task '{}'", run.task));
        }
        for (const HarvestEntry& e : run.harvest) {
            if (e.fitness >= kFitnessSentinel) {
                continue;
            }
            auto [it, fresh] = task_min.emplace(run.task, e.fitness);
            if (!fresh) {
                it->second = std::min(it->second, e.fitness);
            }
        }
    }

    bool shaped = false;
    std::map<std::string, std::set<std::vector<int>>> seen;
    for (const RunLog& run : runs) {
        const auto mn = task_min.find(run.task);
        if (mn == task_min.end()) {
            continue;  // no finite entry for this task
        }
        const double threshold = (1.0 + keep_margin) * mn->second;
        for (const HarvestEntry& e : run.harvest) {
            if (e.fitness >= kFitnessSentinel || e.fitness > threshold) {
                continue;
            }
            if (!shaped) {
                corpus.shape = ChromosomeShape{static_cast<int>(e.chrom.genes.front().head.size()),
                                               static_cast<int>(e.chrom.genes.size())};
                corpus.linker = e.chrom.linker;
                shaped = true;
            }
            TokenSequence seq = tokenize(e.chrom, table, vocab, window);
            if (dedup && !seen[run.task].insert(seq.ids).second) {
                continue;
            }
            corpus.records.push_back(CorpusRecord{run.task, std::move(seq), e.fitness, e.chrom});
        }
    }
    if (corpus.records.empty()) {
        throw EmptyCorpusError("harvest produced an empty corpus");
    }
    return corpus;
}

TrainingCorpus filter_nested(TrainingCorpus corpus, const SymbolTable& table) {
    std::vector<CorpusRecord> kept;
    kept.reserve(corpus.records.size());
    for (CorpusRecord& r : corpus.records) {
        if (!has_nested_unary(decode_chromosome(r.chrom, table), table)) {
            kept.push_back(std::move(r));
        }
    }
    corpus.records = std::move(kept);
    return corpus;
}

nn::ColumnStats compute_column_stats(const std::map<std::string, TaskData>& tasks, int m) {
    std::vector<double> sum(static_cast<std::size_t>(m), 0.0);
    std::vector<double> sq(static_cast<std::size_t>(m), 0.0);
    std::size_t n = 0;
    for (const auto& [name, task] : tasks) {
        const MatrixF padded = nn::pad_features(task.X, task.y, m);
        for (std::size_t r = 0; r < padded.rows; ++r) {
            for (int c = 0; c < m; ++c) {
                const double v = padded.at(r, static_cast<std::size_t>(c));
                sum[static_cast<std::size_t>(c)] += v;
                sq[static_cast<std::size_t>(c)] += v * v;
            }
            ++n;
        }
    }
    if (n == 0) {
        throw std::invalid_argument("no task data to compute column stats from");
    }
    nn::ColumnStats stats;
    stats.mean.resize(static_cast<std::size_t>(m));
    stats.std.resize(static_cast<std::size_t>(m));
    for (int c = 0; c < m; ++c) {
        const double mean = sum[static_cast<std::size_t>(c)] / static_cast<double>(n);
        const double var = sq[static_cast<std::size_t>(c)] / static_cast<double>(n) - mean * mean;
        stats.mean[static_cast<std::size_t>(c)] = static_cast<float>(mean);
        stats.std[static_cast<std::size_t>(c)] =
            var > 1e-12 ? static_cast<float>(std::sqrt(var)) : 1.0f;
    }
    return stats;
}

nn::EncoderWeights clone_weights(nn::EncoderWeights& w) {
    nn::EncoderWeights c = w;
    c.visit([](const std::string&, nn::Tensor& t) { t = t.clone(); });
    return c;
}

nn::DecoderWeights clone_weights(nn::DecoderWeights& w) {
    nn::DecoderWeights c = w;
    c.visit([](const std::string&, nn::Tensor& t) { t = t.clone(); });
    return c;
}

namespace {

std::vector<nn::Parameter> collect_parameters(nn::EncoderWeights& enc, nn::DecoderWeights& dec) {
    std::vector<nn::Parameter> params;
    auto add = [&](const std::string& name, nn::Tensor& t) {
        params.push_back(nn::Parameter{name, t, {}, {}, 0});
    };
    enc.visit(add);
    dec.visit(add);
    return params;
}

/// Canonical training-time encoder input for one task: exactly n_max rows
/// (seeded subsample without replacement, or resample with replacement when the
/// task is smaller), padded to m columns and standardized.
MatrixF canonical_encoder_input(const TaskData& task, const nn::EncoderConfig& cfg,
                                const nn::ColumnStats& stats, std::uint64_t seed) {
    MatrixF padded = nn::pad_features(task.X, task.y, cfg.m);
    const std::size_t n_max = static_cast<std::size_t>(cfg.n_max);
    MatrixF rows(n_max, padded.cols);
    Rng rng(seed);
    if (padded.rows >= n_max) {
        std::vector<std::size_t> idx(padded.rows);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = i;
        }
        rng.shuffle(idx);
        idx.resize(n_max);
        std::sort(idx.begin(), idx.end());
        for (std::size_t r = 0; r < n_max; ++r) {
            std::copy_n(&padded.at(idx[r], 0), padded.cols, &rows.at(r, 0));
        }
    } else {
        for (std::size_t r = 0; r < n_max; ++r) {
            const std::size_t src = r < padded.rows ? r : rng.uniform_index(padded.rows);
            std::copy_n(&padded.at(src, 0), padded.cols, &rows.at(r, 0));
        }
    }
    nn::standardize(rows, stats);
    return rows;
}

double lr_at(const TrainingConfig& cfg, std::size_t step, std::size_t total_steps) {
    const double peak = cfg.peak_lr;
    const double fin = cfg.final_lr_frac * peak;
    std::size_t warmup = static_cast<std::size_t>(
        std::ceil(cfg.warmup_frac * static_cast<double>(total_steps)));
    if (step < warmup) {
        return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    if (total_steps <= warmup + 1) {
        return peak;
    }
    const double progress = static_cast<double>(step - warmup) /
                            static_cast<double>(total_steps - warmup - 1);
    return fin + 0.5 * (peak - fin) * (1.0 + std::cos(progress * std::numbers::pi));
}

constexpr std::size_t kChunkSize = 16;

struct ChunkResult {
    double loss_sum = 0.0;
    std::size_t count = 0;
    nn::EncoderWeights enc;
    nn::DecoderWeights dec;
    nn::EncoderBatchStats stats;
};

}  // namespace

TrainResult train(const TrainingCorpus& corpus, const nn::EncoderConfig& enc_cfg,
                  nn::DecoderConfig dec_cfg, const TrainingConfig& cfg) {
    cfg.validate();
    enc_cfg.validate();
    if (corpus.records.empty()) {
        throw EmptyCorpusError("cannot train on an empty corpus");
    }
    if (dec_cfg.vocab_size == 0) {
        dec_cfg.vocab_size = corpus.vocab.size();
    }
    if (dec_cfg.vocab_size != corpus.vocab.size()) {
        throw std::invalid_argument("decoder vocab_size does not match the corpus vocabulary");
    }

    TrainResult result;
    Rng rng(cfg.seed);

    nn::ColumnStats stats = compute_column_stats(corpus.tasks, enc_cfg.m);

    nn::EncoderWeights enc = nn::EncoderWeights::init(enc_cfg, rng);
    nn::DecoderWeights dec = nn::DecoderWeights::init(dec_cfg, rng);
    std::vector<nn::Parameter> params = collect_parameters(enc, dec);

    // one canonical encoder input per task
    std::map<std::string, MatrixF> task_inputs;
    {
        std::size_t t = 0;
        for (const auto& [name, task] : corpus.tasks) {
            task_inputs.emplace(
                name, canonical_encoder_input(task, enc_cfg, stats,
                                              Rng::derived(cfg.seed, 0x726f7773ULL + t).next_u64()));
            ++t;
        }
    }

    const std::size_t n = corpus.records.size();
    const std::size_t batches_per_epoch =
        (n + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size);
    const std::size_t total_steps = static_cast<std::size_t>(cfg.epochs) * batches_per_epoch;

    // longest sequence in the corpus bounds the teacher-forcing width
    std::size_t max_len = 0;
    for (const CorpusRecord& r : corpus.records) {
        max_len = std::max(max_len, r.tokens.true_length);
    }
    const int t_in = static_cast<int>(max_len) - 1;

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }

    nn::EncoderWeights good_enc = clone_weights(enc);
    nn::DecoderWeights good_dec = clone_weights(dec);
    float good_loss = 0.0f;
    std::size_t step = 0;
    bool aborted = false;

    for (int epoch = 0; epoch < cfg.epochs && !aborted; ++epoch) {
        rng.shuffle(order);
        for (std::size_t b0 = 0; b0 < n && !aborted; b0 += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t b1 = std::min(n, b0 + static_cast<std::size_t>(cfg.batch_size));
            const std::size_t batch_len = b1 - b0;
            const std::size_t n_chunks = (batch_len + kChunkSize - 1) / kChunkSize;

            std::vector<ChunkResult> chunks(n_chunks);
            std::exception_ptr failure;
            std::mutex failure_mutex;
            parallel_for(n_chunks, default_thread_count(), [&](std::size_t ci) {
                try {
                    const std::size_t c0 = b0 + ci * kChunkSize;
                    const std::size_t c1 = std::min(b1, c0 + kChunkSize);
                    const int cb = static_cast<int>(c1 - c0);

                    ChunkResult& res = chunks[ci];
                    res.enc = clone_weights(enc);
                    res.dec = clone_weights(dec);

                    // stacked encoder batch, one row block per record
                    nn::Tensor enc_in =
                        nn::Tensor::zeros({cb, enc_cfg.n_max, enc_cfg.m}, false);
                    const std::size_t block = static_cast<std::size_t>(enc_cfg.n_max) * enc_cfg.m;
                    for (int r = 0; r < cb; ++r) {
                        const CorpusRecord& rec = corpus.records[order[c0 + r]];
                        const MatrixF& input = task_inputs.at(rec.task);
                        std::copy_n(input.values.data(), block,
                                    enc_in.data() + static_cast<std::size_t>(r) * block);
                    }

                    std::vector<int> ids(static_cast<std::size_t>(cb) * t_in);
                    std::vector<int> targets(static_cast<std::size_t>(cb) * t_in);
                    for (int r = 0; r < cb; ++r) {
                        const TokenSequence& seq = corpus.records[order[c0 + r]].tokens;
                        for (int t = 0; t < t_in; ++t) {
                            ids[static_cast<std::size_t>(r) * t_in + t] =
                                seq.ids[static_cast<std::size_t>(t)];
                            targets[static_cast<std::size_t>(r) * t_in + t] =
                                seq.ids[static_cast<std::size_t>(t) + 1];
                        }
                    }

                    nn::Tape tape;
                    nn::Tensor z = nn::encoder_forward(&tape, enc_in, enc_cfg, res.enc, true,
                                                       &res.stats);
                    nn::Tensor logits =
                        nn::decoder_forward(&tape, ids, cb, t_in, z, dec_cfg, res.dec);
                    nn::Tensor loss =
                        nn::cross_entropy_sum(&tape, logits, targets, Vocabulary::kPad, &res.count);
                    res.loss_sum = loss.data()[0];
                    tape.backward(loss);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) {
                        failure = std::current_exception();
                    }
                }
            });

            double loss_sum = 0.0;
            std::size_t count = 0;
            if (!failure) {
                for (const ChunkResult& c : chunks) {
                    loss_sum += c.loss_sum;
                    count += c.count;
                }
            }
            const double mean_loss = count > 0 ? loss_sum / static_cast<double>(count) : 0.0;
            if (failure || !std::isfinite(mean_loss)) {
                fmt::print(stderr, "training aborted at step {}: non-finite loss\n", step);
                aborted = true;
                break;
            }

            // merge chunk gradients and batchnorm stats in chunk order
            const float inv_count = 1.0f / static_cast<float>(count);
            for (ChunkResult& c : chunks) {
                std::vector<nn::Parameter> cp = collect_parameters(c.enc, c.dec);
                for (std::size_t p = 0; p < params.size(); ++p) {
                    const float* src = cp[p].value.grad();
                    float* dst = params[p].value.grad();
                    for (std::size_t i = 0; i < params[p].value.numel(); ++i) {
                        dst[i] += src[i] * inv_count;
                    }
                }
                nn::merge_running_stats(enc, c.stats);
            }

            nn::AdamConfig adam;
            adam.lr = static_cast<float>(lr_at(cfg, step, total_steps));
            adam.weight_decay = static_cast<float>(cfg.weight_decay);
            nn::adam_step(params, adam);
            for (nn::Parameter& p : params) {
                p.value.zero_grad();
            }

            result.losses.push_back(static_cast<float>(mean_loss));
            good_enc = clone_weights(enc);
            good_dec = clone_weights(dec);
            good_loss = static_cast<float>(mean_loss);
            ++step;
        }
    }

    result.aborted_non_finite = aborted;
    result.checkpoint.format = 1;
    result.checkpoint.enc_cfg = enc_cfg;
    result.checkpoint.dec_cfg = dec_cfg;
    result.checkpoint.vocab = corpus.vocab;
    result.checkpoint.stats = std::move(stats);
    result.checkpoint.enc = std::move(good_enc);
    result.checkpoint.dec = std::move(good_dec);
    result.checkpoint.final_loss = good_loss;
    return result;
}

// ---- checkpoint persistence -------------------------------------------------

namespace {

constexpr char kMagic[8] = {'G', 'E', 'P', 'T', 'L', 'M', '0', '1'};

void append_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void append_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

std::uint32_t read_u32(const std::string& buf, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    }
    return v;
}

std::uint64_t read_u64(const std::string& buf, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    }
    return v;
}

struct NamedTensorView {
    std::string name;
    std::vector<int> shape;
    const float* data;
    std::size_t numel;
};

std::vector<NamedTensorView> enumerate_tensors(Checkpoint& ckpt) {
    std::vector<NamedTensorView> out;
    auto add_tensor = [&](const std::string& name, nn::Tensor& t) {
        out.push_back(NamedTensorView{name, t.shape(), t.data(), t.numel()});
    };
    ckpt.enc.visit(add_tensor);
    ckpt.dec.visit(add_tensor);
    ckpt.enc.visit_running([&](const std::string& name, nn::RunningStats& rs) {
        out.push_back(NamedTensorView{name + ".mean",
                                      {static_cast<int>(rs.mean.size())},
                                      rs.mean.data(),
                                      rs.mean.size()});
        out.push_back(NamedTensorView{name + ".var",
                                      {static_cast<int>(rs.var.size())},
                                      rs.var.data(),
                                      rs.var.size()});
    });
    return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    Checkpoint& c = const_cast<Checkpoint&>(ckpt);  // visit() is non-const; values untouched
    std::vector<NamedTensorView> tensors = enumerate_tensors(c);

    json header;
    header["format"] = ckpt.format;
    header["encoder"] = {{"d_emb", ckpt.enc_cfg.d_emb},
                         {"m", ckpt.enc_cfg.m},
                         {"n_max", ckpt.enc_cfg.n_max}};
    header["decoder"] = {{"d_emb", ckpt.dec_cfg.d_emb},
                         {"n_heads", ckpt.dec_cfg.n_heads},
                         {"n_blocks", ckpt.dec_cfg.n_blocks},
                         {"window", ckpt.dec_cfg.window},
                         {"vocab_size", ckpt.dec_cfg.vocab_size}};
    {
        std::ostringstream vs;
        ckpt.vocab.save(vs);
        header["vocabulary"] = vs.str();
    }
    header["column_stats"] = {{"mean", ckpt.stats.mean}, {"std", ckpt.stats.std}};
    header["final_loss"] = ckpt.final_loss;
    json dir = json::array();
    std::size_t offset = 0;
    for (const NamedTensorView& t : tensors) {
        dir.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.numel * sizeof(float);
    }
    header["tensors"] = dir;
    const std::string header_text = header.dump();

    std::string buf;
    buf.append(kMagic, sizeof(kMagic));
    append_u32(buf, ckpt.format);
    append_u64(buf, header_text.size());
    buf.append(header_text);
    for (const NamedTensorView& t : tensors) {
        buf.append(reinterpret_cast<const char*>(t.data), t.numel * sizeof(float));
    }
    std::uint32_t crc = static_cast<std::uint32_t>(
        ::crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
    append_u32(buf, crc);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error(fmt::format("cannot open '{}' for writing", path));
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error(fmt::format("cannot open checkpoint '{}'", path));
    }
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < sizeof(kMagic) + 4 + 8 + 4) {
        throw std::runtime_error("truncated checkpoint file");
    }
    if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("not a checkpoint file (bad magic)");
    }
    const std::uint32_t stored_crc = read_u32(buf, buf.size() - 4);
    const std::uint32_t actual_crc = static_cast<std::uint32_t>(::crc32(
        0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
    if (stored_crc != actual_crc) {
        throw std::runtime_error("checkpoint digest mismatch");
    }
    const std::uint32_t format = read_u32(buf, sizeof(kMagic));
    if (format != 1) {
        throw std::runtime_error(fmt::format("unsupported checkpoint format version {}", format));
    }
    const std::uint64_t header_len = read_u64(buf, sizeof(kMagic) + 4);
    const std::size_t header_at = sizeof(kMagic) + 4 + 8;
    if (header_at + header_len + 4 > buf.size()) {
        throw std::runtime_error("truncated checkpoint file");
    }
    const json header = json::parse(buf.substr(header_at, header_len));

    Checkpoint ckpt;
    ckpt.format = format;
    ckpt.enc_cfg.d_emb = header.at("encoder").at("d_emb").get<int>();
    ckpt.enc_cfg.m = header.at("encoder").at("m").get<int>();
    ckpt.enc_cfg.n_max = header.at("encoder").at("n_max").get<int>();
    ckpt.dec_cfg.d_emb = header.at("decoder").at("d_emb").get<int>();
    ckpt.dec_cfg.n_heads = header.at("decoder").at("n_heads").get<int>();
    ckpt.dec_cfg.n_blocks = header.at("decoder").at("n_blocks").get<int>();
    ckpt.dec_cfg.window = header.at("decoder").at("window").get<int>();
    ckpt.dec_cfg.vocab_size = header.at("decoder").at("vocab_size").get<int>();
    {
        std::istringstream vs(header.at("vocabulary").get<std::string>());
        ckpt.vocab = Vocabulary::load(vs);
    }
    ckpt.stats.mean = header.at("column_stats").at("mean").get<std::vector<float>>();
    ckpt.stats.std = header.at("column_stats").at("std").get<std::vector<float>>();
    ckpt.final_loss = header.at("final_loss").get<float>();

    Rng init_rng(0);
    ckpt.enc = nn::EncoderWeights::init(ckpt.enc_cfg, init_rng);
    ckpt.dec = nn::DecoderWeights::init(ckpt.dec_cfg, init_rng);

    const std::size_t blob_at = header_at + header_len;
    const std::size_t blob_size = buf.size() - 4 - blob_at;
    std::map<std::string, std::pair<std::size_t, std::vector<int>>> directory;
    for (const json& t : header.at("tensors")) {
        directory[t.at("name").get<std::string>()] = {t.at("offset").get<std::size_t>(),
                                                      t.at("shape").get<std::vector<int>>()};
    }
    auto read_into = [&](const std::string& name, float* dst, std::size_t numel,
                         const std::vector<int>& shape) {
        const auto it = directory.find(name);
        if (it == directory.end()) {
            throw std::runtime_error(fmt::format("checkpoint is missing tensor '{}'", name));
        }
        if (it->second.second != shape) {
            throw std::runtime_error(fmt::format("checkpoint tensor '{}' has the wrong shape", name));
        }
        const std::size_t bytes = numel * sizeof(float);
        if (it->second.first + bytes > blob_size) {
            throw std::runtime_error("truncated checkpoint file");
        }
        std::memcpy(dst, buf.data() + blob_at + it->second.first, bytes);
    };
    auto load_tensor = [&](const std::string& name, nn::Tensor& t) {
        read_into(name, t.data(), t.numel(), t.shape());
    };
    ckpt.enc.visit(load_tensor);
    ckpt.dec.visit(load_tensor);
    ckpt.enc.visit_running([&](const std::string& name, nn::RunningStats& rs) {
        read_into(name + ".mean", rs.mean.data(), rs.mean.size(),
                  {static_cast<int>(rs.mean.size())});
        read_into(name + ".var", rs.var.data(), rs.var.size(), {static_cast<int>(rs.var.size())});
    });
    return ckpt;
}

}  // namespace gep::train
