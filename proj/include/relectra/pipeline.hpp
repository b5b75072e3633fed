#pragma once

// End-to-end drivers shared by the CLI and the acceptance suite.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "relectra/config.hpp"
#include "relectra/corpus.hpp"
#include "relectra/electra.hpp"
#include "relectra/log.hpp"
#include "relectra/ner.hpp"
#include "relectra/tokenizer.hpp"

namespace relectra::pipeline {

inline std::string metrics_line(const electra::StepMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g", m.step, m.gen_loss, m.disc_loss,
                  m.gen_mlm_accuracy, m.disc_accuracy);
    return buf;
}

struct PretrainOutcome {
    std::size_t steps_run = 0;
    std::string metrics_path;
    std::string checkpoint_path;
    electra::StepMetrics last;
    std::vector<electra::StepMetrics> all_metrics;  // at metrics_every cadence
};

// Full pretraining run: masking, generator, sampling, discriminator, AdamW
// with the two-phase warmup/decay schedule, metrics stream, checkpointing.
template <typename Real>
PretrainOutcome run_pretrain(const RunConfig& rc, const tok::Vocab& vocab, corpus::MixedStream& stream,
                             const std::string& out_dir, const std::string& resume_path = "") {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    write_config_snapshot(rc, (fs::path(out_dir) / "effective_config.txt").string());

    electra::ElectraConfig ecfg = rc.electra_config();
    electra::TrainSchedule sched = rc.schedule();
    Rng init_rng(derive_seed(rc.seed, "init"));
    auto model = electra::ElectraModel<Real>::init(ecfg, init_rng);
    electra::AdamW<Real> opt(sched);
    std::vector<std::pair<std::string, Rng>> rngs{
        {"mask", Rng(derive_seed(rc.seed, "mask"))},
        {"dropout", Rng(derive_seed(rc.seed, "dropout"))},
    };

    std::size_t start_step = 0;
    if (!resume_path.empty()) {
        start_step = electra::electra_from_records(read_checkpoint(resume_path), model, opt, &rngs);
        log::info("resumed from " + resume_path + " at step " + std::to_string(start_step));
    }

    tok::Encoder encoder(vocab);
    corpus::Batcher batcher(stream, encoder, sched.batch_size, rc.max_seq_len);

    PretrainOutcome out;
    out.metrics_path = (fs::path(out_dir) / "metrics.csv").string();
    out.checkpoint_path = (fs::path(out_dir) / "checkpoint.rlct").string();
    std::ofstream metrics(out.metrics_path,
                          start_step ? std::ios::app : std::ios::trunc);
    if (!metrics) throw DataError("pretrain: cannot open metrics file " + out.metrics_path);
    if (start_step == 0) metrics << "step,gen_loss,disc_loss,gen_acc,disc_acc\n";

    auto save = [&](std::size_t step) {
        write_checkpoint(out.checkpoint_path, electra::electra_to_records(model, opt, step, rngs));
    };

    for (std::size_t step = start_step; step < sched.total_steps; ++step) {
        corpus::Batch batch = batcher.next();
        double lr = electra::lr_at(step + 1, sched);
        electra::StepMetrics m =
            electra::electra_step(batch.rows, vocab, model, opt, lr, rngs[0].second, &rngs[1].second);
        m.step = step + 1;
        out.last = m;
        ++out.steps_run;
        if ((step + 1) % rc.metrics_every == 0) {
            metrics << metrics_line(m) << "\n";
            out.all_metrics.push_back(m);
        }
        if (rc.checkpoint_every && (step + 1) % rc.checkpoint_every == 0) save(step + 1);
        if ((step + 1) % 100 == 0 || step + 1 == sched.total_steps) {
            log::info("step " + std::to_string(step + 1) + "/" + std::to_string(sched.total_steps) +
                      " gen_loss=" + std::to_string(m.gen_loss) + " disc_loss=" + std::to_string(m.disc_loss) +
                      " gen_acc=" + std::to_string(m.gen_mlm_accuracy) +
                      " disc_acc=" + std::to_string(m.disc_accuracy));
        }
    }
    metrics.flush();
    save(sched.total_steps);
    return out;
}

struct FinetuneOutcome {
    std::string checkpoint_path;
    std::string history_path;
    double best_dev_f1 = 0;
    std::size_t best_epoch = 0;
};

// Fine-tunes the discriminator body plus a fresh token-classification head.
template <typename Real>
FinetuneOutcome run_finetune(const RunConfig& rc, const tok::Vocab& vocab,
                             const std::vector<ner::WordExample>& train,
                             const std::vector<ner::WordExample>& dev, const std::string& pretrained_path,
                             const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    write_config_snapshot(rc, (fs::path(out_dir) / "effective_config.txt").string());

    ner::TagSet ts = ner::TagSet::named(rc.ner_labels);
    reformer::ReformerConfig body_cfg = rc.discriminator_config();
    Rng init_rng(derive_seed(rc.seed, "ner_init"));
    auto model = ner::NerModel<Real>::init(body_cfg, ts, init_rng);
    if (!pretrained_path.empty()) {
        model.load_pretrained_body(read_checkpoint(pretrained_path));
        log::info("loaded pretrained discriminator body from " + pretrained_path);
    }

    tok::Encoder encoder(vocab);
    ner::FinetuneOptions opts = rc.finetune_options();
    Rng ft_rng(derive_seed(rc.seed, "finetune"));
    auto result = ner::finetune(model, train, dev, encoder, opts, ft_rng);

    FinetuneOutcome out;
    out.checkpoint_path = (fs::path(out_dir) / "ner_checkpoint.rlct").string();
    out.history_path = (fs::path(out_dir) / "finetune_history.csv").string();
    out.best_dev_f1 = result.best_dev_f1;
    out.best_epoch = result.best_epoch;
    write_checkpoint(out.checkpoint_path, ner::ner_to_records(model));
    std::ofstream hist(out.history_path);
    hist << "epoch,train_loss,dev_f1\n";
    for (const auto& e : result.history) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g", e.epoch, e.train_loss, e.dev_f1);
        hist << buf << "\n";
    }
    log::info("finetune done: best dev f1 " + std::to_string(result.best_dev_f1) + " at epoch " +
              std::to_string(result.best_epoch));
    return out;
}

template <typename Real>
ner::MetricsReport run_eval_ner(const RunConfig& rc, const tok::Vocab& vocab,
                                const std::vector<ner::WordExample>& data, const std::string& checkpoint_path) {
    ner::TagSet ts = ner::TagSet::named(rc.ner_labels);
    reformer::ReformerConfig body_cfg = rc.discriminator_config();
    Rng init_rng(derive_seed(rc.seed, "ner_init"));
    auto model = ner::NerModel<Real>::init(body_cfg, ts, init_rng);
    ner::ner_from_records(read_checkpoint(checkpoint_path), model);

    tok::Encoder encoder(vocab);
    ner::FinetuneOptions opts = rc.finetune_options();
    std::vector<ner::TokenizedExample> token_examples;
    std::vector<std::vector<ner::EntitySpan>> gold;
    for (const auto& ex : data) {
        token_examples.push_back(ner::expand_example(ex, encoder, ts));
        gold.push_back(ner::bio_decode(ex.tags, ts));
    }
    return ner::evaluate_model(model, token_examples, gold, opts.max_len, opts.effective_stride());
}

}  // namespace relectra::pipeline
