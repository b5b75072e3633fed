#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "relectra/config.hpp"
#include "relectra/corpus.hpp"
#include "relectra/log.hpp"
#include "relectra/ner.hpp"
#include "relectra/pipeline.hpp"
#include "relectra/tokenizer.hpp"

namespace relectra::cli {

namespace detail {

inline std::string slurp(const std::string& path) { return corpus::read_file(path); }

inline std::set<std::string> load_word_set(const std::string& path) {
    std::set<std::string> out;
    if (path.empty()) return out;
    std::istringstream in(slurp(path));
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        while (!line.empty() && tok::is_space(line.back())) line.pop_back();
        if (!line.empty()) out.insert(tok::ascii_lower(line));
    }
    return out;
}

// Gathers corpus text from a file or a directory of files.
inline std::string gather_corpus_text(const std::string& path) {
    namespace fs = std::filesystem;
    if (fs::is_directory(path)) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(path)) {
            if (e.is_regular_file()) files.push_back(e.path().string());
        }
        std::sort(files.begin(), files.end());
        std::string all;
        for (const auto& f : files) {
            all += slurp(f);
            all += "\n";
        }
        return all;
    }
    return slurp(path);
}

// Parties file: one "PLT<TAB>name" or "DEF<TAB>name" per line.
inline ner::HeaderParties load_parties(const std::string& path) {
    ner::HeaderParties parties;
    std::istringstream in(slurp(path));
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw DataError("parties: line " + std::to_string(line_no) + ": expected PLT|DEF<TAB>name");
        }
        std::string kind = line.substr(0, tab);
        std::string name = line.substr(tab + 1);
        if (kind == "PLT")
            parties.plaintiffs.push_back(name);
        else if (kind == "DEF")
            parties.defendants.push_back(name);
        else
            throw DataError("parties: line " + std::to_string(line_no) + ": unknown kind '" + kind + "'");
    }
    return parties;
}

inline RunConfig load_run_config(const std::string& config_path, std::uint64_t* seed_override) {
    RunConfig rc = config_path.empty() ? RunConfig{} : parse_config(config_path);
    if (seed_override) rc.seed = *seed_override;
    rc.validate();
    return rc;
}

}  // namespace detail

inline int run(int argc, const char* const* argv) {
    CLI::App app{"RELECTRA: Reformer-based ELECTRA pretraining and NER pipeline"};
    app.require_subcommand(1);

    // --- train-tokenizer ---
    auto* tt = app.add_subcommand("train-tokenizer", "Train a BPE tokenizer on a corpus");
    std::string tt_corpus, tt_out;
    std::size_t tt_vocab_size = 30522;
    bool tt_no_lowercase = false;
    tt->add_option("--corpus", tt_corpus, "Corpus file or directory")->required();
    tt->add_option("--vocab-size", tt_vocab_size, "Vocabulary budget (default 30522)");
    tt->add_option("--out", tt_out, "Output vocab file")->required();
    tt->add_flag("--no-lowercase", tt_no_lowercase, "Keep case as-is");

    // --- eval-tokenizer ---
    auto* et = app.add_subcommand("eval-tokenizer", "Count unique split-word errors on a text");
    std::string et_vocab, et_text, et_allowlist, et_legal, et_medical;
    et->add_option("--vocab", et_vocab, "Vocab file")->required();
    et->add_option("--text", et_text, "Text file to evaluate")->required();
    et->add_option("--allowlist", et_allowlist, "Abbreviation allowlist (one word per line)");
    et->add_option("--legal-lexicon", et_legal, "Legal lexicon (one word per line)");
    et->add_option("--medical-lexicon", et_medical, "Medical lexicon (one word per line)");

    // --- pretrain ---
    auto* pt = app.add_subcommand("pretrain", "Run ELECTRA pretraining");
    std::string pt_config, pt_corpus_dir, pt_out, pt_resume, pt_vocab;
    std::uint64_t pt_seed = 0;
    bool pt_seed_set = false;
    pt->add_option("--config", pt_config, "Run configuration file");
    pt->add_option("--corpus-dir", pt_corpus_dir, "Directory containing manifest.txt")->required();
    pt->add_option("--out", pt_out, "Output directory")->required();
    pt->add_option("--resume", pt_resume, "Checkpoint to resume from");
    pt->add_option("--vocab", pt_vocab, "Vocab file (overrides config vocab_path)");
    pt->add_option("--seed", pt_seed, "Root seed (overrides config)")->each([&](const std::string&) {
        pt_seed_set = true;
    });

    // --- finetune-ner ---
    auto* ft = app.add_subcommand("finetune-ner", "Fine-tune the discriminator for NER");
    std::string ft_config, ft_ckpt, ft_train, ft_dev, ft_vocab, ft_out, ft_labels = "legal";
    std::uint64_t ft_seed = 0;
    bool ft_seed_set = false;
    ft->add_option("--config", ft_config, "Run configuration file");
    ft->add_option("--checkpoint", ft_ckpt, "Pretraining checkpoint (optional)");
    ft->add_option("--train", ft_train, "Training data (token<TAB>tag lines)")->required();
    ft->add_option("--dev", ft_dev, "Dev data for best-epoch selection")->required();
    ft->add_option("--vocab", ft_vocab, "Vocab file")->required();
    ft->add_option("--out", ft_out, "Output directory")->required();
    ft->add_option("--labels", ft_labels, "Label set: legal|mixed");
    ft->add_option("--seed", ft_seed, "Root seed (overrides config)")->each([&](const std::string&) {
        ft_seed_set = true;
    });

    // --- eval-ner ---
    auto* ev = app.add_subcommand("eval-ner", "Evaluate a fine-tuned NER checkpoint");
    std::string ev_config, ev_ckpt, ev_data, ev_vocab, ev_labels = "legal";
    ev->add_option("--config", ev_config, "Run configuration file");
    ev->add_option("--checkpoint", ev_ckpt, "Fine-tuned NER checkpoint")->required();
    ev->add_option("--data", ev_data, "Evaluation data (token<TAB>tag lines)")->required();
    ev->add_option("--vocab", ev_vocab, "Vocab file")->required();
    ev->add_option("--labels", ev_labels, "Label set: legal|mixed");

    // --- auto-annotate ---
    auto* aa = app.add_subcommand("auto-annotate", "Annotate text via header parties and word lists");
    std::string aa_input, aa_parties, aa_wordlists, aa_out, aa_labels = "legal";
    std::size_t aa_max_edit = 1;
    aa->add_option("--input", aa_input, "Plain text file")->required();
    aa->add_option("--parties", aa_parties, "Party names (PLT|DEF<TAB>name lines)");
    aa->add_option("--wordlists", aa_wordlists, "Case-type word lists (#TYPE sections)");
    aa->add_option("--max-edit", aa_max_edit, "Per-word edit budget for inexact matching (default 1)");
    aa->add_option("--out", aa_out, "Output NER data file")->required();
    aa->add_option("--labels", aa_labels, "Label set: legal|mixed");

    // --- inspect-checkpoint ---
    auto* ic = app.add_subcommand("inspect-checkpoint", "List records in a checkpoint file");
    std::string ic_path;
    ic->add_option("--checkpoint", ic_path, "Checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*tt) {
            std::string text = detail::gather_corpus_text(tt_corpus);
            tok::Vocab v = tok::train_bpe(text, tt_vocab_size, tok::default_specials(), !tt_no_lowercase);
            tok::save_vocab(v, tt_out);
            std::printf("tokens=%zu merges=%zu\n", v.size(), v.merges.size());
            log::info("tokenizer written to " + tt_out);
        } else if (*et) {
            tok::Vocab v = tok::load_vocab(et_vocab);
            auto rep = tok::evaluate_tokenization(detail::slurp(et_text), v, detail::load_word_set(et_allowlist),
                                                  detail::load_word_set(et_legal),
                                                  detail::load_word_set(et_medical));
            std::printf("word_count,total_errors,legal_errors,medical_errors\n");
            std::printf("%zu,%zu,%zu,%zu\n", rep.word_count, rep.total_errors, rep.legal_errors,
                        rep.medical_errors);
            for (const auto& w : rep.error_words) std::printf("error_word,%s\n", w.c_str());
        } else if (*pt) {
            RunConfig rc = detail::load_run_config(pt_config, pt_seed_set ? &pt_seed : nullptr);
            std::string vocab_path = !pt_vocab.empty() ? pt_vocab : rc.vocab_path;
            if (vocab_path.empty()) {
                throw ConfigError("pretrain: no vocabulary; set vocab_path in the config or pass --vocab");
            }
            tok::Vocab vocab = tok::load_vocab(vocab_path);
            rc.vocab_size = vocab.size();
            rc.vocab_path = vocab_path;
            rc.validate();
            std::string manifest_path = (std::filesystem::path(pt_corpus_dir) / "manifest.txt").string();
            auto sources = corpus::parse_manifest(detail::slurp(manifest_path), pt_corpus_dir);
            for (auto& s : sources) corpus::load_source_documents(s);
            corpus::MixedStream stream(std::move(sources), Rng(derive_seed(rc.seed, "data")));
            if (rc.precision == "f64") {
                auto out = pipeline::run_pretrain<double>(rc, vocab, stream, pt_out, pt_resume);
                std::printf("steps=%zu metrics=%s checkpoint=%s\n", out.last.step, out.metrics_path.c_str(),
                            out.checkpoint_path.c_str());
            } else {
                auto out = pipeline::run_pretrain<float>(rc, vocab, stream, pt_out, pt_resume);
                std::printf("steps=%zu metrics=%s checkpoint=%s\n", out.last.step, out.metrics_path.c_str(),
                            out.checkpoint_path.c_str());
            }
        } else if (*ft) {
            RunConfig rc = detail::load_run_config(ft_config, ft_seed_set ? &ft_seed : nullptr);
            rc.ner_labels = ft_labels;
            tok::Vocab vocab = tok::load_vocab(ft_vocab);
            rc.vocab_size = vocab.size();
            rc.validate();
            ner::TagSet ts = ner::TagSet::named(rc.ner_labels);
            auto train = ner::read_ner_file(ft_train, ts);
            auto dev = ner::read_ner_file(ft_dev, ts);
            if (rc.precision == "f64") {
                auto out = pipeline::run_finetune<double>(rc, vocab, train, dev, ft_ckpt, ft_out);
                std::printf("best_dev_f1=%.9g best_epoch=%zu checkpoint=%s\n", out.best_dev_f1, out.best_epoch,
                            out.checkpoint_path.c_str());
            } else {
                auto out = pipeline::run_finetune<float>(rc, vocab, train, dev, ft_ckpt, ft_out);
                std::printf("best_dev_f1=%.9g best_epoch=%zu checkpoint=%s\n", out.best_dev_f1, out.best_epoch,
                            out.checkpoint_path.c_str());
            }
        } else if (*ev) {
            RunConfig rc = detail::load_run_config(ev_config, nullptr);
            rc.ner_labels = ev_labels;
            tok::Vocab vocab = tok::load_vocab(ev_vocab);
            rc.vocab_size = vocab.size();
            rc.validate();
            ner::TagSet ts = ner::TagSet::named(rc.ner_labels);
            auto data = ner::read_ner_file(ev_data, ts);
            ner::MetricsReport rep = rc.precision == "f64"
                                         ? pipeline::run_eval_ner<double>(rc, vocab, data, ev_ckpt)
                                         : pipeline::run_eval_ner<float>(rc, vocab, data, ev_ckpt);
            std::printf("label,precision,recall,f1\n");
            for (const auto& [label, prf] : rep.per_label) {
                std::printf("%s,%.9g,%.9g,%.9g\n", label.c_str(), prf.precision, prf.recall, prf.f1);
            }
            std::printf("overall,%.9g,%.9g,%.9g\n", rep.overall.precision, rep.overall.recall, rep.overall.f1);
        } else if (*aa) {
            std::string text = detail::slurp(aa_input);
            ner::HeaderParties parties =
                aa_parties.empty() ? ner::HeaderParties{} : detail::load_parties(aa_parties);
            std::vector<ner::WordList> lists =
                aa_wordlists.empty() ? std::vector<ner::WordList>{} : ner::load_wordlists(aa_wordlists);
            ner::TagSet ts = ner::TagSet::named(aa_labels);
            std::vector<std::string> words;
            for (auto& ws : tok::split_words(text)) words.push_back(ws.word);
            auto spans = ner::auto_annotate(words, parties, lists, aa_max_edit);
            ner::WordExample ex;
            ex.words = words;
            ex.tags = ner::bio_encode(spans, words.size(), ts);
            ner::write_ner_file(aa_out, {ex}, ts);
            std::printf("words=%zu spans=%zu out=%s\n", words.size(), spans.size(), aa_out.c_str());
        } else if (*ic) {
            auto records = read_checkpoint(ic_path);
            std::printf("name,rank,dims,values\n");
            for (const auto& r : records) {
                std::string dims;
                for (std::size_t i = 0; i < r.dims.size(); ++i) {
                    if (i) dims += "x";
                    dims += std::to_string(r.dims[i]);
                }
                std::printf("%s,%zu,%s,%zu\n", r.name.c_str(), r.dims.size(), dims.c_str(), r.values.size());
            }
        }
        return 0;
    } catch (const NumericError& e) {
        log::error(e.what());
        return 3;
    } catch (const UsageError& e) {
        log::error(e.what());
        return 1;
    } catch (const Error& e) {
        log::error(e.what());
        return 2;
    } catch (const std::exception& e) {
        log::error(e.what());
        return 2;
    }
}

}  // namespace relectra::cli
