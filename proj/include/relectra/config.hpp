#pragma once

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "relectra/electra.hpp"
#include "relectra/errors.hpp"
#include "relectra/ner.hpp"
#include "relectra/reformer.hpp"
#include "relectra/rng.hpp"

namespace relectra {

// Merged run configuration: flat "key = value" lines, "#" comments, unknown
// keys rejected. Every field below is a documented default.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string precision = "f32";  // f32 | f64

    // tokenizer / vocabulary
    std::size_t vocab_size = 30522;
    std::string vocab_path;
    bool lowercase = true;

    // discriminator encoder
    std::size_t d_model = 256;
    std::size_t n_heads = 4;
    std::size_t n_layers = 2;
    std::size_t d_ffn = 1024;
    std::size_t max_seq_len = 8192;
    std::size_t n_buckets = 0;  // 0 -> derived per sequence
    std::size_t n_hash_rounds = 4;
    std::size_t chunk_size = 64;
    double attention_dropout = 0.1;
    double hidden_dropout = 0.1;
    std::string attention_impl = "lsh";  // lsh | full

    // generator encoder (0 -> quarter width of the discriminator)
    std::size_t gen_d_model = 0;
    std::size_t gen_n_heads = 0;
    std::size_t gen_n_layers = 0;
    std::size_t gen_d_ffn = 0;

    // objective
    double mask_prob = 0.15;
    double disc_weight = 50.0;
    bool tie_embeddings = true;

    // optimizer schedule
    std::size_t total_steps = 120000;
    std::size_t warmup_steps = 20000;
    std::size_t phase_switch_step = 80000;
    double lr_phase1 = 1e-5;
    double lr_phase2 = 1e-6;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t batch_size = 4;

    // pipeline
    std::size_t metrics_every = 1;
    std::size_t checkpoint_every = 0;  // 0 -> final checkpoint only
    std::string corpus_manifest;

    // NER fine-tuning
    std::size_t ner_max_len = 1536;
    std::size_t ner_stride = 0;  // 0 -> ner_max_len / 2
    std::size_t ner_epochs = 10;
    std::size_t ner_batch_size = 1;
    double ner_lr = 3e-5;
    std::string ner_labels = "legal";  // legal | mixed

    // ---- derived views -------------------------------------------------

    std::size_t gen_d_model_eff() const { return gen_d_model ? gen_d_model : std::max<std::size_t>(1, d_model / 4); }
    std::size_t gen_n_heads_eff() const { return gen_n_heads ? gen_n_heads : std::max<std::size_t>(1, n_heads / 4); }
    std::size_t gen_n_layers_eff() const { return gen_n_layers ? gen_n_layers : n_layers; }
    std::size_t gen_d_ffn_eff() const { return gen_d_ffn ? gen_d_ffn : std::max<std::size_t>(1, d_ffn / 4); }

    reformer::ReformerConfig discriminator_config() const {
        reformer::ReformerConfig c;
        c.vocab_size = vocab_size;
        c.d_model = d_model;
        c.n_heads = n_heads;
        c.n_layers = n_layers;
        c.d_ffn = d_ffn;
        c.max_seq_len = max_seq_len;
        c.n_buckets = n_buckets;
        c.n_hash_rounds = n_hash_rounds;
        c.chunk_size = chunk_size;
        c.attention_dropout = attention_dropout;
        c.hidden_dropout = hidden_dropout;
        c.seed = derive_seed(seed, "discriminator");
        c.attention = attention_impl == "full" ? reformer::AttentionImpl::full : reformer::AttentionImpl::lsh;
        return c;
    }

    reformer::ReformerConfig generator_config() const {
        reformer::ReformerConfig c = discriminator_config();
        c.d_model = gen_d_model_eff();
        c.n_heads = gen_n_heads_eff();
        c.n_layers = gen_n_layers_eff();
        c.d_ffn = gen_d_ffn_eff();
        c.d_embed = tie_embeddings && c.d_model != d_model ? d_model : 0;
        c.seed = derive_seed(seed, "generator");
        return c;
    }

    electra::ElectraConfig electra_config() const {
        electra::ElectraConfig c;
        c.generator_cfg = generator_config();
        c.discriminator_cfg = discriminator_config();
        c.mask_prob = mask_prob;
        c.disc_weight = disc_weight;
        c.tie_embeddings = tie_embeddings;
        c.seed = derive_seed(seed, "electra");
        return c;
    }

    electra::TrainSchedule schedule() const {
        electra::TrainSchedule s;
        s.total_steps = total_steps;
        s.warmup_steps = warmup_steps;
        s.phase_switch_step = phase_switch_step;
        s.lr_phase1 = lr_phase1;
        s.lr_phase2 = lr_phase2;
        s.beta1 = adam_beta1;
        s.beta2 = adam_beta2;
        s.eps = adam_eps;
        s.weight_decay = weight_decay;
        s.batch_size = batch_size;
        return s;
    }

    ner::FinetuneOptions finetune_options() const {
        ner::FinetuneOptions o;
        o.epochs = ner_epochs;
        o.batch_size = ner_batch_size;
        o.lr = ner_lr;
        o.max_len = ner_max_len;
        o.stride = ner_stride;
        o.beta1 = adam_beta1;
        o.beta2 = adam_beta2;
        o.eps = adam_eps;
        o.weight_decay = weight_decay;
        return o;
    }

    void validate() const {
        auto fail = [](const std::string& key, const std::string& why) {
            throw ConfigError("config: " + key + ": " + why);
        };
        if (precision != "f32" && precision != "f64") fail("precision", "expected f32 or f64");
        if (attention_impl != "lsh" && attention_impl != "full") fail("attention_impl", "expected lsh or full");
        if (vocab_size < 6) fail("vocab_size", "too small to hold the special tokens");
        if (mask_prob < 0 || mask_prob > 1) fail("mask_prob", "must lie in [0, 1]");
        if (disc_weight < 0) fail("disc_weight", "must be nonnegative");
        if (d_model == 0 || n_heads == 0 || n_layers == 0 || d_ffn == 0) {
            fail("d_model", "architecture dimensions must be positive");
        }
        if (d_model % n_heads != 0) fail("n_heads", "d_model must be divisible by n_heads");
        if (gen_d_model_eff() % gen_n_heads_eff() != 0) {
            fail("gen_n_heads", "gen_d_model must be divisible by gen_n_heads");
        }
        if (n_buckets != 0 && (n_buckets < 2 || n_buckets % 2 != 0)) fail("n_buckets", "must be even and >= 2");
        if (n_hash_rounds < 1) fail("n_hash_rounds", "must be >= 1");
        if (chunk_size < 1) fail("chunk_size", "must be >= 1");
        if (attention_impl == "lsh" && max_seq_len % chunk_size != 0) {
            fail("max_seq_len", "must be divisible by chunk_size");
        }
        if (attention_dropout < 0 || attention_dropout >= 1) fail("attention_dropout", "must lie in [0, 1)");
        if (hidden_dropout < 0 || hidden_dropout >= 1) fail("hidden_dropout", "must lie in [0, 1)");
        if (!(warmup_steps < phase_switch_step)) {
            fail("warmup_steps", "must be smaller than phase_switch_step");
        }
        if (!(phase_switch_step < total_steps)) {
            fail("phase_switch_step", "must be smaller than total_steps");
        }
        if (lr_phase1 <= 0 || lr_phase2 <= 0) fail("lr_phase1", "learning rates must be positive");
        if (batch_size < 1) fail("batch_size", "must be >= 1");
        if (metrics_every < 1) fail("metrics_every", "must be >= 1");
        if (tie_embeddings && gen_n_layers_eff() > 0) {
            // embedding dims agree by construction (generator uses d_embed)
        }
        if (ner_max_len < 2) fail("ner_max_len", "must be >= 2");
        if (ner_stride != 0 && ner_stride >= ner_max_len) fail("ner_stride", "must be smaller than ner_max_len");
        if (attention_impl == "lsh" && ner_max_len % chunk_size != 0) {
            fail("ner_max_len", "must be divisible by chunk_size");
        }
        if (ner_max_len > max_seq_len) fail("ner_max_len", "must not exceed max_seq_len");
        if (ner_epochs > 10000) fail("ner_epochs", "implausibly large");
        if (ner_batch_size != 1) fail("ner_batch_size", "only batch size 1 is supported");
        if (ner_lr <= 0) fail("ner_lr", "must be positive");
        if (ner_labels != "legal" && ner_labels != "mixed") fail("ner_labels", "expected legal or mixed");
        // Construct derived configs so their own validation also runs.
        electra_config().validate();
        schedule().validate();
    }
};

namespace detail_config {

struct KeySpec {
    std::string name;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        unsigned long long r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return static_cast<std::size_t>(r);
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + ": expected a nonnegative integer, got '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    return static_cast<std::uint64_t>(parse_size(key, v));
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + ": expected a real number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("config: " + key + ": expected true or false, got '" + v + "'");
}

inline const std::vector<KeySpec>& key_table() {
    static const std::vector<KeySpec> keys = [] {
        std::vector<KeySpec> k;
        auto add_size = [&](const std::string& name, std::size_t RunConfig::* f) {
            k.push_back({name, [name, f](RunConfig& c, const std::string& v) { c.*f = parse_size(name, v); },
                         [f](const RunConfig& c) { return std::to_string(c.*f); }});
        };
        auto add_double = [&](const std::string& name, double RunConfig::* f) {
            k.push_back({name, [name, f](RunConfig& c, const std::string& v) { c.*f = parse_double(name, v); },
                         [f](const RunConfig& c) { return fmt_double(c.*f); }});
        };
        auto add_bool = [&](const std::string& name, bool RunConfig::* f) {
            k.push_back({name, [name, f](RunConfig& c, const std::string& v) { c.*f = parse_bool(name, v); },
                         [f](const RunConfig& c) { return c.*f ? "true" : "false"; }});
        };
        auto add_string = [&](const std::string& name, std::string RunConfig::* f) {
            k.push_back({name, [f](RunConfig& c, const std::string& v) { c.*f = v; },
                         [f](const RunConfig& c) { return c.*f; }});
        };
        k.push_back({"seed",
                     [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
                     [](const RunConfig& c) { return std::to_string(c.seed); }});
        add_string("precision", &RunConfig::precision);
        add_size("vocab_size", &RunConfig::vocab_size);
        add_string("vocab_path", &RunConfig::vocab_path);
        add_bool("lowercase", &RunConfig::lowercase);
        add_size("d_model", &RunConfig::d_model);
        add_size("n_heads", &RunConfig::n_heads);
        add_size("n_layers", &RunConfig::n_layers);
        add_size("d_ffn", &RunConfig::d_ffn);
        add_size("max_seq_len", &RunConfig::max_seq_len);
        add_size("n_buckets", &RunConfig::n_buckets);
        add_size("n_hash_rounds", &RunConfig::n_hash_rounds);
        add_size("chunk_size", &RunConfig::chunk_size);
        add_double("attention_dropout", &RunConfig::attention_dropout);
        add_double("hidden_dropout", &RunConfig::hidden_dropout);
        add_string("attention_impl", &RunConfig::attention_impl);
        add_size("gen_d_model", &RunConfig::gen_d_model);
        add_size("gen_n_heads", &RunConfig::gen_n_heads);
        add_size("gen_n_layers", &RunConfig::gen_n_layers);
        add_size("gen_d_ffn", &RunConfig::gen_d_ffn);
        add_double("mask_prob", &RunConfig::mask_prob);
        add_double("disc_weight", &RunConfig::disc_weight);
        add_bool("tie_embeddings", &RunConfig::tie_embeddings);
        add_size("total_steps", &RunConfig::total_steps);
        add_size("warmup_steps", &RunConfig::warmup_steps);
        add_size("phase_switch_step", &RunConfig::phase_switch_step);
        add_double("lr_phase1", &RunConfig::lr_phase1);
        add_double("lr_phase2", &RunConfig::lr_phase2);
        add_double("adam_beta1", &RunConfig::adam_beta1);
        add_double("adam_beta2", &RunConfig::adam_beta2);
        add_double("adam_eps", &RunConfig::adam_eps);
        add_double("weight_decay", &RunConfig::weight_decay);
        add_size("batch_size", &RunConfig::batch_size);
        add_size("metrics_every", &RunConfig::metrics_every);
        add_size("checkpoint_every", &RunConfig::checkpoint_every);
        add_string("corpus_manifest", &RunConfig::corpus_manifest);
        add_size("ner_max_len", &RunConfig::ner_max_len);
        add_size("ner_stride", &RunConfig::ner_stride);
        add_size("ner_epochs", &RunConfig::ner_epochs);
        add_size("ner_batch_size", &RunConfig::ner_batch_size);
        add_double("ner_lr", &RunConfig::ner_lr);
        add_string("ner_labels", &RunConfig::ner_labels);
        return k;
    }();
    return keys;
}

}  // namespace detail_config

inline RunConfig parse_config_text(const std::string& content) {
    RunConfig cfg;
    std::istringstream in(content);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            while (!s.empty() && tok::is_space(s.front())) s.erase(s.begin());
            while (!s.empty() && tok::is_space(s.back())) s.pop_back();
            return s;
        };
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        bool handled = false;
        for (const auto& spec : detail_config::key_table()) {
            if (spec.name == key) {
                spec.set(cfg, val);
                handled = true;
                break;
            }
        }
        if (!handled) throw ConfigError("config: unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

inline RunConfig parse_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_config_text(content);
}

inline std::string config_snapshot_text(const RunConfig& cfg) {
    std::string out = "# effective configuration (all resolved values)\n";
    for (const auto& spec : detail_config::key_table()) {
        out += spec.name;
        out += " = ";
        out += spec.get(cfg);
        out += "\n";
    }
    return out;
}

inline void write_config_snapshot(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("config: cannot open '" + path + "' for writing");
    out << config_snapshot_text(cfg);
}

}  // namespace relectra
