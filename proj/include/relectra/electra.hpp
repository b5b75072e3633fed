#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "relectra/checkpoint.hpp"
#include "relectra/errors.hpp"
#include "relectra/reformer.hpp"
#include "relectra/rng.hpp"
#include "relectra/tensor.hpp"
#include "relectra/tokenizer.hpp"

namespace relectra::electra {

using reformer::AttentionInstrumentation;
using reformer::Mode;
using reformer::ParamList;
using reformer::ReformerConfig;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct ElectraConfig {
    ReformerConfig generator_cfg;
    ReformerConfig discriminator_cfg;
    double mask_prob = 0.15;
    double disc_weight = 50.0;  // lambda
    bool tie_embeddings = true;
    std::uint64_t seed = 0;

    void validate() const {
        generator_cfg.validate();
        discriminator_cfg.validate();
        if (generator_cfg.vocab_size != discriminator_cfg.vocab_size) {
            throw ConfigError("electra: generator and discriminator must share vocab_size");
        }
        if (generator_cfg.max_seq_len != discriminator_cfg.max_seq_len) {
            throw ConfigError("electra: generator and discriminator must share max_seq_len");
        }
        if (mask_prob < 0.0 || mask_prob > 1.0) {
            throw ConfigError("electra: mask_prob must lie in [0, 1], got " + std::to_string(mask_prob));
        }
        if (disc_weight < 0.0) throw ConfigError("electra: disc_weight must be nonnegative");
        if (tie_embeddings && generator_cfg.embed_dim() != discriminator_cfg.embed_dim()) {
            throw ConfigError("electra: tied embeddings require equal embedding dims, got " +
                              std::to_string(generator_cfg.embed_dim()) + " vs " +
                              std::to_string(discriminator_cfg.embed_dim()));
        }
    }
};

struct TrainSchedule {
    std::size_t total_steps = 120000;
    std::size_t warmup_steps = 20000;
    std::size_t phase_switch_step = 80000;
    double lr_phase1 = 1e-5;
    double lr_phase2 = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t batch_size = 4;

    void validate() const {
        if (!(warmup_steps < phase_switch_step && phase_switch_step < total_steps)) {
            throw ConfigError("schedule: need warmup_steps < phase_switch_step < total_steps");
        }
        if (batch_size < 1) throw ConfigError("schedule: batch_size must be >= 1");
    }
};

// Linear warmup to the phase-1 rate, then global linear decay to zero at
// total_steps; the base rate switches from lr_phase1 to lr_phase2 at
// phase_switch_step.
inline double lr_at(std::size_t step, const TrainSchedule& s) {
    if (step > s.total_steps) {
        throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(s.total_steps) + "]");
    }
    double base = step < s.phase_switch_step ? s.lr_phase1 : s.lr_phase2;
    double factor = step < s.warmup_steps
                        ? static_cast<double>(step) / static_cast<double>(s.warmup_steps)
                        : static_cast<double>(s.total_steps - step) /
                              static_cast<double>(s.total_steps - s.warmup_steps);
    return base * factor;
}

struct StepMetrics {
    std::size_t step = 0;
    double gen_loss = 0;
    double disc_loss = 0;
    double combined_loss = 0;
    double gen_mlm_accuracy = 0;
    double disc_accuracy = 0;
    std::size_t masked_positions = 0;
    std::size_t disc_loss_positions = 0;  // must equal non-pad token count
    std::size_t nonpad_positions = 0;
};

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

template <typename Real>
struct ElectraModel {
    ElectraConfig cfg;
    ParamList<Real> gen;
    ParamList<Real> disc;

    static ElectraModel init(const ElectraConfig& cfg, Rng& rng, Real init_std = Real(0.02)) {
        cfg.validate();
        ElectraModel m;
        m.cfg = cfg;
        m.disc = reformer::init_reformer_params<Real>(cfg.discriminator_cfg, rng, init_std);
        m.disc.add("head.disc.w", Tensor<Real>::randn({cfg.discriminator_cfg.d_model, 1}, rng, init_std));
        m.disc.add("head.disc.b", Tensor<Real>::zeros({1}));
        m.gen = reformer::init_reformer_params<Real>(cfg.generator_cfg, rng, init_std);
        if (cfg.generator_cfg.embed_dim() != cfg.generator_cfg.d_model) {
            m.gen.add("head.mlm.proj",
                      Tensor<Real>::randn({cfg.generator_cfg.d_model, cfg.generator_cfg.embed_dim()}, rng, init_std));
        }
        m.gen.add("head.mlm.bias", Tensor<Real>::zeros({cfg.generator_cfg.vocab_size}));
        if (cfg.tie_embeddings) {
            // Same tensor object: updates through either model touch both.
            m.gen.replace("embed.tok", m.disc.at("embed.tok"));
        }
        return m;
    }

    Tensor<Real> generator_logits(const std::vector<int>& ids, Mode mode, Rng* dropout_rng = nullptr,
                                  AttentionInstrumentation* instr = nullptr) const {
        Tensor<Real> h = reformer::reformer_forward(ids, gen, cfg.generator_cfg, mode, dropout_rng, instr);
        if (gen.contains("head.mlm.proj")) h = matmul(h, gen.at("head.mlm.proj"));
        return add_rowvec(matmul_nt(h, gen.at("embed.tok")), gen.at("head.mlm.bias"));
    }

    // Per-token replaced/original logit, shape [L, 1].
    Tensor<Real> discriminator_logits(const std::vector<int>& ids, Mode mode, Rng* dropout_rng = nullptr,
                                      AttentionInstrumentation* instr = nullptr) const {
        Tensor<Real> h = reformer::reformer_forward(ids, disc, cfg.discriminator_cfg, mode, dropout_rng, instr);
        return add_rowvec(matmul(h, disc.at("head.disc.w")), disc.at("head.disc.b"));
    }

    // All names, checkpoint view ("disc." / "gen." prefixes; tied tensors
    // appear under both names).
    std::vector<std::pair<std::string, Tensor<Real>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<Real>>> out;
        for (const auto& [k, t] : disc.items) out.emplace_back("disc." + k, t);
        for (const auto& [k, t] : gen.items) out.emplace_back("gen." + k, t);
        return out;
    }

    // Optimization view: tied tensors appear once, first (disc) name wins.
    std::vector<std::pair<std::string, Tensor<Real>>> unique_params() const {
        std::vector<std::pair<std::string, Tensor<Real>>> out;
        std::unordered_set<const void*> seen;
        for (auto& [name, t] : named_params()) {
            if (seen.insert(t.node().get()).second) out.emplace_back(name, t);
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// masking / replacement sampling
// ---------------------------------------------------------------------------

// Independently selects each non-special position with probability mask_prob
// and replaces it with [MASK]. Specials ([PAD]/[UNK]/[CLS]/[SEP]/[MASK])
// are never selected.
inline std::pair<std::vector<int>, std::vector<std::size_t>> mask_tokens(const std::vector<int>& ids,
                                                                         double mask_prob,
                                                                         const tok::Vocab& vocab, Rng& rng) {
    std::vector<int> corrupt = ids;
    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (vocab.is_special(ids[i])) continue;
        if (rng.uniform() < mask_prob) {
            corrupt[i] = vocab.mask_id();
            positions.push_back(i);
        }
    }
    return {std::move(corrupt), std::move(positions)};
}

// Samples one token per masked position from the generator's categorical
// distribution; everything else copies the original. Operates on raw logit
// values, so no gradient flows into the discriminator input.
template <typename Real>
std::vector<int> sample_replacements(const Tensor<Real>& gen_logits, const std::vector<int>& corrupt_input,
                                     const std::vector<std::size_t>& masked_positions, Rng& rng) {
    auto [n, v] = detail::as_2d(gen_logits);
    if (n != corrupt_input.size()) {
        throw ShapeError("sample_replacements: logits rows " + std::to_string(n) + " vs input length " +
                         std::to_string(corrupt_input.size()));
    }
    std::vector<int> replaced = corrupt_input;
    std::vector<double> probs(v);
    for (std::size_t pos : masked_positions) {
        if (pos >= n) throw IndexError("sample_replacements: masked position out of range");
        const Real* row = gen_logits.data().data() + pos * v;
        double mx = static_cast<double>(row[0]);
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double sum = 0;
        for (std::size_t j = 0; j < v; ++j) {
            probs[j] = std::exp(static_cast<double>(row[j]) - mx);
            sum += probs[j];
        }
        double u = rng.uniform() * sum;
        double acc = 0;
        std::size_t pick = v - 1;
        for (std::size_t j = 0; j < v; ++j) {
            acc += probs[j];
            if (u < acc) {
                pick = j;
                break;
            }
        }
        replaced[pos] = static_cast<int>(pick);
    }
    return replaced;
}

// label_i = 1 iff replaced_i differs from original_i, for every position. A
// sampled token identical to the original counts as original.
inline std::vector<int> discriminator_labels(const std::vector<int>& original,
                                             const std::vector<int>& replaced_input) {
    if (original.size() != replaced_input.size()) {
        throw ShapeError("discriminator_labels: length mismatch " + std::to_string(original.size()) + " vs " +
                         std::to_string(replaced_input.size()));
    }
    std::vector<int> labels(original.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = original[i] != replaced_input[i] ? 1 : 0;
    return labels;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

template <typename Real>
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(const TrainSchedule& s)
        : beta1_(s.beta1), beta2_(s.beta2), eps_(s.eps), weight_decay_(s.weight_decay) {}

    void step(const std::vector<std::pair<std::string, Tensor<Real>>>& params, double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (const auto& [name, tensor] : params) {
            auto node = tensor.node();
            auto& [m, v] = moments_[name];
            if (m.empty()) {
                m.assign(node->data.size(), Real(0));
                v.assign(node->data.size(), Real(0));
            }
            const bool has_grad = !node->grad.empty();
            for (std::size_t i = 0; i < node->data.size(); ++i) {
                double g = has_grad ? static_cast<double>(node->grad[i]) : 0.0;
                double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * g;
                double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * g * g;
                m[i] = static_cast<Real>(mi);
                v[i] = static_cast<Real>(vi);
                double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps_) +
                                weight_decay_ * static_cast<double>(node->data[i]);
                node->data[i] = static_cast<Real>(static_cast<double>(node->data[i]) - lr * update);
            }
        }
    }

    std::uint64_t steps_taken() const { return t_; }
    void set_steps_taken(std::uint64_t t) { t_ = t; }

    // Ordered by name for deterministic serialization.
    std::map<std::string, std::pair<std::vector<Real>, std::vector<Real>>>& moments() { return moments_; }
    const std::map<std::string, std::pair<std::vector<Real>, std::vector<Real>>>& moments() const {
        return moments_;
    }

    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_ = 0.01;

private:
    std::uint64_t t_ = 0;
    std::map<std::string, std::pair<std::vector<Real>, std::vector<Real>>> moments_;
};

template <typename Real>
void zero_grads(const std::vector<std::pair<std::string, Tensor<Real>>>& params) {
    for (auto& [name, t] : params) const_cast<Tensor<Real>&>(t).zero_grad();
}

// ---------------------------------------------------------------------------
// the ELECTRA objective
// ---------------------------------------------------------------------------

template <typename Real>
struct ElectraLosses {
    Tensor<Real> gen_loss;   // MLM cross-entropy over masked positions only
    Tensor<Real> disc_loss;  // BCE over every non-pad position
    Tensor<Real> combined;   // gen + lambda * disc
    StepMetrics metrics;
};

// Runs masking, generator MLM, replacement sampling, and discriminator
// classification for one batch of sequences. Losses are means over all
// masked (generator) / all non-pad (discriminator) positions in the batch.
template <typename Real>
ElectraLosses<Real> electra_losses(const std::vector<std::vector<int>>& batch, const tok::Vocab& vocab,
                                   const ElectraModel<Real>& model, Mode mode, Rng& rng,
                                   Rng* dropout_rng = nullptr, AttentionInstrumentation* instr = nullptr) {
    const std::size_t max_len = model.cfg.generator_cfg.max_seq_len;
    for (const auto& seq : batch) {
        if (seq.size() > max_len) {
            throw LengthError("electra_losses: sequence length " + std::to_string(seq.size()) +
                              " exceeds max_seq_len " + std::to_string(max_len));
        }
    }
    const int pad_id = vocab.pad_id();
    ElectraLosses<Real> out;

    struct SeqTerm {
        Tensor<Real> gen_ce;
        Tensor<Real> disc_bce;
        std::size_t masked = 0;
        std::size_t nonpad = 0;
    };
    std::vector<SeqTerm> terms;
    std::size_t total_masked = 0, total_nonpad = 0;
    std::size_t gen_correct = 0, disc_correct = 0;

    for (const auto& seq : batch) {
        auto [corrupt, mpos] = mask_tokens(seq, model.cfg.mask_prob, vocab, rng);
        Tensor<Real> gen_logits = model.generator_logits(corrupt, mode, dropout_rng, instr);
        std::vector<int> replaced = sample_replacements(gen_logits, corrupt, mpos, rng);
        std::vector<int> labels = discriminator_labels(seq, replaced);
        Tensor<Real> disc_logits = model.discriminator_logits(replaced, mode, dropout_rng, instr);

        SeqTerm term;
        term.masked = mpos.size();

        // Generator loss on masked positions only.
        std::vector<std::size_t> targets(seq.size());
        std::vector<bool> ignore(seq.size(), true);
        for (std::size_t i = 0; i < seq.size(); ++i) targets[i] = static_cast<std::size_t>(seq[i]);
        for (std::size_t p : mpos) ignore[p] = false;
        term.gen_ce = cross_entropy_loss(gen_logits, targets, ignore);

        // Generator MLM accuracy at masked positions.
        auto [nrows, v] = detail::as_2d(gen_logits);
        (void)nrows;
        for (std::size_t p : mpos) {
            const Real* row = gen_logits.data().data() + p * v;
            std::size_t best = 0;
            for (std::size_t j = 1; j < v; ++j)
                if (row[j] > row[best]) best = j;
            if (static_cast<int>(best) == seq[p]) ++gen_correct;
        }

        // Discriminator loss over all non-pad positions.
        std::vector<std::size_t> keep;
        std::vector<int> kept_labels;
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (seq[i] == pad_id) continue;
            keep.push_back(i);
            kept_labels.push_back(labels[i]);
        }
        term.nonpad = keep.size();
        Tensor<Real> kept_logits = gather_rows(disc_logits, keep);
        term.disc_bce = binary_cross_entropy_with_logits(kept_logits, kept_labels);
        for (std::size_t i = 0; i < keep.size(); ++i) {
            int predicted = kept_logits.data()[i] > Real(0) ? 1 : 0;
            if (predicted == kept_labels[i]) ++disc_correct;
        }

        total_masked += term.masked;
        total_nonpad += term.nonpad;
        terms.push_back(std::move(term));
    }

    // Weighted combination turning per-sequence means into batch-global means.
    Tensor<Real> gen_total = Tensor<Real>::scalar(Real(0));
    Tensor<Real> disc_total = Tensor<Real>::scalar(Real(0));
    for (auto& term : terms) {
        if (term.masked > 0 && total_masked > 0) {
            gen_total = add(gen_total, scale(term.gen_ce,
                                             static_cast<Real>(static_cast<double>(term.masked) /
                                                               static_cast<double>(total_masked))));
        }
        if (term.nonpad > 0 && total_nonpad > 0) {
            disc_total = add(disc_total, scale(term.disc_bce,
                                               static_cast<Real>(static_cast<double>(term.nonpad) /
                                                                 static_cast<double>(total_nonpad))));
        }
    }

    out.gen_loss = gen_total;
    out.disc_loss = disc_total;
    out.combined = add(gen_total, scale(disc_total, static_cast<Real>(model.cfg.disc_weight)));
    out.metrics.gen_loss = static_cast<double>(out.gen_loss.value());
    out.metrics.disc_loss = static_cast<double>(out.disc_loss.value());
    out.metrics.combined_loss = static_cast<double>(out.combined.value());
    out.metrics.gen_mlm_accuracy =
        total_masked ? static_cast<double>(gen_correct) / static_cast<double>(total_masked) : 0.0;
    out.metrics.disc_accuracy =
        total_nonpad ? static_cast<double>(disc_correct) / static_cast<double>(total_nonpad) : 0.0;
    out.metrics.masked_positions = total_masked;
    out.metrics.disc_loss_positions = total_nonpad;
    out.metrics.nonpad_positions = total_nonpad;
    return out;
}

// One full training step: losses, backward, AdamW update at the given rate.
template <typename Real>
StepMetrics electra_step(const std::vector<std::vector<int>>& batch, const tok::Vocab& vocab,
                         ElectraModel<Real>& model, AdamW<Real>& opt, double lr, Rng& rng,
                         Rng* dropout_rng = nullptr) {
    auto losses = electra_losses(batch, vocab, model, Mode::train, rng, dropout_rng);
    if (!std::isfinite(losses.metrics.combined_loss)) {
        throw NumericError("electra_step: non-finite loss");
    }
    auto params = model.unique_params();
    backward(losses.combined);
    opt.step(params, lr);
    zero_grads(params);
    return losses.metrics;
}

// ---------------------------------------------------------------------------
// accuracy-curve smoothing
// ---------------------------------------------------------------------------

// Mean over points whose step lies within +/- window/2 of the center point,
// truncated at the boundaries.
inline std::vector<std::pair<double, double>> smooth_accuracy_curve(
    const std::vector<std::pair<double, double>>& points, double window = 200.0) {
    std::vector<std::pair<double, double>> out;
    out.reserve(points.size());
    double half = window / 2.0;
    std::size_t lo = 0, hi = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (i > 0 && points[i].first < points[i - 1].first) {
            throw ContractError("smooth_accuracy_curve: points must be sorted by step");
        }
        while (lo < points.size() && points[lo].first < points[i].first - half) ++lo;
        if (hi < lo) hi = lo;
        while (hi < points.size() && points[hi].first <= points[i].first + half) ++hi;
        double acc = 0;
        for (std::size_t j = lo; j < hi; ++j) acc += points[j].second;
        out.emplace_back(points[i].first, acc / static_cast<double>(hi - lo));
    }
    return out;
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

template <typename Real>
std::vector<TensorRecord> electra_to_records(const ElectraModel<Real>& model, const AdamW<Real>& opt,
                                             std::size_t step,
                                             const std::vector<std::pair<std::string, Rng>>& rngs) {
    std::vector<TensorRecord> records;
    for (const auto& [name, t] : model.named_params()) records.push_back(to_record(name, t));
    for (const auto& [name, mv] : opt.moments()) {
        TensorRecord m{"opt.m." + name, {static_cast<std::uint32_t>(mv.first.size())}, {}};
        m.values.assign(mv.first.begin(), mv.first.end());
        records.push_back(std::move(m));
        TensorRecord v{"opt.v." + name, {static_cast<std::uint32_t>(mv.second.size())}, {}};
        v.values.assign(mv.second.begin(), mv.second.end());
        records.push_back(std::move(v));
    }
    records.push_back(TensorRecord{"meta.step", {1}, {static_cast<float>(step)}});
    for (const auto& [name, rng] : rngs) {
        auto st = rng.state();
        records.push_back(TensorRecord{"meta.rng." + name, {8}, pack_u64s({st[0], st[1]})});
    }
    return records;
}

template <typename Real>
std::size_t electra_from_records(const std::vector<TensorRecord>& records, ElectraModel<Real>& model,
                                 AdamW<Real>& opt, std::vector<std::pair<std::string, Rng>>* rngs) {
    std::map<std::string, const TensorRecord*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;
    auto require = [&](const std::string& name) -> const TensorRecord& {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("checkpoint: missing record '" + name + "'");
        return *it->second;
    };
    for (auto& [name, t] : model.named_params()) {
        load_into(require(name), const_cast<Tensor<Real>&>(t));
    }
    opt.moments().clear();
    for (const auto& r : records) {
        if (r.name.rfind("opt.m.", 0) == 0) {
            auto& mv = opt.moments()[r.name.substr(6)];
            mv.first.assign(r.values.begin(), r.values.end());
        } else if (r.name.rfind("opt.v.", 0) == 0) {
            auto& mv = opt.moments()[r.name.substr(6)];
            mv.second.assign(r.values.begin(), r.values.end());
        }
    }
    std::size_t step = static_cast<std::size_t>(require("meta.step").values.at(0));
    opt.set_steps_taken(step);
    if (rngs) {
        for (auto& [name, rng] : *rngs) {
            auto u = unpack_u64s(require("meta.rng." + name).values);
            rng.set_state({u[0], u[1]});
        }
    }
    return step;
}

}  // namespace relectra::electra
