#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "relectra/errors.hpp"
#include "relectra/rng.hpp"
#include "relectra/tensor.hpp"

namespace relectra::reformer {

enum class AttentionImpl { lsh, full };
enum class Mode { train, eval };

struct ReformerConfig {
    std::size_t vocab_size = 30522;
    std::size_t d_model = 256;
    std::size_t d_embed = 0;  // 0 -> d_model; differs when embeddings are tied across widths
    std::size_t n_heads = 4;
    std::size_t n_layers = 2;
    std::size_t d_ffn = 1024;
    std::size_t max_seq_len = 8192;
    std::size_t n_buckets = 0;  // even; 0 -> derived from sequence length and chunk size
    std::size_t n_hash_rounds = 4;
    std::size_t chunk_size = 64;
    double attention_dropout = 0.1;
    double hidden_dropout = 0.1;
    std::uint64_t seed = 0;
    int pad_id = 0;
    AttentionImpl attention = AttentionImpl::lsh;

    std::size_t embed_dim() const { return d_embed ? d_embed : d_model; }
    std::size_t head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (d_model == 0 || n_heads == 0 || n_layers == 0) {
            throw ConfigError("reformer: d_model, n_heads, n_layers must be positive");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("reformer: d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        }
        if (n_buckets != 0 && (n_buckets < 2 || n_buckets % 2 != 0)) {
            throw ConfigError("reformer: n_buckets must be even and >= 2, got " + std::to_string(n_buckets));
        }
        if (n_hash_rounds < 1) throw ConfigError("reformer: n_hash_rounds must be >= 1");
        if (chunk_size < 1) throw ConfigError("reformer: chunk_size must be >= 1");
        if (attention == AttentionImpl::lsh && max_seq_len % chunk_size != 0) {
            throw ConfigError("reformer: max_seq_len " + std::to_string(max_seq_len) +
                              " not divisible by chunk_size " + std::to_string(chunk_size));
        }
        if (attention_dropout < 0 || attention_dropout >= 1 || hidden_dropout < 0 || hidden_dropout >= 1) {
            throw ConfigError("reformer: dropout probabilities must lie in [0, 1)");
        }
    }
};

// Counts the work attention actually performs; used to verify the
// sub-quadratic claim without relying on wall clock.
struct AttentionInstrumentation {
    std::uint64_t pairs_computed = 0;     // (query, key) score evaluations for real queries
    std::uint64_t peak_score_buffer = 0;  // largest score matrix materialized at once

    void record(std::uint64_t pairs, std::uint64_t buffer_elems) {
        pairs_computed += pairs;
        peak_score_buffer = std::max(peak_score_buffer, buffer_elems);
    }
};

// Optional capture of attention internals for property tests.
template <typename Real>
struct AttentionDebug {
    std::size_t padded_len = 0;
    // One dense [L', L'] weight matrix per hash round (zero where not attended).
    std::vector<std::vector<Real>> round_weights;
    // Row-major [L', n_rounds] softmax mixing weights.
    std::vector<Real> mixing;
};

// ---------------------------------------------------------------------------
// LSH hashing
// ---------------------------------------------------------------------------

// Random rotation used by one hash round: [d_head, n_buckets/2] standard
// normal entries drawn row-major from the round seed.
template <typename Real>
Tensor<Real> lsh_rotation(std::size_t d_head, std::size_t n_buckets, std::uint64_t round_seed) {
    if (n_buckets < 2 || n_buckets % 2 != 0) {
        throw ConfigError("hash_vectors: n_buckets must be even and >= 2, got " + std::to_string(n_buckets));
    }
    Rng rng(round_seed);
    return Tensor<Real>::randn({d_head, n_buckets / 2}, rng);
}

// bucket(x) = argmax over [x*R ; -x*R]. Operates on raw values (hashing is
// not differentiated through).
template <typename Real>
std::vector<std::size_t> hash_vectors(const Tensor<Real>& x, std::size_t n_buckets, std::uint64_t round_seed) {
    auto [n, d] = detail::as_2d(x);
    Tensor<Real> rot = lsh_rotation<Real>(d, n_buckets, round_seed);
    std::size_t half = n_buckets / 2;
    std::vector<std::size_t> buckets(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Real* row = x.data().data() + i * d;
        std::size_t best = 0;
        Real best_v = 0;
        for (std::size_t b = 0; b < half; ++b) {
            Real acc = 0;
            for (std::size_t k = 0; k < d; ++k) acc += row[k] * rot.data()[k * half + b];
            if (b == 0 || acc > best_v) {
                best_v = acc;
                best = b;
            }
            if (-acc > best_v) {
                best_v = -acc;
                best = b + half;
            }
        }
        buckets[i] = best;
    }
    return buckets;
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

namespace detail2 {

// Builds an additive mask row and applies the isolated-query fallback: a
// query whose every candidate is masked attends to itself instead.
template <typename Real>
void fallback_to_self(std::vector<Real>& mask_row, std::size_t self_col) {
    for (Real m : mask_row)
        if (m == Real(0)) return;
    mask_row[self_col] = Real(0);
}

}  // namespace detail2

// Full O(L^2) attention with shared query/key projection; the equivalence
// oracle for the LSH path. Self-position is masked when exclude_self unless
// it is the only available target.
template <typename Real>
Tensor<Real> full_attention(const Tensor<Real>& qk, const Tensor<Real>& v, bool exclude_self,
                            AttentionInstrumentation* instr = nullptr,
                            const std::vector<bool>* key_valid = nullptr) {
    auto [n, d] = detail::as_2d(qk);
    auto [nv, dv] = detail::as_2d(v);
    if (nv != n || dv != d) {
        throw ShapeError("full_attention: qk " + shape_str(qk.shape()) + " vs v " + shape_str(v.shape()));
    }
    if (key_valid && key_valid->size() != n) throw ShapeError("full_attention: key mask length mismatch");
    if (instr) instr->record(static_cast<std::uint64_t>(n) * n, static_cast<std::uint64_t>(n) * n);

    Real inv_sqrt_d = Real(1) / std::sqrt(static_cast<Real>(d));
    Tensor<Real> scores = scale(matmul_nt(qk, qk), inv_sqrt_d);

    std::vector<Real> mask(n * n, Real(0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            bool ok = true;
            if (key_valid && !(*key_valid)[j]) ok = false;
            if (exclude_self && n > 1 && i == j) ok = false;
            if (!ok) mask[i * n + j] = kMaskedScore<Real>;
        }
        std::vector<Real> row(mask.begin() + i * n, mask.begin() + (i + 1) * n);
        detail2::fallback_to_self(row, i);
        std::copy(row.begin(), row.end(), mask.begin() + i * n);
    }
    Tensor<Real> masked = add(scores, Tensor<Real>::from({n, n}, std::move(mask)));
    return matmul(softmax_rows(masked), v);
}

struct LshAttentionArgs {
    std::size_t n_buckets = 0;  // 0 -> 2 * n_chunks
    std::size_t n_hash_rounds = 1;
    std::size_t chunk_size = 64;
    std::uint64_t seed = 0;      // per-(layer, head) hash seed base
    double attention_dropout = 0;
    Rng* dropout_rng = nullptr;  // active only when non-null
};

// Multi-round bucketed LSH attention. Positions are stably sorted by
// (bucket, position) per round and chunked; each query attends to same-bucket
// keys in its own chunk and the (circularly) previous chunk. Round outputs
// are combined with softmax weights over the per-round log-normalizers.
template <typename Real>
Tensor<Real> lsh_attention(const Tensor<Real>& qk, const Tensor<Real>& v, const LshAttentionArgs& args,
                           AttentionInstrumentation* instr = nullptr,
                           const std::vector<bool>* key_valid = nullptr,
                           AttentionDebug<Real>* debug = nullptr) {
    auto [n, d] = detail::as_2d(qk);
    auto [nv, dv] = detail::as_2d(v);
    if (nv != n || dv != d) {
        throw ShapeError("lsh_attention: qk " + shape_str(qk.shape()) + " vs v " + shape_str(v.shape()));
    }
    if (key_valid && key_valid->size() != n) throw ShapeError("lsh_attention: key mask length mismatch");
    const std::size_t m = args.chunk_size;
    if (m < 1) throw ConfigError("lsh_attention: chunk_size must be >= 1");

    // Pad to a chunk multiple with zero (invalid) rows.
    std::size_t padded = (n + m - 1) / m * m;
    Tensor<Real> qk_p = qk;
    Tensor<Real> v_p = v;
    std::vector<bool> valid(padded, true);
    if (key_valid) {
        for (std::size_t i = 0; i < n; ++i) valid[i] = (*key_valid)[i];
    }
    for (std::size_t i = n; i < padded; ++i) valid[i] = false;
    if (padded != n) {
        Tensor<Real> zero_pad = Tensor<Real>::zeros({padded - n, d});
        qk_p = concat_rows<Real>({qk, zero_pad});
        v_p = concat_rows<Real>({v, Tensor<Real>::zeros({padded - n, d})});
    }

    const std::size_t n_chunks = padded / m;
    const std::size_t n_buckets = args.n_buckets ? args.n_buckets : std::max<std::size_t>(2, 2 * n_chunks);
    if (n_buckets % 2 != 0) throw ConfigError("lsh_attention: n_buckets must be even");
    const Real inv_sqrt_d = Real(1) / std::sqrt(static_cast<Real>(d));

    if (debug) {
        debug->padded_len = padded;
        debug->round_weights.assign(args.n_hash_rounds, std::vector<Real>(padded * padded, Real(0)));
        debug->mixing.clear();
    }

    std::vector<Tensor<Real>> round_outputs;
    std::vector<Tensor<Real>> round_logz;
    round_outputs.reserve(args.n_hash_rounds);
    round_logz.reserve(args.n_hash_rounds);

    for (std::size_t round = 0; round < args.n_hash_rounds; ++round) {
        std::uint64_t round_seed = derive_seed(args.seed, "lsh_round", round);
        std::vector<std::size_t> buckets = hash_vectors(qk_p, n_buckets, round_seed);

        std::vector<std::size_t> order(padded);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return buckets[a] < buckets[b]; });
        std::vector<std::size_t> inverse(padded);
        for (std::size_t i = 0; i < padded; ++i) inverse[order[i]] = i;

        Tensor<Real> qk_s = gather_rows(qk_p, order);
        Tensor<Real> v_s = gather_rows(v_p, order);

        std::vector<Tensor<Real>> chunk_outs;
        std::vector<Tensor<Real>> chunk_logz;
        chunk_outs.reserve(n_chunks);
        chunk_logz.reserve(n_chunks);
        for (std::size_t c = 0; c < n_chunks; ++c) {
            // Window: previous chunk (circular) followed by own chunk. A
            // single chunk covers the whole sequence by itself.
            std::size_t prev = (c + n_chunks - 1) % n_chunks;
            bool has_prev = n_chunks > 1;
            std::size_t w = has_prev ? 2 * m : m;

            Tensor<Real> q = slice_rows(qk_s, c * m, m);
            Tensor<Real> k_win, v_win;
            if (has_prev) {
                k_win = concat_rows<Real>({slice_rows(qk_s, prev * m, m), q});
                v_win = concat_rows<Real>({slice_rows(v_s, prev * m, m), slice_rows(v_s, c * m, m)});
            } else {
                k_win = q;
                v_win = v_s;
            }

            // Window column j corresponds to sorted position win_pos[j].
            auto win_pos = [&](std::size_t j) {
                if (!has_prev) return j;
                return j < m ? prev * m + j : c * m + (j - m);
            };

            std::vector<Real> mask(m * w, Real(0));
            std::size_t real_queries = 0;
            for (std::size_t i = 0; i < m; ++i) {
                std::size_t qi = order[c * m + i];  // original index of this query
                if (valid[qi]) ++real_queries;
                std::size_t qb = buckets[qi];
                std::size_t self_col = has_prev ? m + i : i;
                for (std::size_t j = 0; j < w; ++j) {
                    std::size_t kj = order[win_pos(j)];
                    bool ok = valid[kj] && buckets[kj] == qb && kj != qi;
                    if (!ok) mask[i * w + j] = kMaskedScore<Real>;
                }
                std::vector<Real> row(mask.begin() + i * w, mask.begin() + (i + 1) * w);
                detail2::fallback_to_self(row, self_col);
                std::copy(row.begin(), row.end(), mask.begin() + i * w);
            }
            if (instr) instr->record(static_cast<std::uint64_t>(real_queries) * w,
                                     static_cast<std::uint64_t>(m) * w);

            Tensor<Real> scores = add(scale(matmul_nt(q, k_win), inv_sqrt_d),
                                      Tensor<Real>::from({m, w}, std::move(mask)));
            Tensor<Real> logz = logsumexp_rows(scores);
            Tensor<Real> attn = softmax_rows(scores);
            if (debug) {
                // Recorded at original positions, not sorted ones.
                auto& dense = debug->round_weights[round];
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        dense[order[c * m + i] * padded + order[win_pos(j)]] += attn.data()[i * w + j];
            }
            if (args.dropout_rng && args.attention_dropout > 0) {
                attn = dropout(attn, args.attention_dropout, *args.dropout_rng, true);
            }
            chunk_outs.push_back(matmul(attn, v_win));
            chunk_logz.push_back(logz);
        }

        Tensor<Real> out_sorted = n_chunks > 1 ? concat_rows(chunk_outs) : chunk_outs[0];
        Tensor<Real> logz_sorted = n_chunks > 1 ? concat_rows(chunk_logz) : chunk_logz[0];
        round_outputs.push_back(gather_rows(out_sorted, inverse));
        round_logz.push_back(gather_rows(logz_sorted, inverse));
    }

    Tensor<Real> out;
    if (args.n_hash_rounds == 1) {
        out = round_outputs[0];
        if (debug) debug->mixing.assign(padded, Real(1));
    } else {
        Tensor<Real> mix = softmax_rows(concat_cols(round_logz));  // [padded, rounds]
        if (debug) debug->mixing = mix.data();
        for (std::size_t r = 0; r < args.n_hash_rounds; ++r) {
            Tensor<Real> weighted = mul_colvec(round_outputs[r], slice_cols(mix, r, 1));
            out = (r == 0) ? weighted : add(out, weighted);
        }
    }
    if (padded != n) out = slice_rows(out, 0, n);
    return out;
}

// Convenience overload driven by a model config (per-layer/head salt baked
// into args.seed by the caller).
template <typename Real>
Tensor<Real> lsh_attention(const Tensor<Real>& qk, const Tensor<Real>& v, const ReformerConfig& cfg,
                           AttentionInstrumentation* instr = nullptr,
                           const std::vector<bool>* key_valid = nullptr,
                           AttentionDebug<Real>* debug = nullptr) {
    auto [n, d] = detail::as_2d(qk);
    (void)d;
    if (n > cfg.max_seq_len) {
        throw LengthError("lsh_attention: length " + std::to_string(n) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
    }
    LshAttentionArgs args;
    args.n_buckets = cfg.n_buckets;
    args.n_hash_rounds = cfg.n_hash_rounds;
    args.chunk_size = cfg.chunk_size;
    args.seed = cfg.seed;
    return lsh_attention(qk, v, args, instr, key_valid, debug);
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

template <typename Real>
struct ParamList {
    std::vector<std::pair<std::string, Tensor<Real>>> items;

    Tensor<Real>& add(const std::string& name, Tensor<Real> t) {
        t.set_requires_grad(true);
        items.emplace_back(name, std::move(t));
        return items.back().second;
    }

    Tensor<Real>& at(const std::string& name) {
        for (auto& [k, t] : items)
            if (k == name) return t;
        throw IndexError("params: no tensor named '" + name + "'");
    }

    const Tensor<Real>& at(const std::string& name) const {
        for (const auto& [k, t] : items)
            if (k == name) return t;
        throw IndexError("params: no tensor named '" + name + "'");
    }

    bool contains(const std::string& name) const {
        for (const auto& [k, t] : items)
            if (k == name) return true;
        return false;
    }

    void replace(const std::string& name, Tensor<Real> t) {
        for (auto& [k, cur] : items) {
            if (k == name) {
                t.set_requires_grad(true);
                cur = std::move(t);
                return;
            }
        }
        throw IndexError("params: no tensor named '" + name + "'");
    }
};

// Parameter name contract (checkpoint compatibility):
//   embed.tok, embed.pos, [embed.proj],
//   layer.<i>.attn.qk|v|out, layer.<i>.ffn.w1|b1|w2|b2,
//   layer.<i>.ln1|ln2.gamma|beta
template <typename Real>
ParamList<Real> init_reformer_params(const ReformerConfig& cfg, Rng& rng, Real init_std = Real(0.02)) {
    cfg.validate();
    ParamList<Real> p;
    std::size_t de = cfg.embed_dim();
    p.add("embed.tok", Tensor<Real>::randn({cfg.vocab_size, de}, rng, init_std));
    p.add("embed.pos", Tensor<Real>::randn({cfg.max_seq_len, de}, rng, init_std));
    if (de != cfg.d_model) p.add("embed.proj", Tensor<Real>::randn({de, cfg.d_model}, rng, init_std));
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        std::string base = "layer." + std::to_string(i) + ".";
        p.add(base + "attn.qk", Tensor<Real>::randn({cfg.d_model, cfg.d_model}, rng, init_std));
        p.add(base + "attn.v", Tensor<Real>::randn({cfg.d_model, cfg.d_model}, rng, init_std));
        p.add(base + "attn.out", Tensor<Real>::randn({cfg.d_model, cfg.d_model}, rng, init_std));
        p.add(base + "ln1.gamma", Tensor<Real>::filled({cfg.d_model}, Real(1)));
        p.add(base + "ln1.beta", Tensor<Real>::zeros({cfg.d_model}));
        p.add(base + "ffn.w1", Tensor<Real>::randn({cfg.d_model, cfg.d_ffn}, rng, init_std));
        p.add(base + "ffn.b1", Tensor<Real>::zeros({cfg.d_ffn}));
        p.add(base + "ffn.w2", Tensor<Real>::randn({cfg.d_ffn, cfg.d_model}, rng, init_std));
        p.add(base + "ffn.b2", Tensor<Real>::zeros({cfg.d_model}));
        p.add(base + "ln2.gamma", Tensor<Real>::filled({cfg.d_model}, Real(1)));
        p.add(base + "ln2.beta", Tensor<Real>::zeros({cfg.d_model}));
    }
    return p;
}

// ---------------------------------------------------------------------------
// encoder forward
// ---------------------------------------------------------------------------

// Token + learned absolute position embeddings, then n_layers of
// (LSH attention, residual, layer norm; feed-forward, residual, layer norm).
// Sequences are padded with pad_id to a chunk multiple; padded keys carry
// zero attention weight and padded outputs are sliced away.
template <typename Real>
Tensor<Real> reformer_forward(const std::vector<int>& ids, const ParamList<Real>& params,
                              const ReformerConfig& cfg, Mode mode, Rng* dropout_rng = nullptr,
                              AttentionInstrumentation* instr = nullptr) {
    if (ids.empty()) throw ContractError("reformer_forward: empty input");
    if (ids.size() > cfg.max_seq_len) {
        throw LengthError("reformer_forward: length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
    }
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
            throw IndexError("reformer_forward: token id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(cfg.vocab_size) + ")");
        }
    }
    const std::size_t n_orig = ids.size();
    std::vector<int> padded_ids = ids;
    if (cfg.attention == AttentionImpl::lsh) {
        std::size_t target = (n_orig + cfg.chunk_size - 1) / cfg.chunk_size * cfg.chunk_size;
        padded_ids.resize(target, cfg.pad_id);
    }
    const std::size_t n = padded_ids.size();
    std::vector<bool> valid(n);
    for (std::size_t i = 0; i < n; ++i) valid[i] = padded_ids[i] != cfg.pad_id;

    bool train = mode == Mode::train && dropout_rng != nullptr;
    std::vector<std::size_t> rows(padded_ids.begin(), padded_ids.end());
    Tensor<Real> x = add(gather_rows(params.at("embed.tok"), rows), slice_rows(params.at("embed.pos"), 0, n));
    if (cfg.embed_dim() != cfg.d_model) x = matmul(x, params.at("embed.proj"));
    if (train) x = dropout(x, cfg.hidden_dropout, *dropout_rng, true);

    const std::size_t dh = cfg.head_dim();
    for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
        std::string base = "layer." + std::to_string(layer) + ".";
        Tensor<Real> qk_all = matmul(x, params.at(base + "attn.qk"));
        Tensor<Real> v_all = matmul(x, params.at(base + "attn.v"));
        std::vector<Tensor<Real>> heads;
        heads.reserve(cfg.n_heads);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            Tensor<Real> qh = cfg.n_heads == 1 ? qk_all : slice_cols(qk_all, h * dh, dh);
            Tensor<Real> vh = cfg.n_heads == 1 ? v_all : slice_cols(v_all, h * dh, dh);
            if (cfg.attention == AttentionImpl::full) {
                heads.push_back(full_attention(qh, vh, /*exclude_self=*/true, instr, &valid));
            } else {
                LshAttentionArgs args;
                args.n_buckets = cfg.n_buckets;
                args.n_hash_rounds = cfg.n_hash_rounds;
                args.chunk_size = cfg.chunk_size;
                args.seed = derive_seed(cfg.seed, "layer_head", layer * cfg.n_heads + h);
                args.attention_dropout = cfg.attention_dropout;
                args.dropout_rng = train ? dropout_rng : nullptr;
                heads.push_back(lsh_attention(qh, vh, args, instr, &valid));
            }
        }
        Tensor<Real> attn = cfg.n_heads == 1 ? heads[0] : concat_cols(heads);
        attn = matmul(attn, params.at(base + "attn.out"));
        if (train) attn = dropout(attn, cfg.hidden_dropout, *dropout_rng, true);
        x = layer_norm(add(x, attn), params.at(base + "ln1.gamma"), params.at(base + "ln1.beta"));

        Tensor<Real> ffn = apply_linear(x, params.at(base + "ffn.w1"), params.at(base + "ffn.b1"));
        ffn = gelu(ffn);
        ffn = apply_linear(ffn, params.at(base + "ffn.w2"), params.at(base + "ffn.b2"));
        if (train) ffn = dropout(ffn, cfg.hidden_dropout, *dropout_rng, true);
        x = layer_norm(add(x, ffn), params.at(base + "ln2.gamma"), params.at(base + "ln2.beta"));
    }
    if (n != n_orig) x = slice_rows(x, 0, n_orig);
    return x;
}

}  // namespace relectra::reformer
