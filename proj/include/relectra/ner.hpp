#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "relectra/electra.hpp"
#include "relectra/errors.hpp"
#include "relectra/reformer.hpp"
#include "relectra/tokenizer.hpp"

namespace relectra::ner {

// ---------------------------------------------------------------------------
// labels and tags
// ---------------------------------------------------------------------------

enum class EntityLabel { TYPE, PLT, DEF, PROB };

inline const char* label_name(EntityLabel l) {
    switch (l) {
        case EntityLabel::TYPE: return "TYPE";
        case EntityLabel::PLT: return "PLT";
        case EntityLabel::DEF: return "DEF";
        case EntityLabel::PROB: return "PROB";
    }
    return "?";
}

inline EntityLabel label_from_name(const std::string& s) {
    if (s == "TYPE") return EntityLabel::TYPE;
    if (s == "PLT") return EntityLabel::PLT;
    if (s == "DEF") return EntityLabel::DEF;
    if (s == "PROB") return EntityLabel::PROB;
    throw DataError("ner: unknown entity label '" + s + "'");
}

// BIO tag ids over an ordered label set: 0 = O, then (B-X, I-X) per label.
struct TagSet {
    std::vector<EntityLabel> labels;

    static TagSet legal() { return {{EntityLabel::TYPE, EntityLabel::PLT, EntityLabel::DEF}}; }
    static TagSet mixed() {
        return {{EntityLabel::TYPE, EntityLabel::PLT, EntityLabel::DEF, EntityLabel::PROB}};
    }
    static TagSet named(const std::string& name) {
        if (name == "legal") return legal();
        if (name == "mixed") return mixed();
        throw ConfigError("ner: unknown label set '" + name + "' (expected legal|mixed)");
    }

    std::size_t n_tags() const { return 1 + 2 * labels.size(); }
    int o_tag() const { return 0; }
    int b_tag(EntityLabel l) const { return 1 + 2 * label_index(l); }
    int i_tag(EntityLabel l) const { return 2 + 2 * label_index(l); }
    bool is_b(int t) const { return t >= 1 && t % 2 == 1; }
    bool is_i(int t) const { return t >= 2 && t % 2 == 0; }

    EntityLabel label_of(int t) const {
        if (t < 1 || t >= static_cast<int>(n_tags())) throw IndexError("ner: tag has no label");
        return labels[static_cast<std::size_t>((t - 1) / 2)];
    }

    std::string tag_name(int t) const {
        if (t == 0) return "O";
        return std::string(is_b(t) ? "B-" : "I-") + label_name(label_of(t));
    }

    int tag_from_name(const std::string& s) const {
        if (s == "O") return 0;
        if (s.size() < 3 || (s[0] != 'B' && s[0] != 'I') || s[1] != '-') {
            throw DataError("ner: malformed tag '" + s + "'");
        }
        EntityLabel l = label_from_name(s.substr(2));
        return s[0] == 'B' ? b_tag(l) : i_tag(l);
    }

private:
    int label_index(EntityLabel l) const {
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == l) return static_cast<int>(i);
        throw IndexError(std::string("ner: label ") + label_name(l) + " not in tag set");
    }
};

struct EntitySpan {
    EntityLabel label;
    std::size_t start = 0;  // half-open token indices
    std::size_t end = 0;

    bool operator==(const EntitySpan& o) const = default;
    bool operator<(const EntitySpan& o) const {
        return std::tie(start, end, label) < std::tie(o.start, o.end, o.label);
    }
};

// ---------------------------------------------------------------------------
// BIO encode/decode
// ---------------------------------------------------------------------------

inline std::vector<int> bio_encode(std::vector<EntitySpan> spans, std::size_t length, const TagSet& tags) {
    std::sort(spans.begin(), spans.end());
    std::vector<int> out(length, tags.o_tag());
    std::size_t prev_end = 0;
    bool first = true;
    for (const auto& s : spans) {
        if (s.start >= s.end || s.end > length) {
            throw AnnotationError("bio_encode: span out of range");
        }
        if (!first && s.start < prev_end) throw AnnotationError("bio_encode: overlapping spans");
        first = false;
        prev_end = s.end;
        out[s.start] = tags.b_tag(s.label);
        for (std::size_t i = s.start + 1; i < s.end; ++i) out[i] = tags.i_tag(s.label);
    }
    return out;
}

// Tolerant decoding: an I-X with no open X span is repaired to B-X and
// counted in *warnings.
inline std::vector<EntitySpan> bio_decode(const std::vector<int>& tags, const TagSet& ts,
                                          std::size_t* warnings = nullptr) {
    std::vector<EntitySpan> spans;
    std::optional<EntityLabel> open;
    std::size_t open_start = 0;
    auto close = [&](std::size_t end) {
        if (open) spans.push_back({*open, open_start, end});
        open.reset();
    };
    for (std::size_t i = 0; i < tags.size(); ++i) {
        int t = tags[i];
        if (t == ts.o_tag()) {
            close(i);
        } else if (ts.is_b(t)) {
            close(i);
            open = ts.label_of(t);
            open_start = i;
        } else {
            EntityLabel l = ts.label_of(t);
            if (!open || *open != l) {
                if (warnings) ++*warnings;
                close(i);
                open = l;
                open_start = i;
            }
        }
    }
    close(tags.size());
    return spans;
}

// ---------------------------------------------------------------------------
// word-level examples and file I/O (conll-style)
// ---------------------------------------------------------------------------

struct WordExample {
    std::vector<std::string> words;
    std::vector<int> tags;  // word-level BIO tag ids
    std::string source_id;
};

inline std::vector<WordExample> read_ner_file(const std::string& path, const TagSet& ts) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("ner: cannot open '" + path + "'");
    std::vector<WordExample> out;
    WordExample cur;
    std::size_t line_no = 0, example_no = 0;
    std::string line;
    auto flush = [&]() {
        if (cur.words.empty()) return;
        // I-X may only follow B-X or I-X.
        int prev = ts.o_tag();
        for (int t : cur.tags) {
            if (ts.is_i(t)) {
                bool ok = (ts.is_b(prev) || ts.is_i(prev)) && ts.label_of(prev) == ts.label_of(t);
                if (!ok) {
                    throw DataError("ner: '" + path + "' example " + std::to_string(example_no) +
                                    " violates the BIO tag grammar");
                }
            }
            prev = t;
        }
        cur.source_id = "ex" + std::to_string(example_no++);
        out.push_back(std::move(cur));
        cur = WordExample{};
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            flush();
            continue;
        }
        auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw DataError("ner: '" + path + "' line " + std::to_string(line_no) +
                            ": expected token<TAB>tag");
        }
        cur.words.push_back(line.substr(0, tab));
        cur.tags.push_back(ts.tag_from_name(line.substr(tab + 1)));
    }
    flush();
    return out;
}

inline void write_ner_file(const std::string& path, const std::vector<WordExample>& examples,
                           const TagSet& ts) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("ner: cannot open '" + path + "' for writing");
    for (std::size_t e = 0; e < examples.size(); ++e) {
        if (e) out << "\n";
        const auto& ex = examples[e];
        for (std::size_t i = 0; i < ex.words.size(); ++i) {
            out << ex.words[i] << "\t" << ts.tag_name(ex.tags[i]) << "\n";
        }
    }
}

// ---------------------------------------------------------------------------
// word lists and auto-annotation
// ---------------------------------------------------------------------------

struct WordList {
    std::string case_type;
    std::vector<std::string> phrases;
};

// File format: "#TYPE <name>" section headers, one phrase per line. A phrase
// must not appear in two case types' lists.
inline std::vector<WordList> parse_wordlists(const std::string& content) {
    std::vector<WordList> lists;
    std::istringstream in(content);
    std::string line;
    std::map<std::string, std::string> owner;  // phrase -> case type
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        while (!line.empty() && tok::is_space(line.back())) line.pop_back();
        if (line.empty()) continue;
        if (line.rfind("#TYPE", 0) == 0) {
            std::string name = line.substr(5);
            while (!name.empty() && tok::is_space(name.front())) name.erase(name.begin());
            if (name.empty()) throw DataError("wordlists: #TYPE section missing a name");
            lists.push_back({name, {}});
            continue;
        }
        if (lists.empty()) throw DataError("wordlists: phrase before first #TYPE section");
        std::string phrase = tok::ascii_lower(line);
        auto [it, inserted] = owner.emplace(phrase, lists.back().case_type);
        if (!inserted && it->second != lists.back().case_type) {
            throw AnnotationError("wordlists: phrase '" + phrase + "' appears in both '" + it->second +
                                  "' and '" + lists.back().case_type + "'");
        }
        lists.back().phrases.push_back(phrase);
    }
    return lists;
}

inline std::vector<WordList> load_wordlists(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("wordlists: cannot open '" + path + "'");
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_wordlists(content);
}

struct HeaderParties {
    std::vector<std::string> plaintiffs;
    std::vector<std::string> defendants;
};

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

namespace detail {

// Leading/trailing punctuation is ignored when matching annotation phrases
// against text words.
inline std::string match_norm(const std::string& w) {
    std::string s = tok::ascii_lower(w);
    std::size_t b = 0, e = s.size();
    auto is_alnum = [](unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; };
    while (b < e && !is_alnum(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && !is_alnum(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

struct Candidate {
    EntityLabel label;
    std::size_t start, end;
    int priority;  // PLT 0, DEF 1, TYPE 2
};

}  // namespace detail

// Exact case-insensitive matches of header party names produce PLT/DEF
// spans; word-list phrases match with at most max_edit character edits per
// word and produce TYPE spans. Overlaps resolve longest-match-first, then
// leftmost. Spans are word indices over whitespace tokenization.
inline std::vector<EntitySpan> auto_annotate(const std::vector<std::string>& words,
                                             const HeaderParties& parties,
                                             const std::vector<WordList>& wordlists,
                                             std::size_t max_edit = 1) {
    std::vector<std::string> norm(words.size());
    for (std::size_t i = 0; i < words.size(); ++i) norm[i] = detail::match_norm(words[i]);

    std::vector<detail::Candidate> cands;
    auto add_party = [&](const std::string& name, EntityLabel label, int priority) {
        auto parts = tok::split_words(name);
        if (parts.empty()) return;
        std::vector<std::string> target;
        for (auto& p : parts) target.push_back(detail::match_norm(p.word));
        for (std::size_t s = 0; s + target.size() <= words.size(); ++s) {
            bool ok = true;
            for (std::size_t k = 0; k < target.size() && ok; ++k) ok = norm[s + k] == target[k];
            if (ok) cands.push_back({label, s, s + target.size(), priority});
        }
    };
    for (const auto& p : parties.plaintiffs) add_party(p, EntityLabel::PLT, 0);
    for (const auto& d : parties.defendants) add_party(d, EntityLabel::DEF, 1);

    for (const auto& wl : wordlists) {
        for (const auto& phrase : wl.phrases) {
            auto parts = tok::split_words(phrase);
            if (parts.empty()) continue;
            std::vector<std::string> target;
            for (auto& p : parts) target.push_back(detail::match_norm(p.word));
            for (std::size_t s = 0; s + target.size() <= words.size(); ++s) {
                bool ok = true;
                for (std::size_t k = 0; k < target.size() && ok; ++k) {
                    ok = edit_distance(norm[s + k], target[k]) <= max_edit && !norm[s + k].empty();
                }
                if (ok) cands.push_back({EntityLabel::TYPE, s, s + target.size(), 2});
            }
        }
    }

    std::sort(cands.begin(), cands.end(), [](const detail::Candidate& a, const detail::Candidate& b) {
        std::size_t la = a.end - a.start, lb = b.end - b.start;
        if (la != lb) return la > lb;
        if (a.start != b.start) return a.start < b.start;
        return a.priority < b.priority;
    });
    std::vector<EntitySpan> accepted;
    for (const auto& c : cands) {
        bool overlap = false;
        for (const auto& a : accepted) {
            if (c.start < a.end && a.start < c.end) {
                overlap = true;
                break;
            }
        }
        if (!overlap) accepted.push_back({c.label, c.start, c.end});
    }
    std::sort(accepted.begin(), accepted.end());
    return accepted;
}

inline std::vector<EntitySpan> auto_annotate(const std::string& text, const HeaderParties& parties,
                                             const std::vector<WordList>& wordlists, std::size_t max_edit = 1) {
    std::vector<std::string> words;
    for (auto& ws : tok::split_words(text)) words.push_back(ws.word);
    return auto_annotate(words, parties, wordlists, max_edit);
}

// ---------------------------------------------------------------------------
// stride-and-chunk windows
// ---------------------------------------------------------------------------

struct Window {
    std::size_t begin = 0;
    std::size_t end = 0;  // half-open
};

// Windows start at 0, stride, 2*stride, ... until one covers the last token.
inline std::vector<Window> chunk_with_stride(std::size_t length, std::size_t max_len, std::size_t stride) {
    if (stride == 0 || stride >= max_len) {
        throw ConfigError("chunk_with_stride: need 0 < stride (" + std::to_string(stride) + ") < max_len (" +
                          std::to_string(max_len) + ")");
    }
    if (length == 0) return {};
    std::vector<Window> out;
    for (std::size_t start = 0;; start += stride) {
        std::size_t end = std::min(start + max_len, length);
        out.push_back({start, end});
        if (end == length) break;
    }
    return out;
}

// Per-window tag scores, row-major [end-begin, n_tags].
template <typename Real>
struct WindowScores {
    Window window;
    std::vector<Real> scores;
};

// Each token takes its prediction from the window where it sits farthest
// from the nearer window edge; ties go to the earlier window.
template <typename Real>
std::vector<int> merge_window_predictions(std::size_t length, const std::vector<WindowScores<Real>>& windows,
                                          std::size_t n_tags) {
    std::vector<std::ptrdiff_t> best_depth(length, -1);
    std::vector<std::size_t> best_window(length, 0);
    for (std::size_t w = 0; w < windows.size(); ++w) {
        const auto& win = windows[w].window;
        if (windows[w].scores.size() != (win.end - win.begin) * n_tags) {
            throw ShapeError("merge_window_predictions: score matrix does not match window size");
        }
        for (std::size_t pos = win.begin; pos < win.end; ++pos) {
            std::ptrdiff_t depth = static_cast<std::ptrdiff_t>(
                std::min(pos - win.begin, win.end - 1 - pos));
            if (depth > best_depth[pos]) {
                best_depth[pos] = depth;
                best_window[pos] = w;
            }
        }
    }
    std::vector<int> tags(length, 0);
    for (std::size_t pos = 0; pos < length; ++pos) {
        if (best_depth[pos] < 0) {
            throw CoverageError("merge_window_predictions: position " + std::to_string(pos) +
                                " not covered by any window");
        }
        const auto& ws = windows[best_window[pos]];
        const Real* row = ws.scores.data() + (pos - ws.window.begin) * n_tags;
        std::size_t best = 0;
        for (std::size_t t = 1; t < n_tags; ++t)
            if (row[t] > row[best]) best = t;
        tags[pos] = static_cast<int>(best);
    }
    return tags;
}

// ---------------------------------------------------------------------------
// entity-level scoring
// ---------------------------------------------------------------------------

struct PRF {
    double precision = 0, recall = 0, f1 = 0;
    std::size_t correct = 0, predicted = 0, gold = 0;

    void finalize() {
        precision = predicted ? static_cast<double>(correct) / static_cast<double>(predicted) : 0.0;
        recall = gold ? static_cast<double>(correct) / static_cast<double>(gold) : 0.0;
        f1 = (precision + recall) > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    }
};

struct MetricsReport {
    std::map<std::string, PRF> per_label;
    PRF overall;  // micro-averaged
};

// Exact-match entity scoring: a predicted span is correct iff label, start
// and end all equal a gold span of the same example.
inline MetricsReport evaluate_ner(const std::vector<std::vector<EntitySpan>>& predictions,
                                  const std::vector<std::vector<EntitySpan>>& gold) {
    if (predictions.size() != gold.size()) {
        throw ShapeError("evaluate_ner: " + std::to_string(predictions.size()) + " predictions vs " +
                         std::to_string(gold.size()) + " gold examples");
    }
    MetricsReport rep;
    for (std::size_t e = 0; e < predictions.size(); ++e) {
        std::set<std::tuple<int, std::size_t, std::size_t>> gold_set;
        for (const auto& g : gold[e]) {
            gold_set.emplace(static_cast<int>(g.label), g.start, g.end);
            auto& pl = rep.per_label[label_name(g.label)];
            ++pl.gold;
            ++rep.overall.gold;
        }
        for (const auto& p : predictions[e]) {
            auto& pl = rep.per_label[label_name(p.label)];
            ++pl.predicted;
            ++rep.overall.predicted;
            if (gold_set.count({static_cast<int>(p.label), p.start, p.end})) {
                ++pl.correct;
                ++rep.overall.correct;
            }
        }
    }
    for (auto& [name, prf] : rep.per_label) prf.finalize();
    rep.overall.finalize();
    return rep;
}

// ---------------------------------------------------------------------------
// subtoken expansion and the tagging model
// ---------------------------------------------------------------------------

struct TokenizedExample {
    std::vector<int> ids;
    std::vector<int> tags;
    std::vector<std::size_t> word_index;  // subtoken -> source word
    std::size_t n_words = 0;
};

// Words expand to their BPE pieces; the word's tag goes to the first piece
// and B-X continues as I-X on the rest.
inline TokenizedExample expand_example(const WordExample& ex, const tok::Encoder& enc, const TagSet& ts) {
    TokenizedExample out;
    out.n_words = ex.words.size();
    for (std::size_t w = 0; w < ex.words.size(); ++w) {
        auto ids = enc.encode_word_ids(ex.words[w]);
        int tag = ex.tags[w];
        int cont = ts.is_b(tag) ? ts.i_tag(ts.label_of(tag)) : tag;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            out.ids.push_back(ids[k]);
            out.tags.push_back(k == 0 ? tag : cont);
            out.word_index.push_back(w);
        }
    }
    return out;
}

// First-subtoken rule maps subtoken predictions back to word tags.
inline std::vector<int> word_tags_from_subtokens(const TokenizedExample& ex, const std::vector<int>& sub_tags) {
    if (sub_tags.size() != ex.ids.size()) throw ShapeError("word_tags_from_subtokens: length mismatch");
    std::vector<int> out(ex.n_words, 0);
    std::vector<bool> seen(ex.n_words, false);
    for (std::size_t i = 0; i < sub_tags.size(); ++i) {
        std::size_t w = ex.word_index[i];
        if (!seen[w]) {
            seen[w] = true;
            out[w] = sub_tags[i];
        }
    }
    return out;
}

template <typename Real>
struct NerModel {
    reformer::ReformerConfig cfg;
    TagSet tags;
    reformer::ParamList<Real> params;  // body + head.ner.w|b

    static NerModel init(const reformer::ReformerConfig& cfg, const TagSet& ts, Rng& rng,
                         Real init_std = Real(0.02)) {
        NerModel m;
        m.cfg = cfg;
        m.tags = ts;
        m.params = reformer::init_reformer_params<Real>(cfg, rng, init_std);
        m.params.add("head.ner.w", Tensor<Real>::randn({cfg.d_model, ts.n_tags()}, rng, init_std));
        m.params.add("head.ner.b", Tensor<Real>::zeros({ts.n_tags()}));
        return m;
    }

    // Copies the discriminator body out of a pretraining checkpoint; the
    // classification head stays freshly initialized.
    void load_pretrained_body(const std::vector<TensorRecord>& records) {
        std::map<std::string, const TensorRecord*> by_name;
        for (const auto& r : records) by_name[r.name] = &r;
        for (auto& [name, t] : params.items) {
            if (name.rfind("head.ner.", 0) == 0) continue;
            auto it = by_name.find("disc." + name);
            if (it == by_name.end()) throw DataError("ner: checkpoint missing record 'disc." + name + "'");
            load_into(*it->second, t);
        }
    }

    Tensor<Real> logits(const std::vector<int>& ids, reformer::Mode mode, Rng* dropout_rng = nullptr) const {
        Tensor<Real> h = reformer::reformer_forward(ids, params, cfg, mode, dropout_rng);
        return apply_linear(h, params.at("head.ner.w"), params.at("head.ner.b"));
    }

    std::vector<std::pair<std::string, Tensor<Real>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<Real>>> out;
        for (const auto& [k, t] : params.items) out.emplace_back(k, t);
        return out;
    }
};

template <typename Real>
std::vector<TensorRecord> ner_to_records(const NerModel<Real>& model) {
    std::vector<TensorRecord> records;
    for (const auto& [name, t] : model.params.items) records.push_back(to_record(name, t));
    records.push_back(TensorRecord{
        "meta.labelset", {1}, {model.tags.labels.size() == 4 ? 1.0f : 0.0f}});
    return records;
}

template <typename Real>
void ner_from_records(const std::vector<TensorRecord>& records, NerModel<Real>& model) {
    std::map<std::string, const TensorRecord*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;
    for (auto& [name, t] : model.params.items) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("ner: checkpoint missing record '" + name + "'");
        load_into(*it->second, t);
    }
}

// ---------------------------------------------------------------------------
// inference over long documents
// ---------------------------------------------------------------------------

template <typename Real>
std::vector<int> predict_subtoken_tags(const NerModel<Real>& model, const TokenizedExample& ex,
                                       std::size_t max_len, std::size_t stride) {
    if (ex.ids.empty()) return {};
    std::vector<WindowScores<Real>> scored;
    if (ex.ids.size() <= max_len) {
        Tensor<Real> lg = model.logits(ex.ids, reformer::Mode::eval);
        scored.push_back({Window{0, ex.ids.size()}, lg.data()});
    } else {
        for (const auto& win : chunk_with_stride(ex.ids.size(), max_len, stride)) {
            std::vector<int> ids(ex.ids.begin() + static_cast<std::ptrdiff_t>(win.begin),
                                 ex.ids.begin() + static_cast<std::ptrdiff_t>(win.end));
            Tensor<Real> lg = model.logits(ids, reformer::Mode::eval);
            scored.push_back({win, lg.data()});
        }
    }
    return merge_window_predictions(ex.ids.size(), scored, model.tags.n_tags());
}

template <typename Real>
std::vector<EntitySpan> predict_word_spans(const NerModel<Real>& model, const TokenizedExample& ex,
                                           std::size_t max_len, std::size_t stride,
                                           std::size_t* warnings = nullptr) {
    std::vector<int> sub = predict_subtoken_tags(model, ex, max_len, stride);
    return bio_decode(word_tags_from_subtokens(ex, sub), model.tags, warnings);
}

// ---------------------------------------------------------------------------
// fine-tuning
// ---------------------------------------------------------------------------

struct FinetuneOptions {
    std::size_t epochs = 10;
    std::size_t batch_size = 1;
    double lr = 3e-5;
    std::size_t max_len = 1536;
    std::size_t stride = 0;  // 0 -> max_len / 2
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;

    std::size_t effective_stride() const { return stride ? stride : max_len / 2; }
};

struct EpochStats {
    std::size_t epoch = 0;
    double train_loss = 0;
    double dev_f1 = 0;
};

template <typename Real>
struct FinetuneResult {
    std::vector<EpochStats> history;
    double best_dev_f1 = 0;
    std::size_t best_epoch = 0;
};

template <typename Real>
MetricsReport evaluate_model(const NerModel<Real>& model, const std::vector<TokenizedExample>& examples,
                             const std::vector<std::vector<EntitySpan>>& gold_word_spans, std::size_t max_len,
                             std::size_t stride) {
    std::vector<std::vector<EntitySpan>> preds;
    preds.reserve(examples.size());
    for (const auto& ex : examples) preds.push_back(predict_word_spans(model, ex, max_len, stride));
    return evaluate_ner(preds, gold_word_spans);
}

// Per-token cross-entropy over BIO tags, batch size 1 (one optimizer step
// per training window). The checkpoint with the best dev overall-f1 wins.
template <typename Real>
FinetuneResult<Real> finetune(NerModel<Real>& model, const std::vector<WordExample>& train,
                              const std::vector<WordExample>& dev, const tok::Encoder& enc,
                              const FinetuneOptions& opts, Rng& rng) {
    for (const auto& ex : train) {
        for (int t : ex.tags) {
            if (t < 0 || t >= static_cast<int>(model.tags.n_tags())) {
                throw ConfigError("finetune: example tag outside the model's label set");
            }
        }
    }
    std::vector<TokenizedExample> train_tok, dev_tok;
    train_tok.reserve(train.size());
    for (const auto& ex : train) train_tok.push_back(expand_example(ex, enc, model.tags));
    dev_tok.reserve(dev.size());
    std::vector<std::vector<EntitySpan>> dev_gold;
    for (const auto& ex : dev) {
        dev_tok.push_back(expand_example(ex, enc, model.tags));
        dev_gold.push_back(bio_decode(ex.tags, model.tags));
    }

    electra::AdamW<Real> opt;
    opt.beta1_ = opts.beta1;
    opt.beta2_ = opts.beta2;
    opt.eps_ = opts.eps;
    opt.weight_decay_ = opts.weight_decay;

    const std::size_t stride = opts.effective_stride();
    auto params = model.named_params();

    FinetuneResult<Real> result;
    // Snapshot of the initialized model so epochs == 0 returns it unchanged.
    std::vector<std::vector<Real>> best_data;
    auto snapshot = [&]() {
        best_data.clear();
        for (auto& [name, t] : params) best_data.push_back(t.data());
    };
    snapshot();

    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        std::vector<std::size_t> order(train_tok.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order.begin(), order.end());

        double loss_sum = 0;
        std::size_t loss_count = 0;
        for (std::size_t oi : order) {
            const auto& ex = train_tok[oi];
            if (ex.ids.empty()) continue;
            std::vector<Window> wins = ex.ids.size() <= opts.max_len
                                           ? std::vector<Window>{{0, ex.ids.size()}}
                                           : chunk_with_stride(ex.ids.size(), opts.max_len, stride);
            for (const auto& win : wins) {
                std::vector<int> ids(ex.ids.begin() + static_cast<std::ptrdiff_t>(win.begin),
                                     ex.ids.begin() + static_cast<std::ptrdiff_t>(win.end));
                std::vector<std::size_t> targets(ex.tags.begin() + static_cast<std::ptrdiff_t>(win.begin),
                                                 ex.tags.begin() + static_cast<std::ptrdiff_t>(win.end));
                Tensor<Real> lg = model.logits(ids, reformer::Mode::train, &rng);
                Tensor<Real> loss = cross_entropy_loss(lg, targets);
                if (!std::isfinite(static_cast<double>(loss.value()))) {
                    throw NumericError("finetune: non-finite loss");
                }
                loss_sum += static_cast<double>(loss.value());
                ++loss_count;
                backward(loss);
                opt.step(params, opts.lr);
                electra::zero_grads(params);
            }
        }

        MetricsReport dev_rep = evaluate_model(model, dev_tok, dev_gold, opts.max_len, stride);
        EpochStats stats;
        stats.epoch = epoch + 1;
        stats.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
        stats.dev_f1 = dev_rep.overall.f1;
        result.history.push_back(stats);
        if (dev_rep.overall.f1 > result.best_dev_f1 || result.history.size() == 1) {
            result.best_dev_f1 = dev_rep.overall.f1;
            result.best_epoch = epoch + 1;
            snapshot();
        }
    }

    // Restore the best checkpoint into the model.
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i].second.mutable_data() = best_data[i];
        params[i].second.zero_grad();
    }
    return result;
}

}  // namespace relectra::ner
