#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "relectra/errors.hpp"

namespace relectra::tok {

inline constexpr const char* kWordEnd = "</w>";

inline const std::vector<std::string>& default_specials() {
    static const std::vector<std::string> s{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
    return s;
}

// ---------------------------------------------------------------------------
// text utilities
// ---------------------------------------------------------------------------

inline bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline std::string ascii_lower(std::string s) {
    for (auto& c : s)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return s;
}

// Splits a UTF-8 string into codepoint substrings. Invalid bytes become
// single-byte symbols rather than failing.
inline std::vector<std::string> utf8_chars(const std::string& s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        unsigned char c = static_cast<unsigned char>(s[i]);
        std::size_t len = 1;
        if ((c & 0x80u) == 0)
            len = 1;
        else if ((c & 0xe0u) == 0xc0u)
            len = 2;
        else if ((c & 0xf0u) == 0xe0u)
            len = 3;
        else if ((c & 0xf8u) == 0xf0u)
            len = 4;
        if (i + len > s.size()) len = 1;
        for (std::size_t k = 1; k < len; ++k) {
            if ((static_cast<unsigned char>(s[i + k]) & 0xc0u) != 0x80u) {
                len = 1;
                break;
            }
        }
        out.push_back(s.substr(i, len));
        i += len;
    }
    return out;
}

struct WordSpan {
    std::string word;
    std::size_t begin = 0;  // byte offsets into the source text
    std::size_t end = 0;
};

inline std::vector<WordSpan> split_words(const std::string& text) {
    std::vector<WordSpan> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && is_space(text[i])) ++i;
        if (i >= text.size()) break;
        std::size_t j = i;
        while (j < text.size() && !is_space(text[j])) ++j;
        out.push_back({text.substr(i, j - i), i, j});
        i = j;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

struct Vocab {
    std::vector<std::pair<std::string, std::string>> merges;  // applied in order
    std::unordered_map<std::string, int> token_to_id;
    std::vector<std::string> id_to_token;
    std::vector<std::string> specials;  // [PAD] [UNK] [CLS] [SEP] [MASK]
    std::vector<std::string> alphabet;  // sorted single symbols incl. </w>
    std::size_t vocab_size = 0;         // configured budget
    bool lowercase = true;

    int pad_id() const { return special_id("[PAD]"); }
    int unk_id() const { return special_id("[UNK]"); }
    int cls_id() const { return special_id("[CLS]"); }
    int sep_id() const { return special_id("[SEP]"); }
    int mask_id() const { return special_id("[MASK]"); }

    int special_id(const std::string& name) const {
        auto it = token_to_id.find(name);
        if (it == token_to_id.end()) throw StateError("vocab: missing special token " + name);
        return it->second;
    }

    bool is_special(int id) const {
        return id >= 0 && id < static_cast<int>(specials.size());
    }

    std::size_t size() const { return id_to_token.size(); }

    const std::string& token(int id) const {
        if (id < 0 || id >= static_cast<int>(id_to_token.size())) {
            throw IndexError("vocab: unknown token id " + std::to_string(id));
        }
        return id_to_token[static_cast<std::size_t>(id)];
    }
};

namespace detail {

inline void add_token(Vocab& v, const std::string& tok) {
    if (v.token_to_id.count(tok)) return;
    v.token_to_id.emplace(tok, static_cast<int>(v.id_to_token.size()));
    v.id_to_token.push_back(tok);
}

inline std::uint64_t pair_key(std::uint32_t l, std::uint32_t r) {
    return (static_cast<std::uint64_t>(l) << 32) | r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

// Greedy BPE trainer. Pre-tokenizes on whitespace, appends the word-end
// marker as a standalone symbol, then repeatedly merges the most frequent
// adjacent symbol pair (ties: lexicographically smallest pair) until the
// vocabulary budget is exhausted or no pair occurs at least twice.
//
// Pair counting includes overlapping occurrences; a merge is applied
// greedily left to right. The test-side oracle recounts from scratch each
// iteration under the same conventions.
inline Vocab train_bpe(std::istream& corpus, std::size_t vocab_size,
                       const std::vector<std::string>& specials = default_specials(),
                       bool lowercase = true) {
    // Unique words with frequencies, first-seen order.
    std::vector<std::string> words;
    std::vector<long long> freq;
    std::unordered_map<std::string, std::size_t> word_index;
    std::string w;
    while (corpus >> w) {
        if (lowercase) w = ascii_lower(w);
        auto [it, inserted] = word_index.emplace(w, words.size());
        if (inserted) {
            words.push_back(w);
            freq.push_back(1);
        } else {
            ++freq[it->second];
        }
    }
    if (words.empty()) throw DataError("train_bpe: empty corpus");

    // Symbol interning.
    std::vector<std::string> sym_str;
    std::unordered_map<std::string, std::uint32_t> sym_id;
    auto intern = [&](const std::string& s) {
        auto it = sym_id.find(s);
        if (it != sym_id.end()) return it->second;
        std::uint32_t id = static_cast<std::uint32_t>(sym_str.size());
        sym_id.emplace(s, id);
        sym_str.push_back(s);
        return id;
    };

    std::vector<std::vector<std::uint32_t>> seqs(words.size());
    std::set<std::string> alphabet_set;
    for (std::size_t i = 0; i < words.size(); ++i) {
        for (auto& ch : utf8_chars(words[i])) {
            seqs[i].push_back(intern(ch));
            alphabet_set.insert(ch);
        }
        seqs[i].push_back(intern(kWordEnd));
    }
    alphabet_set.insert(kWordEnd);

    Vocab v;
    v.vocab_size = vocab_size;
    v.lowercase = lowercase;
    v.specials = specials;
    v.alphabet.assign(alphabet_set.begin(), alphabet_set.end());
    for (const auto& s : specials) detail::add_token(v, s);
    for (const auto& a : v.alphabet) detail::add_token(v, a);
    if (v.size() > vocab_size) {
        throw ConfigError("train_bpe: vocab_size " + std::to_string(vocab_size) + " smaller than " +
                          std::to_string(v.size()) + " base symbols (alphabet + specials)");
    }

    std::unordered_map<std::uint64_t, long long> counts;
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> occurs;
    auto adjust_word = [&](std::size_t wi, long long sign) {
        const auto& s = seqs[wi];
        for (std::size_t k = 0; k + 1 < s.size(); ++k) {
            std::uint64_t key = detail::pair_key(s[k], s[k + 1]);
            counts[key] += sign * freq[wi];
            if (sign > 0) {
                auto& lst = occurs[key];
                if (lst.empty() || lst.back() != wi) lst.push_back(wi);
            }
        }
    };
    for (std::size_t i = 0; i < seqs.size(); ++i) adjust_word(i, +1);

    while (v.size() < vocab_size) {
        // Best pair: max count (>= 2), ties by lexicographically smallest
        // (left, right) symbol strings. Comparison is total, so the scan
        // order over the hash map does not matter.
        bool found = false;
        std::uint64_t best_key = 0;
        long long best_count = 0;
        const std::string* best_l = nullptr;
        const std::string* best_r = nullptr;
        for (const auto& [key, cnt] : counts) {
            if (cnt < 2) continue;
            const std::string& l = sym_str[key >> 32];
            const std::string& r = sym_str[key & 0xffffffffu];
            if (!found || cnt > best_count ||
                (cnt == best_count && (l < *best_l || (l == *best_l && r < *best_r)))) {
                found = true;
                best_key = key;
                best_count = cnt;
                best_l = &l;
                best_r = &r;
            }
        }
        if (!found) break;

        std::uint32_t l_id = static_cast<std::uint32_t>(best_key >> 32);
        std::uint32_t r_id = static_cast<std::uint32_t>(best_key & 0xffffffffu);
        std::string merged = *best_l + *best_r;
        v.merges.emplace_back(*best_l, *best_r);
        std::uint32_t m_id = intern(merged);

        std::vector<std::size_t> affected = occurs[best_key];
        std::sort(affected.begin(), affected.end());
        affected.erase(std::unique(affected.begin(), affected.end()), affected.end());
        for (std::size_t wi : affected) {
            auto& s = seqs[wi];
            bool contains = false;
            for (std::size_t k = 0; k + 1 < s.size(); ++k) {
                if (s[k] == l_id && s[k + 1] == r_id) {
                    contains = true;
                    break;
                }
            }
            if (!contains) continue;  // stale index entry
            adjust_word(wi, -1);
            std::vector<std::uint32_t> ns;
            ns.reserve(s.size());
            std::size_t k = 0;
            while (k < s.size()) {
                if (k + 1 < s.size() && s[k] == l_id && s[k + 1] == r_id) {
                    ns.push_back(m_id);
                    k += 2;
                } else {
                    ns.push_back(s[k]);
                    ++k;
                }
            }
            s = std::move(ns);
            adjust_word(wi, +1);
        }
        occurs.erase(best_key);
        detail::add_token(v, merged);
    }
    return v;
}

inline Vocab train_bpe(const std::string& corpus, std::size_t vocab_size,
                       const std::vector<std::string>& specials = default_specials(),
                       bool lowercase = true) {
    std::istringstream in(corpus);
    return train_bpe(in, vocab_size, specials, lowercase);
}

// ---------------------------------------------------------------------------
// encode / decode
// ---------------------------------------------------------------------------

struct TokenSequence {
    std::vector<int> ids;
    // (start, end) byte offsets into the source text; (-1, -1) for specials.
    std::vector<std::pair<std::ptrdiff_t, std::ptrdiff_t>> offsets;

    std::size_t size() const { return ids.size(); }
};

namespace detail {

struct EncodedWord {
    std::vector<int> ids;
    std::vector<std::pair<std::size_t, std::size_t>> spans;  // byte spans within the word
};

// Merge-rank table for fast encoding: pair of symbol strings -> merge index.
struct MergeRanks {
    std::map<std::pair<std::string, std::string>, std::size_t> rank;

    explicit MergeRanks(const Vocab& v) {
        for (std::size_t i = 0; i < v.merges.size(); ++i) rank.emplace(v.merges[i], i);
    }
};

// Applies the merge list to one word. Repeatedly merging the lowest-ranked
// adjacent pair (all its occurrences, left to right) is equivalent to
// applying the merge list in order, because a merge rule's operands always
// predate the rule.
inline EncodedWord encode_word(const std::string& word, const Vocab& v, const MergeRanks& ranks) {
    struct Sym {
        std::string s;
        std::size_t b, e;  // byte span within the word
    };
    std::vector<Sym> syms;
    {
        std::size_t off = 0;
        for (auto& ch : utf8_chars(word)) {
            std::size_t len = ch.size();
            syms.push_back({std::move(ch), off, off + len});
            off += len;
        }
        syms.push_back({kWordEnd, word.size(), word.size()});
    }
    for (;;) {
        std::size_t best_rank = static_cast<std::size_t>(-1);
        for (std::size_t k = 0; k + 1 < syms.size(); ++k) {
            auto it = ranks.rank.find({syms[k].s, syms[k + 1].s});
            if (it != ranks.rank.end() && it->second < best_rank) best_rank = it->second;
        }
        if (best_rank == static_cast<std::size_t>(-1)) break;
        const auto& [ml, mr] = v.merges[best_rank];
        std::vector<Sym> ns;
        ns.reserve(syms.size());
        std::size_t k = 0;
        while (k < syms.size()) {
            if (k + 1 < syms.size() && syms[k].s == ml && syms[k + 1].s == mr) {
                ns.push_back({ml + mr, syms[k].b, syms[k + 1].e});
                k += 2;
            } else {
                ns.push_back(std::move(syms[k]));
                ++k;
            }
        }
        syms = std::move(ns);
    }
    EncodedWord out;
    out.ids.reserve(syms.size());
    out.spans.reserve(syms.size());
    for (auto& sym : syms) {
        auto it = v.token_to_id.find(sym.s);
        out.ids.push_back(it != v.token_to_id.end() ? it->second : v.unk_id());
        out.spans.emplace_back(sym.b, sym.e);
    }
    return out;
}

}  // namespace detail

// Stateful encoder wrapper with a per-word cache; use this for corpora.
class Encoder {
public:
    explicit Encoder(const Vocab& v) : vocab_(v), ranks_(v) {}

    TokenSequence encode(const std::string& text, bool add_specials) const {
        TokenSequence out;
        if (add_specials) {
            out.ids.push_back(vocab_.cls_id());
            out.offsets.emplace_back(-1, -1);
        }
        for (const auto& ws : split_words(text)) {
            const detail::EncodedWord& ew = encode_cached(vocab_.lowercase ? ascii_lower(ws.word) : ws.word);
            for (std::size_t k = 0; k < ew.ids.size(); ++k) {
                out.ids.push_back(ew.ids[k]);
                out.offsets.emplace_back(static_cast<std::ptrdiff_t>(ws.begin + ew.spans[k].first),
                                         static_cast<std::ptrdiff_t>(ws.begin + ew.spans[k].second));
            }
        }
        if (add_specials) {
            out.ids.push_back(vocab_.sep_id());
            out.offsets.emplace_back(-1, -1);
        }
        return out;
    }

    std::vector<int> encode_word_ids(const std::string& word) const {
        return encode_cached(vocab_.lowercase ? ascii_lower(word) : word).ids;
    }

    const Vocab& vocab() const { return vocab_; }

private:
    const detail::EncodedWord& encode_cached(const std::string& norm_word) const {
        auto it = cache_.find(norm_word);
        if (it != cache_.end()) return it->second;
        auto [ins, ok] = cache_.emplace(norm_word, detail::encode_word(norm_word, vocab_, ranks_));
        (void)ok;
        return ins->second;
    }

    const Vocab& vocab_;
    detail::MergeRanks ranks_;
    mutable std::unordered_map<std::string, detail::EncodedWord> cache_;
};

inline TokenSequence encode(const std::string& text, const Vocab& v, bool add_specials) {
    return Encoder(v).encode(text, add_specials);
}

inline std::string decode(const std::vector<int>& ids, const Vocab& v) {
    std::string joined;
    for (int id : ids) {
        const std::string& t = v.token(id);  // throws IndexError on unknown id
        if (v.is_special(id)) continue;
        joined += t;
    }
    // Word-end markers become spaces.
    std::string out;
    std::size_t i = 0;
    const std::string marker = kWordEnd;
    while (i < joined.size()) {
        if (joined.compare(i, marker.size(), marker) == 0) {
            out += ' ';
            i += marker.size();
        } else {
            out += joined[i++];
        }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct TokenizerReport {
    std::size_t word_count = 0;
    std::size_t total_errors = 0;
    std::size_t legal_errors = 0;
    std::size_t medical_errors = 0;
    std::vector<std::string> error_words;
};

// A word counts as an error when it splits into more than one non-special
// token and is not an allowlisted abbreviation. Unique word forms are
// counted once. Error words found in the legal/medical lexicon are tallied
// separately (a word in both counts as legal).
inline TokenizerReport evaluate_tokenization(const std::string& text, const Vocab& v,
                                             const std::set<std::string>& abbreviation_allowlist = {},
                                             const std::set<std::string>& legal_lexicon = {},
                                             const std::set<std::string>& medical_lexicon = {}) {
    Encoder enc(v);
    TokenizerReport rep;
    std::unordered_set<std::string> seen;
    for (const auto& ws : split_words(text)) {
        ++rep.word_count;
        std::string norm = v.lowercase ? ascii_lower(ws.word) : ws.word;
        if (!seen.insert(norm).second) continue;
        auto ids = enc.encode_word_ids(norm);
        std::size_t n_tokens = 0;
        for (int id : ids)
            if (!v.is_special(id) || id == v.unk_id()) ++n_tokens;
        bool split = n_tokens > 1;
        if (!split) continue;
        if (abbreviation_allowlist.count(norm)) continue;
        ++rep.total_errors;
        rep.error_words.push_back(norm);
        if (legal_lexicon.count(norm)) {
            ++rep.legal_errors;
        } else if (medical_lexicon.count(norm)) {
            ++rep.medical_errors;
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------
// Line-oriented UTF-8: "#SPECIALS" (one token per line), "#ALPHABET" (one
// symbol per line), "#MERGES" (one "left<TAB>right" per line, merge order),
// then "#FLAGS" (key = value).

inline void save_vocab(const Vocab& v, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("vocab: cannot open '" + path + "' for writing");
    out << "#SPECIALS\n";
    for (const auto& s : v.specials) out << s << "\n";
    out << "#ALPHABET\n";
    for (const auto& a : v.alphabet) out << a << "\n";
    out << "#MERGES\n";
    for (const auto& [l, r] : v.merges) out << l << "\t" << r << "\n";
    out << "#FLAGS\n";
    out << "lowercase = " << (v.lowercase ? "true" : "false") << "\n";
    out << "vocab_size = " << v.vocab_size << "\n";
    if (!out) throw DataError("vocab: write failed for '" + path + "'");
}

inline Vocab load_vocab(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("vocab: cannot open '" + path + "'");
    Vocab v;
    enum class Section { none, specials, alphabet, merges, flags } sec = Section::none;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line == "#SPECIALS") {
            sec = Section::specials;
            continue;
        }
        if (line == "#ALPHABET") {
            sec = Section::alphabet;
            continue;
        }
        if (line == "#MERGES") {
            sec = Section::merges;
            continue;
        }
        if (line == "#FLAGS") {
            sec = Section::flags;
            continue;
        }
        if (line.empty()) continue;
        switch (sec) {
            case Section::specials:
                v.specials.push_back(line);
                break;
            case Section::alphabet:
                v.alphabet.push_back(line);
                break;
            case Section::merges: {
                auto tab = line.find('\t');
                if (tab == std::string::npos) throw DataError("vocab: malformed merge line '" + line + "'");
                v.merges.emplace_back(line.substr(0, tab), line.substr(tab + 1));
                break;
            }
            case Section::flags: {
                auto eq = line.find('=');
                if (eq == std::string::npos) throw DataError("vocab: malformed flag line '" + line + "'");
                auto key = line.substr(0, eq);
                auto val = line.substr(eq + 1);
                auto trim = [](std::string s) {
                    while (!s.empty() && is_space(s.front())) s.erase(s.begin());
                    while (!s.empty() && is_space(s.back())) s.pop_back();
                    return s;
                };
                key = trim(key);
                val = trim(val);
                if (key == "lowercase")
                    v.lowercase = (val == "true");
                else if (key == "vocab_size")
                    v.vocab_size = static_cast<std::size_t>(std::stoull(val));
                else
                    throw DataError("vocab: unknown flag '" + key + "'");
                break;
            }
            case Section::none:
                throw DataError("vocab: content before first section header");
        }
    }
    if (v.specials.empty()) throw DataError("vocab: no specials section");
    for (const auto& s : v.specials) detail::add_token(v, s);
    for (const auto& a : v.alphabet) detail::add_token(v, a);
    for (const auto& [l, r] : v.merges) detail::add_token(v, l + r);
    if (v.vocab_size == 0) v.vocab_size = v.size();
    return v;
}

}  // namespace relectra::tok
