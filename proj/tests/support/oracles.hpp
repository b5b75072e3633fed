#pragma once

// Test-side oracles, independent of the library implementation paths they
// check.

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "relectra/rng.hpp"
#include "relectra/tokenizer.hpp"

namespace testutil {

// Brute-force BPE trainer: recounts every pair frequency from scratch each
// iteration. Same contract as the production trainer: whitespace words,
// standalone "</w>" symbol, overlapping pair counts, greedy left-to-right
// merge application, ties to the lexicographically smallest pair, stop when
// the new-token budget is exhausted or no pair occurs twice.
inline std::vector<std::pair<std::string, std::string>> bpe_oracle_merges(const std::string& corpus,
                                                                          std::size_t new_token_budget,
                                                                          bool lowercase = true) {
    std::map<std::vector<std::string>, long long> words;  // symbol seq -> frequency
    {
        std::istringstream in(corpus);
        std::string w;
        while (in >> w) {
            if (lowercase) w = relectra::tok::ascii_lower(w);
            std::vector<std::string> syms = relectra::tok::utf8_chars(w);
            syms.push_back(relectra::tok::kWordEnd);
            ++words[syms];
        }
    }
    std::set<std::string> tokens;  // token strings minted so far (alphabet implicit)
    std::vector<std::pair<std::string, std::string>> merges;
    while (tokens.size() < new_token_budget) {
        std::map<std::pair<std::string, std::string>, long long> counts;
        for (const auto& [syms, freq] : words) {
            for (std::size_t i = 0; i + 1 < syms.size(); ++i) counts[{syms[i], syms[i + 1]}] += freq;
        }
        bool found = false;
        std::pair<std::string, std::string> best;
        long long best_count = 0;
        for (const auto& [pair, count] : counts) {
            if (count < 2) continue;
            if (!found || count > best_count || (count == best_count && pair < best)) {
                found = true;
                best = pair;
                best_count = count;
            }
        }
        if (!found) break;
        merges.push_back(best);
        std::map<std::vector<std::string>, long long> next;
        for (const auto& [syms, freq] : words) {
            std::vector<std::string> ns;
            std::size_t i = 0;
            while (i < syms.size()) {
                if (i + 1 < syms.size() && syms[i] == best.first && syms[i + 1] == best.second) {
                    ns.push_back(best.first + best.second);
                    i += 2;
                } else {
                    ns.push_back(syms[i]);
                    ++i;
                }
            }
            next[ns] += freq;
        }
        words = std::move(next);
        tokens.insert(best.first + best.second);
    }
    return merges;
}

// Random whitespace-separated text over a small alphabet.
inline std::string random_text(relectra::Rng& rng, std::size_t n_words, std::size_t max_word_len = 6,
                               const std::string& alphabet = "abcd") {
    std::string out;
    for (std::size_t i = 0; i < n_words; ++i) {
        if (i) out += ' ';
        std::size_t len = 1 + rng.bounded(static_cast<std::uint32_t>(max_word_len));
        for (std::size_t k = 0; k < len; ++k) out += alphabet[rng.bounded(static_cast<std::uint32_t>(alphabet.size()))];
    }
    return out;
}

}  // namespace testutil
