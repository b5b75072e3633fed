#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "relectra/errors.hpp"
#include "relectra/rng.hpp"
#include "relectra/tokenizer.hpp"

namespace relectra::corpus {

// ---------------------------------------------------------------------------
// cleaning
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& default_header_patterns() {
    // All-caps docket-style lines. User-configurable; matched per line and
    // against each merged paragraph.
    static const std::vector<std::string> pats{
        R"(^[^a-z]*[A-Z]{2,}[^a-z]*$)",
    };
    return pats;
}

// Removes control characters, drops header-pattern lines and paragraphs
// under 60% basic-Latin letters, collapses whitespace. Idempotent: output
// paragraphs are single lines separated by blank lines, and every emitted
// paragraph passes the same line-level filters it was built from.
inline std::string clean_text(const std::string& raw,
                              const std::vector<std::string>& header_patterns = default_header_patterns(),
                              double min_latin_ratio = 0.6) {
    std::vector<std::regex> regs;
    regs.reserve(header_patterns.size());
    for (const auto& p : header_patterns) regs.emplace_back(p);

    // Strip control characters; tabs become spaces, newlines survive.
    std::string text;
    text.reserve(raw.size());
    for (unsigned char c : raw) {
        if (c == '\t') {
            text += ' ';
        } else if (c == '\n') {
            text += '\n';
        } else if (c < 0x20 || c == 0x7f) {
            // dropped
        } else {
            text += static_cast<char>(c);
        }
    }

    auto is_header = [&](const std::string& line) {
        bool has_letter = std::any_of(line.begin(), line.end(),
                                      [](unsigned char c) { return std::isalpha(c) != 0; });
        if (!has_letter) return false;
        for (const auto& re : regs) {
            if (std::regex_match(line, re)) return true;
        }
        return false;
    };
    auto latin_ratio_ok = [&](const std::string& para) {
        std::size_t letters = 0, total = 0;
        for (unsigned char c : para) {
            if (tok::is_space(static_cast<char>(c))) continue;
            ++total;
            if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) ++letters;
        }
        if (total == 0) return false;
        return static_cast<double>(letters) / static_cast<double>(total) >= min_latin_ratio;
    };

    // Lines -> header filter -> blank-line paragraph grouping.
    std::vector<std::string> paragraphs;
    std::string current;
    auto flush = [&]() {
        // Collapse whitespace within the paragraph to single spaces.
        std::string collapsed;
        bool in_space = true;
        for (char c : current) {
            if (tok::is_space(c)) {
                if (!in_space) collapsed += ' ';
                in_space = true;
            } else {
                collapsed += c;
                in_space = false;
            }
        }
        while (!collapsed.empty() && collapsed.back() == ' ') collapsed.pop_back();
        current.clear();
        if (collapsed.empty()) return;
        // Re-apply the filters to the merged paragraph so cleaning is a
        // fixed point.
        if (is_header(collapsed)) return;
        if (!latin_ratio_ok(collapsed)) return;
        paragraphs.push_back(std::move(collapsed));
    };

    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        bool blank = std::all_of(line.begin(), line.end(), [](char c) { return tok::is_space(c); });
        if (blank) {
            flush();
            continue;
        }
        if (is_header(line)) continue;
        if (!current.empty()) current += ' ';
        current += line;
    }
    flush();

    std::string out;
    for (std::size_t i = 0; i < paragraphs.size(); ++i) {
        if (i) out += "\n\n";
        out += paragraphs[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// sources and manifests
// ---------------------------------------------------------------------------

struct CorpusSource {
    std::string name;
    std::string domain;  // legal | medical | mixed
    std::string path;
    double weight = 0;
    std::vector<std::string> documents;
};

// Splits file content into blank-line-separated documents.
inline std::vector<std::string> split_documents(const std::string& content) {
    std::vector<std::string> docs;
    std::string cur;
    std::istringstream lines(content);
    std::string line;
    auto flush = [&]() {
        while (!cur.empty() && tok::is_space(cur.back())) cur.pop_back();
        if (!cur.empty()) docs.push_back(cur);
        cur.clear();
    };
    while (std::getline(lines, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        bool blank = std::all_of(line.begin(), line.end(), [](char c) { return tok::is_space(c); });
        if (blank) {
            flush();
        } else {
            if (!cur.empty()) cur += '\n';
            cur += line;
        }
    }
    flush();
    return docs;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("corpus: cannot open '" + path + "'");
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Loads documents for a source: a plain file is blank-line split, a
// directory contributes every regular file in sorted name order.
inline void load_source_documents(CorpusSource& src, bool clean = true) {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    if (fs::is_directory(src.path)) {
        for (const auto& e : fs::directory_iterator(src.path)) {
            if (e.is_regular_file()) files.push_back(e.path().string());
        }
        std::sort(files.begin(), files.end());
    } else if (fs::exists(src.path)) {
        files.push_back(src.path);
    } else {
        throw DataError("corpus: source '" + src.name + "' path does not exist: " + src.path);
    }
    for (const auto& f : files) {
        for (auto& doc : split_documents(read_file(f))) {
            std::string d = clean ? clean_text(doc) : doc;
            if (!d.empty()) src.documents.push_back(std::move(d));
        }
    }
}

// Manifest: flat key=value stanzas separated by blank lines; keys are
// name, domain, path, weight. Relative paths resolve against base_dir.
inline std::vector<CorpusSource> parse_manifest(const std::string& content, const std::string& base_dir = "") {
    std::vector<CorpusSource> sources;
    CorpusSource cur;
    bool any_key = false;
    auto flush = [&]() {
        if (!any_key) return;
        if (cur.name.empty()) throw DataError("corpus manifest: stanza missing 'name'");
        if (cur.path.empty()) throw DataError("corpus manifest: source '" + cur.name + "' missing 'path'");
        if (cur.domain != "legal" && cur.domain != "medical" && cur.domain != "mixed") {
            throw DataError("corpus manifest: source '" + cur.name + "' has unknown domain '" + cur.domain +
                            "'");
        }
        if (cur.weight < 0) throw DataError("corpus manifest: source '" + cur.name + "' has negative weight");
        if (!base_dir.empty() && !std::filesystem::path(cur.path).is_absolute()) {
            cur.path = (std::filesystem::path(base_dir) / cur.path).string();
        }
        sources.push_back(std::move(cur));
        cur = CorpusSource{};
        any_key = false;
    };
    std::istringstream lines(content);
    std::string line;
    while (std::getline(lines, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        bool blank = std::all_of(line.begin(), line.end(), [](char c) { return tok::is_space(c); });
        if (blank) {
            flush();
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("corpus manifest: malformed line '" + line + "'");
        auto trim = [](std::string s) {
            while (!s.empty() && tok::is_space(s.front())) s.erase(s.begin());
            while (!s.empty() && tok::is_space(s.back())) s.pop_back();
            return s;
        };
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        any_key = true;
        if (key == "name")
            cur.name = val;
        else if (key == "domain")
            cur.domain = val;
        else if (key == "path")
            cur.path = val;
        else if (key == "weight")
            cur.weight = std::stod(val);
        else
            throw DataError("corpus manifest: unknown key '" + key + "'");
    }
    flush();
    if (sources.empty()) throw DataError("corpus manifest: no sources");
    return sources;
}

// ---------------------------------------------------------------------------
// mixing
// ---------------------------------------------------------------------------

// Weighted document sampler over the nonempty sources. Each source is
// consumed as a shuffled pass; an exhausted source reshuffles and recycles.
class MixedStream {
public:
    MixedStream(std::vector<CorpusSource> sources, Rng rng) : sources_(std::move(sources)), rng_(rng) {
        double total = 0;
        for (const auto& s : sources_) {
            if (!s.documents.empty() && s.weight > 0) total += s.weight;
        }
        if (total <= 0) throw DataError("corpus: all sources empty or zero-weighted");
        for (auto& s : sources_) {
            weights_.push_back(s.documents.empty() ? 0.0 : s.weight / total);
            order_.emplace_back();
            cursor_.push_back(0);
        }
        for (std::size_t i = 0; i < sources_.size(); ++i) reshuffle(i);
    }

    const std::string& next() {
        double u = rng_.uniform();
        double acc = 0;
        std::size_t pick = sources_.size() - 1;
        for (std::size_t i = 0; i < sources_.size(); ++i) {
            acc += weights_[i];
            if (weights_[i] > 0 && u < acc) {
                pick = i;
                break;
            }
        }
        while (weights_[pick] == 0) pick = (pick + 1) % sources_.size();
        last_source_ = pick;
        if (cursor_[pick] >= order_[pick].size()) reshuffle(pick);
        return sources_[pick].documents[order_[pick][cursor_[pick]++]];
    }

    std::size_t source_of_last() const { return last_source_; }

    Rng& rng() { return rng_; }

private:
    void reshuffle(std::size_t i) {
        order_[i].resize(sources_[i].documents.size());
        for (std::size_t k = 0; k < order_[i].size(); ++k) order_[i][k] = k;
        rng_.shuffle(order_[i].begin(), order_[i].end());
        cursor_[i] = 0;
    }

    std::vector<CorpusSource> sources_;
    std::vector<double> weights_;
    std::vector<std::vector<std::size_t>> order_;
    std::vector<std::size_t> cursor_;
    std::size_t last_source_ = 0;
    Rng rng_;
};

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

struct Batch {
    std::vector<std::vector<int>> rows;   // padded id matrix
    std::vector<std::vector<bool>> mask;  // true on real (non-pad) tokens

    std::size_t size() const { return rows.size(); }
};

// Encodes documents, wraps segments with [CLS]/[SEP], splits to the length
// budget, groups a buffer of segments by similar length, pads with [PAD].
class Batcher {
public:
    Batcher(MixedStream& stream, const tok::Encoder& encoder, std::size_t batch_size, std::size_t max_seq_len,
            std::size_t buffer_batches = 8)
        : stream_(stream),
          encoder_(encoder),
          batch_size_(batch_size),
          max_seq_len_(max_seq_len),
          buffer_target_(batch_size * buffer_batches) {
        if (max_seq_len_ < 3) throw ConfigError("batcher: max_seq_len too small for [CLS] text [SEP]");
    }

    Batch next() {
        if (pending_.empty()) refill();
        Batch b;
        const int pad = encoder_.vocab().pad_id();
        std::size_t take = std::min(batch_size_, pending_.size());
        std::size_t width = 0;
        for (std::size_t i = 0; i < take; ++i) width = std::max(width, pending_[i].size());
        for (std::size_t i = 0; i < take; ++i) {
            auto row = pending_[i];
            std::vector<bool> m(width, false);
            for (std::size_t j = 0; j < row.size(); ++j) m[j] = true;
            row.resize(width, pad);
            b.rows.push_back(std::move(row));
            b.mask.push_back(std::move(m));
        }
        pending_.erase(pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(take));
        return b;
    }

private:
    void refill() {
        std::vector<std::vector<int>> segs;
        while (segs.size() < buffer_target_) {
            const std::string& doc = stream_.next();
            tok::TokenSequence ts = encoder_.encode(doc, /*add_specials=*/false);
            if (ts.ids.empty()) continue;
            std::size_t body = max_seq_len_ - 2;
            for (std::size_t off = 0; off < ts.ids.size(); off += body) {
                std::size_t end = std::min(off + body, ts.ids.size());
                std::vector<int> seg;
                seg.reserve(end - off + 2);
                seg.push_back(encoder_.vocab().cls_id());
                seg.insert(seg.end(), ts.ids.begin() + static_cast<std::ptrdiff_t>(off),
                           ts.ids.begin() + static_cast<std::ptrdiff_t>(end));
                seg.push_back(encoder_.vocab().sep_id());
                segs.push_back(std::move(seg));
            }
        }
        // Group by similar length; stable so arrival order breaks ties.
        std::stable_sort(segs.begin(), segs.end(),
                         [](const auto& a, const auto& b) { return a.size() < b.size(); });
        pending_ = std::move(segs);
    }

    MixedStream& stream_;
    const tok::Encoder& encoder_;
    std::size_t batch_size_;
    std::size_t max_seq_len_;
    std::size_t buffer_target_;
    std::vector<std::vector<int>> pending_;
};

}  // namespace relectra::corpus
