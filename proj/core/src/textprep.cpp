#include "mman/textprep.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace mman::text {

namespace {

// Minimal UTF-8 decoder; invalid bytes decode as U+FFFD and advance by one.
char32_t decode_utf8(const std::string& s, std::size_t& i) {
    const auto byte = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
    const unsigned char b0 = byte(i);
    if (b0 < 0x80) {
        ++i;
        return b0;
    }
    auto cont = [&](std::size_t k) {
        return k < s.size() && (byte(k) & 0xC0) == 0x80;
    };
    if ((b0 & 0xE0) == 0xC0 && cont(i + 1)) {
        const char32_t cp = ((b0 & 0x1Fu) << 6) | (byte(i + 1) & 0x3Fu);
        i += 2;
        return cp;
    }
    if ((b0 & 0xF0) == 0xE0 && cont(i + 1) && cont(i + 2)) {
        const char32_t cp =
            ((b0 & 0x0Fu) << 12) | ((byte(i + 1) & 0x3Fu) << 6) | (byte(i + 2) & 0x3Fu);
        i += 3;
        return cp;
    }
    if ((b0 & 0xF8) == 0xF0 && cont(i + 1) && cont(i + 2) && cont(i + 3)) {
        const char32_t cp = ((b0 & 0x07u) << 18) | ((byte(i + 1) & 0x3Fu) << 12) |
                            ((byte(i + 2) & 0x3Fu) << 6) | (byte(i + 3) & 0x3Fu);
        i += 4;
        return cp;
    }
    ++i;
    return 0xFFFD;
}

bool is_space_cp(char32_t c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == 0x3000 || c == 0x00A0;
}

bool is_cjk_cp(char32_t c) {
    return (c >= 0x3040 && c <= 0x30FF) ||  // kana
           (c >= 0x3400 && c <= 0x4DBF) || (c >= 0x4E00 && c <= 0x9FFF) ||
           (c >= 0xAC00 && c <= 0xD7AF) ||  // hangul
           (c >= 0xF900 && c <= 0xFAFF);
}

bool is_punct_cp(char32_t c) {
    if (c < 0x80) {
        return !(std::isalnum(static_cast<int>(c)) != 0) && !is_space_cp(c);
    }
    return (c >= 0x3000 && c <= 0x303F) || (c >= 0xFF00 && c <= 0xFF0F) ||
           (c >= 0xFF1A && c <= 0xFF20) || (c >= 0x2000 && c <= 0x206F);
}

bool is_sentence_end_cp(char32_t c) {
    switch (c) {
        case '.':
        case '!':
        case '?':
        case ';':
        case '\n':
        case 0x3002:  // 。
        case 0xFF01:  // ！
        case 0xFF1F:  // ？
        case 0xFF1B:  // ；
        case 0x2026:  // …
            return true;
        default:
            return false;
    }
}

void encode_utf8(char32_t cp, std::string& out) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

} // namespace

std::vector<std::string> base_tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            out.push_back(word);
            word.clear();
        }
    };
    std::size_t i = 0;
    while (i < text.size()) {
        const char32_t cp = decode_utf8(text, i);
        if (is_space_cp(cp) || is_punct_cp(cp) || cp == 0xFFFD) {
            flush();
        } else if (is_cjk_cp(cp)) {
            flush();
            std::string single;
            encode_utf8(cp, single);
            out.push_back(std::move(single));
        } else {
            encode_utf8(cp, word);
        }
    }
    flush();
    return out;
}

std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    std::size_t i = 0;
    while (i < text.size()) {
        const std::size_t start = i;
        const char32_t cp = decode_utf8(text, i);
        if (is_sentence_end_cp(cp)) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur.append(text, start, i - start);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

Corpus build_corpus(const std::vector<std::string>& texts) {
    Corpus corpus;
    for (const std::string& t : texts) {
        Document doc;
        for (const std::string& raw : split_sentences(t)) {
            Sentence s = base_tokenize(raw);
            if (!s.empty()) doc.sentences.push_back(std::move(s));
        }
        if (!doc.sentences.empty()) corpus.documents.push_back(std::move(doc));
    }
    return corpus;
}

CorpusStats collect_stats(const Corpus& corpus) {
    CorpusStats stats;
    for (const Document& doc : corpus.documents) {
        for (const Sentence& s : doc.sentences) {
            stats.total_tokens += s.size();
            for (const std::string& tok : s) ++stats.unigram[tok];
            for (std::size_t i = 0; i + 1 < s.size(); ++i) {
                Candidate& c = stats.candidates[{s[i], s[i + 1]}];
                if (c.count == 0) {
                    c.first = s[i];
                    c.second = s[i + 1];
                }
                ++c.count;
                const std::string& lhs = (i > 0) ? s[i - 1] : kBoundary;
                const std::string& rhs = (i + 2 < s.size()) ? s[i + 2] : kBoundary;
                ++c.left[lhs];
                ++c.right[rhs];
            }
        }
    }
    return stats;
}

double side_entropy(const Candidate& cand, Side side) {
    const auto& hist = (side == Side::Left) ? cand.left : cand.right;
    if (hist.empty()) throw ContractError("side_entropy: empty neighbor histogram");
    std::uint64_t total = 0;
    for (const auto& [tok, n] : hist) {
        (void)tok;
        total += n;
    }
    double h = 0.0;
    for (const auto& [tok, n] : hist) {
        (void)tok;
        const double p = static_cast<double>(n) / static_cast<double>(total);
        h -= p * std::log(p);
    }
    return std::max(h, 0.0);
}

double mutual_information(const Candidate& cand, const CorpusStats& stats) {
    const auto ita = stats.unigram.find(cand.first);
    const auto itb = stats.unigram.find(cand.second);
    if (ita == stats.unigram.end() || itb == stats.unigram.end() || cand.count == 0 ||
        stats.total_tokens == 0) {
        throw ContractError("mutual_information: zero marginal probability for pair (" +
                            cand.first + ", " + cand.second + ")");
    }
    const double total = static_cast<double>(stats.total_tokens);
    const double pa = static_cast<double>(ita->second) / total;
    const double pb = static_cast<double>(itb->second) / total;
    const double pab = static_cast<double>(cand.count) / total;
    return pab * std::log(pab / (pa * pb));
}

std::vector<DiscoveredWord> discover_new_words(const Corpus& corpus,
                                               const DiscoveryConfig& config) {
    if (config.top_k == 0) return {};
    const CorpusStats stats = collect_stats(corpus);
    std::vector<DiscoveredWord> kept;
    for (const auto& [key, cand] : stats.candidates) {
        (void)key;
        const double h = std::min(side_entropy(cand, Side::Left),
                                  side_entropy(cand, Side::Right));
        if (h < config.entropy_threshold) continue;
        kept.push_back({cand.joint(), mutual_information(cand, stats), cand.count});
    }
    std::sort(kept.begin(), kept.end(), [](const DiscoveredWord& a, const DiscoveredWord& b) {
        if (a.mi != b.mi) return a.mi > b.mi;
        if (a.count != b.count) return a.count > b.count;
        return a.word < b.word;
    });
    if (kept.size() > config.top_k) kept.resize(config.top_k);
    return kept;
}

Bm25Stats collect_bm25_stats(const std::vector<Sentence>& docs) {
    Bm25Stats stats;
    stats.doc_count = docs.size();
    std::uint64_t total_len = 0;
    for (const Sentence& d : docs) {
        total_len += d.size();
        std::unordered_set<std::string> seen;
        for (const std::string& t : d) {
            if (seen.insert(t).second) ++stats.doc_freq[t];
        }
    }
    stats.avg_doc_len =
        docs.empty() ? 0.0 : static_cast<double>(total_len) / static_cast<double>(docs.size());
    return stats;
}

double bm25(const Sentence& query, const Sentence& doc, const Bm25Stats& stats,
            const Bm25Params& params) {
    if (doc.empty() || stats.doc_count == 0) return 0.0;
    std::unordered_map<std::string, std::uint64_t> tf;
    for (const std::string& t : doc) ++tf[t];
    std::unordered_set<std::string> seen;
    const double n = static_cast<double>(stats.doc_count);
    const double dl = static_cast<double>(doc.size());
    const double len_norm =
        1.0 - params.b + params.b * dl / (stats.avg_doc_len > 0 ? stats.avg_doc_len : 1.0);
    double score = 0.0;
    for (const std::string& t : query) {
        if (!seen.insert(t).second) continue; // unique query terms
        const auto itf = tf.find(t);
        if (itf == tf.end()) continue;
        const auto idf_it = stats.doc_freq.find(t);
        const double df = idf_it == stats.doc_freq.end()
                              ? 0.0
                              : static_cast<double>(idf_it->second);
        const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
        const double f = static_cast<double>(itf->second);
        score += idf * f * (params.k1 + 1.0) / (f + params.k1 * len_norm);
    }
    return score;
}

void Lexicon::add(const std::string& word) {
    if (word.empty()) return;
    words_.insert(word);
}

std::vector<std::string> Lexicon::sorted_words() const {
    std::vector<std::string> out(words_.begin(), words_.end());
    std::sort(out.begin(), out.end());
    return out;
}

Lexicon Lexicon::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open lexicon file: " + path);
    Lexicon lex;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (!line.empty()) lex.add(line);
    }
    return lex;
}

void Lexicon::save_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write lexicon file: " + path);
    for (const std::string& w : sorted_words()) out << w << "\n";
}

StopWords StopWords::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open stop-word file: " + path);
    StopWords sw;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (!line.empty()) sw.set_.insert(line);
    }
    return sw;
}

StopWords StopWords::bundled() {
    static const char* kWords[] = {
        "the", "a",  "an", "of", "to", "and", "is", "are", "was", "in", "on", "at",
        "for", "it", "as", "by", "be", "or",  "we", "he",  "she", "i",
        "的",  "了", "是", "在", "和", "我",  "有", "就",  "不",  "人", "都", "一",
        "上",  "也", "很", "到", "要", "你",  "会", "着",  "这",  "那",
    };
    StopWords sw;
    for (const char* w : kWords) sw.set_.insert(w);
    return sw;
}

std::vector<std::string> lexicon_tokenize(const Sentence& base_tokens, const Lexicon& lexicon) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < base_tokens.size()) {
        const std::size_t limit = std::min(Lexicon::kMergeWindow, base_tokens.size() - i);
        std::size_t taken = 1;
        std::string tok = base_tokens[i];
        for (std::size_t span = limit; span >= 2; --span) {
            std::string joined;
            for (std::size_t k = 0; k < span; ++k) joined += base_tokens[i + k];
            if (lexicon.contains(joined)) {
                taken = span;
                tok = std::move(joined);
                break;
            }
        }
        out.push_back(std::move(tok));
        i += taken;
    }
    return out;
}

ExtractResult extract_key_sentences(const std::vector<Sentence>& sentences,
                                    const ExtractConfig& config) {
    ExtractResult result;
    std::size_t total = 0;
    for (const Sentence& s : sentences) total += s.size();
    if (total < config.min_tokens) {
        result.rejected = true;
        return result;
    }
    if (total <= config.max_tokens) {
        result.sentences = sentences;
        result.token_count = total;
        return result;
    }

    Sentence whole;
    whole.reserve(total);
    for (const Sentence& s : sentences) whole.insert(whole.end(), s.begin(), s.end());
    const Bm25Stats stats = collect_bm25_stats(sentences);

    std::vector<std::pair<double, std::size_t>> ranked; // (score, index)
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        ranked.emplace_back(bm25(whole, sentences[i], stats, config.bm25), i);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });

    std::vector<std::size_t> kept_idx;
    std::size_t kept_tokens = 0;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
        const std::size_t idx = ranked[r].second;
        const std::size_t len = sentences[idx].size();
        if (r == 0) {
            kept_idx.push_back(idx); // always keep the top sentence
            kept_tokens += len;
            continue;
        }
        if (kept_tokens + len > config.max_tokens) break;
        kept_idx.push_back(idx);
        kept_tokens += len;
    }
    std::sort(kept_idx.begin(), kept_idx.end());
    for (std::size_t idx : kept_idx) result.sentences.push_back(sentences[idx]);
    result.token_count = kept_tokens;
    return result;
}

PostTextResult preprocess_post_text(const std::string& text, const Lexicon& lexicon,
                                    const StopWords& stop_words, const ExtractConfig& config) {
    PostTextResult out;
    std::vector<Sentence> sentences;
    for (const std::string& raw : split_sentences(text)) {
        Sentence base = base_tokenize(raw);
        Sentence toks = lexicon_tokenize(base, lexicon);
        Sentence filtered;
        for (std::string& t : toks) {
            if (!stop_words.contains(t)) filtered.push_back(std::move(t));
        }
        if (!filtered.empty()) sentences.push_back(std::move(filtered));
    }
    ExtractResult extracted = extract_key_sentences(sentences, config);
    if (extracted.rejected) {
        out.rejected = true;
        return out;
    }
    for (const Sentence& s : extracted.sentences) {
        out.tokens.insert(out.tokens.end(), s.begin(), s.end());
    }
    if (out.tokens.empty()) out.rejected = true;
    return out;
}

Vocabulary Vocabulary::build(const std::map<std::string, std::uint64_t>& counts) {
    std::vector<std::pair<std::string, std::uint64_t>> items(counts.begin(), counts.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary v;
    v.tokens_ = {"<pad>", "<unk>"};
    for (auto& [tok, cnt] : items) {
        (void)cnt;
        v.tokens_.push_back(tok);
    }
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.ids_[v.tokens_[i]] = static_cast<int>(i);
    return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    v.tokens_ = {"<pad>", "<unk>"};
    v.tokens_.insert(v.tokens_.end(), tokens.begin(), tokens.end());
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.ids_[v.tokens_[i]] = static_cast<int>(i);
    return v;
}

int Vocabulary::id(const std::string& token) const {
    const auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw ContractError("vocabulary: id out of range: " + std::to_string(id));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

Vocabulary Vocabulary::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary file: " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (!line.empty()) v.tokens_.push_back(line);
    }
    if (v.tokens_.size() < 2 || v.tokens_[0] != "<pad>" || v.tokens_[1] != "<unk>") {
        throw DataError("vocabulary file must start with <pad> and <unk>: " + path);
    }
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.ids_[v.tokens_[i]] = static_cast<int>(i);
    return v;
}

void Vocabulary::save_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary file: " + path);
    for (const std::string& t : tokens_) out << t << "\n";
}

} // namespace mman::text
