#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mman/common.hpp"

namespace mman::text {

// Neighbor histogram slot for tokens at a sentence boundary.
inline constexpr const char* kBoundary = "\x01<s>";

// UTF-8 base tokenization: whitespace-delimited runs of word characters stay
// whole, CJK characters become single-character tokens, punctuation splits
// and is dropped.
std::vector<std::string> base_tokenize(const std::string& text);

// Splits on sentence-final punctuation (ASCII and CJK) and newlines.
std::vector<std::string> split_sentences(const std::string& text);

using Sentence = std::vector<std::string>;

struct Document {
    std::vector<Sentence> sentences;
};

struct Corpus {
    std::vector<Document> documents;
};

// Sentence-splits and base-tokenizes raw texts; empty sentences and empty
// documents are not retained.
Corpus build_corpus(const std::vector<std::string>& texts);

// An adjacent base-token pair observed in the corpus, with its neighbor
// histograms. count equals the total of either histogram; boundary
// neighbors are counted under kBoundary.
struct Candidate {
    std::string first;
    std::string second;
    std::uint64_t count = 0;
    std::map<std::string, std::uint64_t> left;
    std::map<std::string, std::uint64_t> right;

    std::string joint() const { return first + second; }
};

struct CorpusStats {
    std::uint64_t total_tokens = 0; // base-token positions across the corpus
    std::unordered_map<std::string, std::uint64_t> unigram;
    std::map<std::pair<std::string, std::string>, Candidate> candidates;
};

CorpusStats collect_stats(const Corpus& corpus);

enum class Side { Left, Right };

// Entropy (nats) of the neighbor distribution on the chosen side.
double side_entropy(const Candidate& cand, Side side);

// p(a,b) * ln(p(a,b) / (p(a) p(b))) with all frequencies measured over
// base-token positions.
double mutual_information(const Candidate& cand, const CorpusStats& stats);

struct DiscoveryConfig {
    double entropy_threshold = 0.5; // nats, applied to min(left, right)
    std::size_t top_k = 500;
};

struct DiscoveredWord {
    std::string word;
    double mi = 0.0;
    std::uint64_t count = 0;
};

// Candidates passing the entropy gate, ranked by mutual information
// descending; ties break by (count desc, word asc). Deterministic.
std::vector<DiscoveredWord> discover_new_words(const Corpus& corpus,
                                               const DiscoveryConfig& config);

// ---- BM25 over the sentences of one text ----

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

struct Bm25Stats {
    std::size_t doc_count = 0;
    double avg_doc_len = 0.0;
    std::unordered_map<std::string, std::uint64_t> doc_freq;
};

Bm25Stats collect_bm25_stats(const std::vector<Sentence>& docs);

double bm25(const Sentence& query, const Sentence& doc, const Bm25Stats& stats,
            const Bm25Params& params);

// ---- lexicon, stop words, tokenizer ----

class Lexicon {
public:
    // how many adjacent base tokens a single lexicon entry may absorb
    static constexpr std::size_t kMergeWindow = 4;

    void add(const std::string& word);
    bool contains(const std::string& word) const { return words_.count(word) > 0; }
    std::size_t size() const { return words_.size(); }

    std::vector<std::string> sorted_words() const;
    static Lexicon load_file(const std::string& path); // one word per line, UTF-8
    void save_file(const std::string& path) const;

private:
    std::unordered_set<std::string> words_;
};

class StopWords {
public:
    bool contains(const std::string& token) const { return set_.count(token) > 0; }
    std::size_t size() const { return set_.size(); }
    static StopWords load_file(const std::string& path);
    static StopWords bundled();

private:
    std::unordered_set<std::string> set_;
};

// Greedy longest-match over base tokens; spans joined by direct
// concatenation; unmatched spans fall back to single base tokens.
std::vector<std::string> lexicon_tokenize(const Sentence& base_tokens, const Lexicon& lexicon);

struct ExtractConfig {
    std::size_t min_tokens = 5;
    std::size_t max_tokens = 64;
    Bm25Params bm25;
};

struct ExtractResult {
    bool rejected = false;
    std::vector<Sentence> sentences; // kept, in original order
    std::size_t token_count = 0;
};

// Ranks sentences by BM25 against the whole text and keeps them greedily in
// rank order until the next ranked sentence would overflow max_tokens. The
// top-ranked sentence is always kept. Texts below min_tokens are rejected.
ExtractResult extract_key_sentences(const std::vector<Sentence>& sentences,
                                    const ExtractConfig& config);

// Full per-post text pipeline: sentence split, lexicon tokenize, stop-word
// filter, length gates, key-sentence extraction. Returns the flat kept
// token sequence, or rejected=true.
struct PostTextResult {
    bool rejected = false;
    std::vector<std::string> tokens;
};
PostTextResult preprocess_post_text(const std::string& text, const Lexicon& lexicon,
                                    const StopWords& stop_words, const ExtractConfig& config);

// ---- vocabulary ----

class Vocabulary {
public:
    static constexpr int kPadId = 0;
    static constexpr int kUnkId = 1;

    // Tokens ordered by (count desc, token asc); ids 0/1 reserved.
    static Vocabulary build(const std::map<std::string, std::uint64_t>& counts);

    // Tokens in the given order after the reserved ids.
    static Vocabulary from_tokens(const std::vector<std::string>& tokens);

    int id(const std::string& token) const;
    const std::string& token(int id) const;
    std::size_t size() const { return tokens_.size(); }

    static Vocabulary load_file(const std::string& path);
    void save_file(const std::string& path) const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

} // namespace mman::text
