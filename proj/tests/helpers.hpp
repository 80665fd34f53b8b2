#pragma once

#include <random>
#include <string>
#include <vector>

#include "mman/data.hpp"
#include "mman/model.hpp"
#include "mman/textprep.hpp"

namespace testutil {

// Corpus with known planted collocations: plant pairs use dedicated tokens
// that never occur outside their pair, surrounded by random background
// words, so entropy and mutual information must both fire.
struct PlantedCorpus {
    mman::text::Corpus corpus;
    std::vector<std::string> planted_words; // joint forms
};

inline PlantedCorpus make_planted_corpus(std::uint64_t seed, std::size_t n_plants,
                                         std::size_t occurrences_per_plant,
                                         std::size_t background_sentences) {
    std::mt19937_64 rng(seed);
    std::vector<std::string> background;
    for (int i = 0; i < 200; ++i) background.push_back("bg" + std::to_string(i));
    auto bg = [&] { return background[rng() % background.size()]; };

    PlantedCorpus out;
    std::vector<std::string> texts;

    std::vector<std::vector<std::string>> sentences;
    for (std::size_t s = 0; s < background_sentences; ++s) {
        std::vector<std::string> sent;
        const std::size_t len = 6 + rng() % 8;
        for (std::size_t i = 0; i < len; ++i) sent.push_back(bg());
        sentences.push_back(std::move(sent));
    }
    for (std::size_t p = 0; p < n_plants; ++p) {
        const std::string a = "pa" + std::to_string(p);
        const std::string b = "pb" + std::to_string(p);
        out.planted_words.push_back(a + b);
        for (std::size_t k = 0; k < occurrences_per_plant; ++k) {
            std::vector<std::string> sent;
            const std::size_t lead = 1 + rng() % 4;
            for (std::size_t i = 0; i < lead; ++i) sent.push_back(bg());
            sent.push_back(a);
            sent.push_back(b);
            const std::size_t tail = 1 + rng() % 4;
            for (std::size_t i = 0; i < tail; ++i) sent.push_back(bg());
            sentences.push_back(std::move(sent));
        }
    }
    std::shuffle(sentences.begin(), sentences.end(), rng);

    mman::text::Corpus corpus;
    for (auto& sent : sentences) {
        mman::text::Document doc;
        doc.sentences.push_back(std::move(sent));
        corpus.documents.push_back(std::move(doc));
    }
    out.corpus = std::move(corpus);
    return out;
}

// Smallest config that exercises every model path; cheap enough for
// whole-model finite differences inside the unit suite.
inline mman::model::ModelConfig tiny_model_config(std::size_t vocab) {
    mman::model::ModelConfig c;
    c.vocab_size = vocab;
    c.latent_dim = 16;
    c.heads = 2;
    c.max_posts = 3;
    c.max_tokens = 4;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.capsule_dim = 4;
    c.infer_channels = 4;
    c.cnn_channels = 4;
    c.dropout_rate = 0.2;
    return c;
}

// A hand-built sample with `n_posts` posts against a simple price series.
inline mman::data::Sample make_test_sample(std::uint64_t seed, std::size_t n_posts,
                                           std::size_t vocab, std::size_t tokens_per_post) {
    std::mt19937_64 rng(seed);
    mman::data::Sample s;
    s.stock_id = "TST";
    s.reference_time = mman::data::date_to_epoch("2021-03-01");
    s.label = static_cast<int>(rng() % 2);
    s.movement_ratio = s.label ? 0.01 : -0.01;

    std::vector<mman::data::PriceBar> bars;
    double price = 50.0;
    for (int i = 0; i < 80; ++i) {
        mman::data::PriceBar b;
        b.date = mman::data::epoch_to_date(s.reference_time - (79 - i) * 86400);
        price *= 1.0 + (static_cast<double>(rng() % 100) - 49.5) / 5000.0;
        b.close = price;
        b.open = price * 0.999;
        b.high = std::max(b.open, b.close) * 1.01;
        b.low = std::min(b.open, b.close) * 0.99;
        b.adj_close = b.close;
        b.volume = 1000.0 + static_cast<double>(rng() % 5000);
        bars.push_back(b);
    }

    mman::data::NameEmbedder embedder;
    for (std::size_t i = 0; i < n_posts; ++i) {
        mman::data::Post p;
        p.stock_id = s.stock_id;
        p.release_time = s.reference_time - static_cast<std::int64_t>(rng() % (5 * 86400));
        for (std::size_t k = 0; k < tokens_per_post; ++k) {
            p.tokens.push_back(2 + static_cast<int>(rng() % (vocab - 2)));
        }
        p.poster.fans = rng() % 10000;
        p.poster.followers = rng() % 3000;
        p.poster.posted_texts = rng() % 500;
        p.poster.concerned_stocks = {"TST", "OTH"};
        p.poster.profits = {{"TST", 0.05}, {"OTH", -0.02}};
        p.feedback.likes = rng() % 100;
        p.feedback.retweets = rng() % 50;
        p.feedback.replies = rng() % 30;
        s.windows.push_back(mman::data::build_price_window(bars));
        s.social.push_back(mman::data::social_vector(p, s.stock_id, embedder));
        s.posts.push_back(std::move(p));
    }
    return s;
}

} // namespace testutil
