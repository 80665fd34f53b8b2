#pragma once

#include <cstdint>
#include <string>

#include "mman/model.hpp"
#include "mman/synthetic.hpp"
#include "mman/textprep.hpp"
#include "mman/train.hpp"

namespace mman::config {

// Flat key = value configuration shared by every CLI command; unknown keys
// are rejected and the resolved form is written next to every output.
struct RunConfig {
    // model
    std::size_t latent_dim = 512;
    std::size_t heads = 8;
    std::size_t max_posts = 96;
    std::size_t max_tokens = 64;
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 1;
    std::size_t capsule_dim = 8;
    std::size_t infer_channels = 16;
    std::size_t cnn_channels = 8;
    double dropout = 0.2;
    bool desk_preset = false; // d=32, m=4, n=8, s=12
    std::string ablation = "full";

    // training
    double lr0 = 0.001;
    double weight_decay = 0.001;
    std::size_t batch = 64;
    std::size_t epochs = 10;
    std::uint64_t seed = 1;

    // preprocessing
    double entropy_threshold = 0.5;
    std::size_t top_k = 500;
    double bm25_k1 = 1.2;
    double bm25_b = 0.75;
    std::size_t min_tokens = 5;
    double theta = 0.0075;
    std::size_t lookback_days = 14;
    std::size_t horizon_days = 5;
    std::string stopwords_file;
    std::string lexicon_file;
    std::string embeddings_file;

    // synthetic data
    std::size_t n_samples = 1000;
    double signal = 1.0;
    std::string plants = "dual"; // dual | text | price | none

    // dataset handling
    std::string split = "chrono"; // chrono (70/10/20 per stock) | none (train on all)

    void set(const std::string& key, const std::string& value); // ConfigError on unknown key
    void apply_override(const std::string& key_equals_value);
    static RunConfig load_file(const std::string& path);
    std::string serialize() const; // sorted "key = value" lines

    model::ModelConfig to_model_config(std::size_t vocab_size) const;
    train::TrainConfig to_train_config() const;
    synth::SyntheticConfig to_synthetic_config() const;
    text::ExtractConfig to_extract_config() const;
};

} // namespace mman::config
