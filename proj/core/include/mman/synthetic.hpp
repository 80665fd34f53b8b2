#pragma once

#include <cstdint>
#include <vector>

#include "mman/data.hpp"
#include "mman/textprep.hpp"

namespace mman::synth {

struct SyntheticConfig {
    std::uint64_t seed = 7;
    std::size_t n_samples = 1000;
    // Probability that a sample carries any planted evidence at all; a
    // non-informative sample has a coin-flip label and neutral features.
    double signal_strength = 1.0;
    bool text_plants = true;
    bool price_plants = true;
    std::size_t max_posts = 8;
    std::size_t tokens_per_post = 12;
};

// What was planted into one sample. type: 0 = both channels, 1 = text only,
// 2 = price only, -1 = nothing (non-informative).
struct PlantRecord {
    std::size_t sample_index = 0;
    int label = 0;
    bool informative = false;
    int type = -1;
    int text_dir = -1;  // -1 absent, else 0/1
    int price_dir = -1;
    std::size_t credible_posts = 0; // carry the true motif
    std::size_t noise_posts = 0;    // carry the contradicting motif
};

struct SyntheticDataset {
    std::uint64_t seed = 0;
    double signal_strength = 1.0;
    std::vector<data::Sample> samples;
    std::vector<PlantRecord> plants;
    text::Vocabulary vocab;
};

// Labels are a deterministic function of the plants: bullish/bearish token
// motifs carried by high-fan posters (low-fan posters post the contradicting
// motif), and a drift plant in the price windows. Bit-reproducible per seed.
SyntheticDataset generate_synthetic_dataset(const SyntheticConfig& config);

// Replays a plant record the way a Bayes-optimal reader of the manifest
// would: planted direction when informative, Rise otherwise.
int oracle_predict(const PlantRecord& plant);

// Accuracy of oracle_predict against the generated labels.
double manifest_bayes_accuracy(const SyntheticDataset& dataset);

} // namespace mman::synth
