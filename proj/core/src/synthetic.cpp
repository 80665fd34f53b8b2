#include "mman/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace mman::synth {

namespace {

const std::vector<std::string>& motif_tokens(int direction) {
    static const std::vector<std::string> rise = {"surge", "breakout", "rally", "moon"};
    static const std::vector<std::string> fall = {"selloff", "crash", "dump", "slide"};
    return direction == 1 ? rise : fall;
}

std::vector<std::string> filler_tokens() {
    std::vector<std::string> f;
    for (int i = 0; i < 24; ++i) f.push_back("talk" + std::to_string(i));
    return f;
}

std::vector<std::string> vocab_tokens() {
    std::vector<std::string> toks;
    for (const std::string& t : motif_tokens(1)) toks.push_back(t);
    for (const std::string& t : motif_tokens(0)) toks.push_back(t);
    for (const std::string& t : filler_tokens()) toks.push_back(t);
    return toks;
}

// Bars over consecutive calendar days ending `horizon` days after the
// reference date; drift != 0 plants a visible trend.
std::vector<data::PriceBar> make_bars(std::int64_t ref_epoch, std::size_t days_before,
                                      std::size_t days_after, double drift,
                                      std::mt19937_64& rng) {
    std::normal_distribution<double> step_noise(0.0, 0.004);
    std::normal_distribution<double> intraday(0.0, 0.003);
    std::uniform_real_distribution<double> vol_u(9.0, 12.0);
    std::vector<data::PriceBar> bars;
    double log_price = std::log(100.0);
    const std::int64_t start = ref_epoch - static_cast<std::int64_t>(days_before) * 86400;
    for (std::size_t i = 0; i < days_before + 1 + days_after; ++i) {
        log_price += drift + step_noise(rng);
        data::PriceBar bar;
        bar.date = data::epoch_to_date(start + static_cast<std::int64_t>(i) * 86400);
        bar.close = std::exp(log_price);
        bar.open = bar.close * std::exp(intraday(rng));
        const double hi_off = std::fabs(intraday(rng));
        const double lo_off = std::fabs(intraday(rng));
        bar.high = std::max(bar.open, bar.close) * std::exp(hi_off);
        bar.low = std::min(bar.open, bar.close) * std::exp(-lo_off);
        bar.adj_close = bar.close;
        bar.volume = std::floor(std::exp(vol_u(rng)));
        bars.push_back(bar);
    }
    return bars;
}

} // namespace

SyntheticDataset generate_synthetic_dataset(const SyntheticConfig& config) {
    if (config.n_samples == 0) throw ContractError("generate_synthetic_dataset: n_samples >= 1");
    if (config.max_posts < 4) throw ContractError("generate_synthetic_dataset: max_posts >= 4");

    SyntheticDataset ds;
    ds.seed = config.seed;
    ds.signal_strength = config.signal_strength;
    ds.vocab = text::Vocabulary::from_tokens(vocab_tokens());

    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::uniform_int_distribution<std::uint64_t> high_fans(5000, 50000);
    std::uniform_int_distribution<std::uint64_t> low_fans(0, 20);
    std::uniform_int_distribution<std::uint64_t> count_noise(0, 400);
    std::uniform_real_distribution<double> profit_u(-0.2, 0.2);

    const std::vector<std::string> fillers = filler_tokens();
    const std::vector<std::string> names = {"SYN", "ALPHA", "BETA", "GAMMA"};
    data::NameEmbedder embedder;

    const std::int64_t base_epoch = data::date_to_epoch("2021-01-01");

    auto make_tokens = [&](int motif_dir) {
        const std::size_t len =
            std::max<std::size_t>(6, config.tokens_per_post - (rng() % 4));
        std::vector<int> ids;
        for (std::size_t k = 0; k < len; ++k) {
            std::string tok;
            // roughly half the positions carry the motif when one is planted
            if (motif_dir >= 0 && unif(rng) < 0.5) {
                const auto& motifs = motif_tokens(motif_dir);
                tok = motifs[rng() % motifs.size()];
            } else {
                tok = fillers[rng() % fillers.size()];
            }
            ids.push_back(ds.vocab.id(tok));
        }
        return ids;
    };

    auto make_post = [&](std::int64_t ref_epoch, int motif_dir, bool credible) {
        data::Post post;
        post.stock_id = "SYN";
        post.release_time = ref_epoch - static_cast<std::int64_t>(rng() % (13 * 86400 + 1));
        post.tokens = make_tokens(motif_dir);
        if (motif_dir >= 0) {
            post.poster.fans = credible ? high_fans(rng) : low_fans(rng);
        } else {
            // neutral posts: reputation uncorrelated with anything
            post.poster.fans = (unif(rng) < 0.5) ? high_fans(rng) : low_fans(rng);
        }
        post.poster.followers = count_noise(rng);
        post.poster.posted_texts = count_noise(rng);
        const std::size_t n_concern = 1 + rng() % 3;
        for (std::size_t k = 0; k < n_concern; ++k) {
            post.poster.concerned_stocks.push_back(names[rng() % names.size()]);
        }
        const std::size_t n_profit = rng() % 3;
        for (std::size_t k = 0; k < n_profit; ++k) {
            post.poster.profits[names[rng() % names.size()]] = profit_u(rng);
        }
        post.feedback.likes = count_noise(rng);
        post.feedback.retweets = count_noise(rng);
        post.feedback.replies = count_noise(rng);
        return post;
    };

    for (std::size_t i = 0; i < config.n_samples; ++i) {
        PlantRecord plant;
        plant.sample_index = i;
        plant.label = (unif(rng) < 0.5) ? 1 : 0;
        plant.informative = unif(rng) < config.signal_strength;

        bool text_on = false, price_on = false;
        if (plant.informative) {
            if (config.text_plants && config.price_plants) {
                // coverage mix keeps either single channel well below the
                // union, so fused models have genuine headroom
                const double u = unif(rng);
                if (u < 0.20) {
                    plant.type = 0;
                    text_on = price_on = true;
                } else if (u < 0.65) {
                    plant.type = 1;
                    text_on = true;
                } else {
                    plant.type = 2;
                    price_on = true;
                }
            } else if (config.text_plants) {
                plant.type = 1;
                text_on = true;
            } else if (config.price_plants) {
                plant.type = 2;
                price_on = true;
            } else {
                plant.informative = false;
            }
        }
        plant.text_dir = text_on ? plant.label : -1;
        plant.price_dir = price_on ? plant.label : -1;

        data::Sample sample;
        sample.stock_id = "SYN";
        sample.reference_time = base_epoch + static_cast<std::int64_t>(i) * 86400;
        sample.label = plant.label;
        std::normal_distribution<double> ratio_noise(0.0, 0.01);
        const double extra = std::fabs(ratio_noise(rng));
        sample.movement_ratio = (plant.label == 1) ? 0.0075 + extra : -(0.0075 + extra);

        std::vector<data::Post> posts;
        if (text_on) {
            plant.credible_posts = 2 + rng() % 2;  // 2..3
            plant.noise_posts = 1 + rng() % 2;     // 1..2
            for (std::size_t k = 0; k < plant.credible_posts; ++k) {
                posts.push_back(make_post(sample.reference_time, plant.label, true));
            }
            for (std::size_t k = 0; k < plant.noise_posts; ++k) {
                posts.push_back(make_post(sample.reference_time, 1 - plant.label, false));
            }
        } else {
            const std::size_t n_posts = 3 + rng() % 3; // 3..5 neutral posts
            for (std::size_t k = 0; k < n_posts; ++k) {
                posts.push_back(make_post(sample.reference_time, -1, false));
            }
        }
        std::stable_sort(posts.begin(), posts.end(), [](const auto& a, const auto& b) {
            return a.release_time < b.release_time;
        });
        if (posts.size() > config.max_posts) posts.resize(config.max_posts);

        const double drift = price_on ? (plant.price_dir == 1 ? 0.004 : -0.004) : 0.0;
        const std::vector<data::PriceBar> bars =
            make_bars(sample.reference_time, 64 + 14, 5, drift, rng);
        data::PriceSeries series{"SYN", bars};

        for (data::Post& p : posts) {
            const std::ptrdiff_t end_idx =
                series.index_at_or_before(data::epoch_to_date(p.release_time));
            sample.windows.push_back(data::build_price_window(std::span<const data::PriceBar>(
                series.bars.data(), static_cast<std::size_t>(end_idx) + 1)));
            sample.social.push_back(data::social_vector(p, "SYN", embedder));
            sample.posts.push_back(std::move(p));
        }

        ds.samples.push_back(std::move(sample));
        ds.plants.push_back(plant);
    }
    return ds;
}

int oracle_predict(const PlantRecord& plant) {
    if (!plant.informative) return 1;
    return plant.text_dir >= 0 ? plant.text_dir : plant.price_dir;
}

double manifest_bayes_accuracy(const SyntheticDataset& dataset) {
    if (dataset.plants.empty()) return 0.0;
    std::size_t hits = 0;
    for (const PlantRecord& p : dataset.plants) {
        if (oracle_predict(p) == p.label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(dataset.plants.size());
}

} // namespace mman::synth
