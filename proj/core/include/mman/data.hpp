#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mman/common.hpp"

namespace mman::data {

// ---- calendar helpers (UTC) ----
std::int64_t date_to_epoch(const std::string& iso_date); // yyyy-mm-dd -> 00:00 UTC
std::string epoch_to_date(std::int64_t epoch_seconds);

struct PosterProfile {
    std::uint64_t fans = 0;
    std::uint64_t followers = 0;
    std::uint64_t posted_texts = 0;
    std::vector<std::string> concerned_stocks;
    std::map<std::string, double> profits; // stock -> fractional return
};

struct Feedback {
    std::uint64_t likes = 0;
    std::uint64_t retweets = 0;
    std::uint64_t replies = 0;
};

struct Post {
    std::string stock_id;
    std::int64_t release_time = 0;  // epoch seconds
    std::vector<int> tokens;        // token ids, unpadded
    PosterProfile poster;
    Feedback feedback;
};

struct PriceBar {
    std::string date; // yyyy-mm-dd
    double open = 0, high = 0, low = 0, close = 0, adj_close = 0;
    double volume = 0;
};

// Throws DataError unless low <= min(open, close) <= max(open, close) <= high
// and volume >= 0.
void validate_bar(const PriceBar& bar);

// 64 trading days x 7 channels, normalized. Channel order:
// open, close, high, low, volume, high-low, open-close.
struct PriceWindow {
    static constexpr std::size_t kDays = 64;
    static constexpr std::size_t kChannels = 7;
    std::array<double, kDays * kChannels> values{}; // day-major

    double at(std::size_t day, std::size_t channel) const {
        return values[day * kChannels + channel];
    }
};

// Price channels and both spreads divide by the final raw close; volume is
// log1p then z-scored within the window. Uses the last 64 bars of `bars`.
PriceWindow build_price_window(std::span<const PriceBar> bars);

enum class Movement { Rise, Fall, Dropped };

struct LabelResult {
    Movement movement = Movement::Dropped;
    double ratio = 0.0;
};

// ratio = (mean(future_closes) - p_t) / p_t; Rise when ratio >= theta, Fall
// when ratio <= -theta, Dropped inside the dead zone. Thresholds are closed
// on the action side.
LabelResult movement_label(double p_t, const std::vector<double>& future_closes,
                           double theta = 0.0075);

// Deterministic per-name unit vectors for stock-name similarity.
class NameEmbedder {
public:
    explicit NameEmbedder(std::uint64_t seed = 0x6d6d616eULL, std::size_t dim = 16);
    std::vector<double> vec(const std::string& name) const;
    std::size_t dim() const { return dim_; }

private:
    std::uint64_t seed_;
    std::size_t dim_;
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Max cosine against the target name, affinely mapped from [-1,1] to [0,1];
// an empty list scores 0 and the target itself scores exactly 1.
double stock_similarity(const std::vector<std::string>& concerned_stocks,
                        const std::string& target, const NameEmbedder& embedder);

inline constexpr std::size_t kSocialDim = 12;
using SocialVector = std::array<double, kSocialDim>;

// [log1p(fans), log1p(followers), log1p(posted), log1p(#concerned),
//  log1p(likes), log1p(retweets), log1p(replies), similarity,
//  profit_mean, profit_max, profit_min, profit_on_target]
SocialVector social_vector(const Post& post, const std::string& target,
                           const NameEmbedder& embedder);

struct Sample {
    std::string stock_id;
    std::int64_t reference_time = 0;
    int label = 0; // 1 = Rise, 0 = Fall
    double movement_ratio = 0.0;
    std::vector<Post> posts;               // ascending release_time
    std::vector<PriceWindow> windows;      // aligned per post
    std::vector<SocialVector> social;      // aligned per post
};

struct PriceSeries {
    std::string stock_id;
    std::vector<PriceBar> bars; // ascending dates
    // index of the last bar with date <= `date`, or -1
    std::ptrdiff_t index_at_or_before(const std::string& date) const;
};

struct AssembleConfig {
    std::size_t max_posts = 96;               // n
    std::int64_t lookback_seconds = 14 * 86400; // l in days
    double theta = 0.0075;
    std::size_t horizon = 5;                  // w, future closes for labeling
};

enum class DropReason {
    None,
    NoPosts,            // nothing inside [t-l+1, t]
    DeadZone,           // |ratio| < theta
    InsufficientHistory,// fewer than 64 bars before some post
    NoReferencePrice,   // no bar at or before t
    NoFutureBars        // fewer than `horizon` bars after t
};

struct AssembleOutcome {
    std::optional<Sample> sample;
    DropReason reason = DropReason::None;
};

// Filters posts to the lookback window, keeps the most recent max_posts,
// builds per-post windows and social vectors, and labels against the
// series. Dead-zone and data-deficient samples are dropped with a reason.
AssembleOutcome assemble_sample(const std::vector<Post>& posts, const PriceSeries& series,
                                const std::string& target, std::int64_t reference_time,
                                const AssembleConfig& config,
                                const NameEmbedder& embedder);

} // namespace mman::data
