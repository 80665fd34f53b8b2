#include "mman/data.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace mman::data {

namespace {

// Howard Hinnant's civil calendar algorithms.
std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, int& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y = static_cast<int>(yy + (m <= 2));
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

} // namespace

std::int64_t date_to_epoch(const std::string& iso_date) {
    if (iso_date.size() != 10 || iso_date[4] != '-' || iso_date[7] != '-') {
        throw DataError("bad ISO date: '" + iso_date + "'");
    }
    int y = 0;
    unsigned m = 0, d = 0;
    try {
        y = std::stoi(iso_date.substr(0, 4));
        m = static_cast<unsigned>(std::stoi(iso_date.substr(5, 2)));
        d = static_cast<unsigned>(std::stoi(iso_date.substr(8, 2)));
    } catch (const std::exception&) {
        throw DataError("bad ISO date: '" + iso_date + "'");
    }
    if (m < 1 || m > 12 || d < 1 || d > 31) throw DataError("bad ISO date: '" + iso_date + "'");
    return days_from_civil(y, m, d) * 86400;
}

std::string epoch_to_date(std::int64_t epoch_seconds) {
    std::int64_t days = epoch_seconds / 86400;
    if (epoch_seconds < 0 && epoch_seconds % 86400 != 0) --days;
    int y;
    unsigned m, d;
    civil_from_days(days, y, m, d);
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", y, m, d);
    return buf;
}

void validate_bar(const PriceBar& bar) {
    const double lo = std::min(bar.open, bar.close);
    const double hi = std::max(bar.open, bar.close);
    if (!(bar.low <= lo && hi <= bar.high)) {
        throw DataError("bar " + bar.date + ": OHLC ordering violated");
    }
    if (bar.volume < 0) throw DataError("bar " + bar.date + ": negative volume");
}

PriceWindow build_price_window(std::span<const PriceBar> bars) {
    if (bars.size() < PriceWindow::kDays) {
        throw DataError("price window needs 64 bars, got " + std::to_string(bars.size()));
    }
    const std::span<const PriceBar> window = bars.subspan(bars.size() - PriceWindow::kDays);
    const double last_close = window.back().close;
    if (last_close <= 0) throw DataError("price window: nonpositive final close");

    PriceWindow out;
    double log_vol[PriceWindow::kDays];
    double mean = 0.0;
    for (std::size_t i = 0; i < PriceWindow::kDays; ++i) {
        log_vol[i] = std::log1p(window[i].volume);
        mean += log_vol[i];
    }
    mean /= PriceWindow::kDays;
    double var = 0.0;
    for (double v : log_vol) var += (v - mean) * (v - mean);
    var /= PriceWindow::kDays;
    const double sd = std::sqrt(var);

    for (std::size_t i = 0; i < PriceWindow::kDays; ++i) {
        const PriceBar& b = window[i];
        double* row = out.values.data() + i * PriceWindow::kChannels;
        row[0] = b.open / last_close;
        row[1] = b.close / last_close;
        row[2] = b.high / last_close;
        row[3] = b.low / last_close;
        row[4] = sd > 0 ? (log_vol[i] - mean) / sd : 0.0;
        row[5] = (b.high - b.low) / last_close;
        row[6] = (b.open - b.close) / last_close;
    }
    return out;
}

LabelResult movement_label(double p_t, const std::vector<double>& future_closes, double theta) {
    if (p_t <= 0) throw ContractError("movement_label: nonpositive reference price");
    if (future_closes.size() != 5) {
        throw ContractError("movement_label: expected 5 future closes, got " +
                            std::to_string(future_closes.size()));
    }
    double mean = 0.0;
    for (double c : future_closes) mean += c;
    mean /= static_cast<double>(future_closes.size());
    LabelResult r;
    r.ratio = (mean - p_t) / p_t;
    if (r.ratio >= theta) {
        r.movement = Movement::Rise;
    } else if (r.ratio <= -theta) {
        r.movement = Movement::Fall;
    } else {
        r.movement = Movement::Dropped;
    }
    return r;
}

NameEmbedder::NameEmbedder(std::uint64_t seed, std::size_t dim) : seed_(seed), dim_(dim) {}

std::vector<double> NameEmbedder::vec(const std::string& name) const {
    std::mt19937_64 rng(seed_ ^ fnv1a(name));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(dim_);
    double norm_sq = 0.0;
    for (double& x : v) {
        x = normal(rng);
        norm_sq += x * x;
    }
    const double inv = norm_sq > 0 ? 1.0 / std::sqrt(norm_sq) : 0.0;
    for (double& x : v) x *= inv;
    return v;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) {
        throw ContractError("cosine_similarity: length mismatch");
    }
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

double stock_similarity(const std::vector<std::string>& concerned_stocks,
                        const std::string& target, const NameEmbedder& embedder) {
    if (concerned_stocks.empty()) return 0.0;
    const std::vector<double> tv = embedder.vec(target);
    double best = -1.0;
    for (const std::string& name : concerned_stocks) {
        if (name == target) return 1.0; // identical vectors
        const std::vector<double> nv = embedder.vec(name);
        best = std::max(best, cosine_similarity(nv, tv));
    }
    return (best + 1.0) / 2.0;
}

SocialVector social_vector(const Post& post, const std::string& target,
                           const NameEmbedder& embedder) {
    SocialVector v{};
    const PosterProfile& p = post.poster;
    v[0] = std::log1p(static_cast<double>(p.fans));
    v[1] = std::log1p(static_cast<double>(p.followers));
    v[2] = std::log1p(static_cast<double>(p.posted_texts));
    v[3] = std::log1p(static_cast<double>(p.concerned_stocks.size()));
    v[4] = std::log1p(static_cast<double>(post.feedback.likes));
    v[5] = std::log1p(static_cast<double>(post.feedback.retweets));
    v[6] = std::log1p(static_cast<double>(post.feedback.replies));
    v[7] = stock_similarity(p.concerned_stocks, target, embedder);
    if (!p.profits.empty()) {
        double sum = 0, mx = p.profits.begin()->second, mn = mx;
        for (const auto& [name, profit] : p.profits) {
            (void)name;
            sum += profit;
            mx = std::max(mx, profit);
            mn = std::min(mn, profit);
        }
        v[8] = sum / static_cast<double>(p.profits.size());
        v[9] = mx;
        v[10] = mn;
    }
    const auto it = p.profits.find(target);
    v[11] = it == p.profits.end() ? 0.0 : it->second;
    return v;
}

std::ptrdiff_t PriceSeries::index_at_or_before(const std::string& date) const {
    auto it = std::upper_bound(bars.begin(), bars.end(), date,
                               [](const std::string& d, const PriceBar& b) { return d < b.date; });
    return static_cast<std::ptrdiff_t>(it - bars.begin()) - 1;
}

AssembleOutcome assemble_sample(const std::vector<Post>& posts, const PriceSeries& series,
                                const std::string& target, std::int64_t reference_time,
                                const AssembleConfig& config,
                                const NameEmbedder& embedder) {
    AssembleOutcome out;

    std::vector<Post> window_posts;
    for (const Post& p : posts) {
        if (p.release_time <= reference_time &&
            p.release_time > reference_time - config.lookback_seconds) {
            window_posts.push_back(p);
        }
    }
    if (window_posts.empty()) {
        out.reason = DropReason::NoPosts;
        return out;
    }
    std::stable_sort(window_posts.begin(), window_posts.end(),
                     [](const Post& a, const Post& b) { return a.release_time < b.release_time; });
    if (window_posts.size() > config.max_posts) {
        window_posts.erase(window_posts.begin(),
                           window_posts.end() - static_cast<std::ptrdiff_t>(config.max_posts));
    }

    // labeling against the series
    const std::ptrdiff_t ref_idx = series.index_at_or_before(epoch_to_date(reference_time));
    if (ref_idx < 0) {
        out.reason = DropReason::NoReferencePrice;
        return out;
    }
    if (static_cast<std::size_t>(ref_idx) + config.horizon >= series.bars.size()) {
        out.reason = DropReason::NoFutureBars;
        return out;
    }
    std::vector<double> futures;
    for (std::size_t k = 1; k <= config.horizon; ++k) {
        futures.push_back(series.bars[static_cast<std::size_t>(ref_idx) + k].adj_close);
    }
    const LabelResult label =
        movement_label(series.bars[static_cast<std::size_t>(ref_idx)].adj_close, futures,
                       config.theta);
    if (label.movement == Movement::Dropped) {
        out.reason = DropReason::DeadZone;
        return out;
    }

    Sample sample;
    sample.stock_id = target;
    sample.reference_time = reference_time;
    sample.label = label.movement == Movement::Rise ? 1 : 0;
    sample.movement_ratio = label.ratio;
    for (Post& p : window_posts) {
        const std::ptrdiff_t end_idx = series.index_at_or_before(epoch_to_date(p.release_time));
        if (end_idx + 1 < static_cast<std::ptrdiff_t>(PriceWindow::kDays)) {
            out.reason = DropReason::InsufficientHistory;
            return out;
        }
        sample.windows.push_back(build_price_window(
            std::span<const PriceBar>(series.bars.data(), static_cast<std::size_t>(end_idx) + 1)));
        sample.social.push_back(social_vector(p, target, embedder));
        sample.posts.push_back(std::move(p));
    }
    out.sample = std::move(sample);
    return out;
}

} // namespace mman::data
