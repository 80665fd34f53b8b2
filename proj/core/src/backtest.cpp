#include "mman/backtest.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace mman::backtest {

std::string direction_name(Direction d) { return d == Direction::Long ? "long" : "short"; }

Direction direction_from_name(const std::string& name) {
    if (name == "long" || name == "rise" || name == "1") return Direction::Long;
    if (name == "short" || name == "fall" || name == "0") return Direction::Short;
    throw DataError("unknown trade direction: '" + name + "'");
}

std::string exit_reason_name(ExitReason r) {
    switch (r) {
        case ExitReason::TakeProfit: return "take_profit";
        case ExitReason::Cover: return "cover";
        case ExitReason::HorizonClose: return "horizon_close";
    }
    return "horizon_close";
}

namespace {

std::int64_t to_cents(double dollars) { return std::llround(dollars * 100.0); }

void require_bars(const TradePlan& plan, std::span<const data::PriceBar> bars) {
    if (bars.size() < plan.horizon) {
        throw DataError("trade on " + plan.stock_id + ": need " + std::to_string(plan.horizon) +
                        " bars, got " + std::to_string(bars.size()));
    }
    if (bars[0].open <= 0) throw DataError("trade on " + plan.stock_id + ": nonpositive open");
}

} // namespace

TradeResult simulate_long(const TradePlan& plan, std::span<const data::PriceBar> bars) {
    require_bars(plan, bars);
    TradeResult result;
    result.stock_id = plan.stock_id;
    result.direction = Direction::Long;
    result.entry_date = bars[0].date;
    result.entry_price = bars[0].open;

    const double target = kLongTakeProfit * result.entry_price;
    result.reason = ExitReason::HorizonClose;
    result.exit_date = bars[plan.horizon - 1].date;
    result.exit_price = bars[plan.horizon - 1].close;
    for (std::size_t day = 0; day < plan.horizon; ++day) {
        if (bars[day].high >= target) {
            result.reason = ExitReason::TakeProfit;
            result.exit_date = bars[day].date;
            result.exit_price = target;
            break;
        }
    }
    result.profit_cents = to_cents(plan.notional * (result.exit_price / result.entry_price - 1.0));
    return result;
}

TradeResult simulate_short(const TradePlan& plan, std::span<const data::PriceBar> bars) {
    require_bars(plan, bars);
    TradeResult result;
    result.stock_id = plan.stock_id;
    result.direction = Direction::Short;
    result.entry_date = bars[0].date;
    result.entry_price = bars[0].open;

    const double target = kShortCover * result.entry_price;
    result.reason = ExitReason::HorizonClose;
    result.exit_date = bars[plan.horizon - 1].date;
    result.exit_price = bars[plan.horizon - 1].close;
    for (std::size_t day = 0; day < plan.horizon; ++day) {
        if (bars[day].low <= target) {
            result.reason = ExitReason::Cover;
            result.exit_date = bars[day].date;
            result.exit_price = target;
            break;
        }
    }
    result.profit_cents = to_cents(plan.notional * (1.0 - result.exit_price / result.entry_price));
    return result;
}

BacktestResult run_backtest(const std::vector<Prediction>& predictions,
                            const std::map<std::string, data::PriceSeries>& prices,
                            const std::map<std::string, std::string>& industry_map) {
    BacktestResult result;
    std::string window_start, window_end;

    for (const Prediction& pred : predictions) {
        const auto it = prices.find(pred.stock);
        if (it == prices.end()) {
            ++result.skipped;
            continue;
        }
        const data::PriceSeries& series = it->second;
        // enter on the first trading day strictly after the prediction date
        const std::ptrdiff_t at = series.index_at_or_before(pred.date);
        std::size_t entry_idx = static_cast<std::size_t>(at + 1);
        while (entry_idx < series.bars.size() && series.bars[entry_idx].date <= pred.date) {
            ++entry_idx;
        }
        if (entry_idx + kHorizonDays > series.bars.size()) {
            ++result.skipped;
            continue;
        }
        const std::span<const data::PriceBar> bars(series.bars.data() + entry_idx, kHorizonDays);
        TradePlan plan;
        plan.stock_id = pred.stock;
        plan.direction = pred.direction;
        const TradeResult trade = pred.direction == Direction::Long
                                      ? simulate_long(plan, bars)
                                      : simulate_short(plan, bars);
        if (window_start.empty() || trade.entry_date < window_start) {
            window_start = trade.entry_date;
        }
        const std::string& horizon_end = bars[kHorizonDays - 1].date;
        if (window_end.empty() || horizon_end > window_end) window_end = horizon_end;
        result.trades.push_back(trade);
    }

    // aggregate per industry, stocks in deterministic order
    std::map<std::string, std::set<std::string>> industry_stocks;
    std::map<std::string, IndustryReport> reports;
    for (const TradeResult& t : result.trades) {
        const auto it = industry_map.find(t.stock_id);
        const std::string industry = it == industry_map.end() ? "Other" : it->second;
        IndustryReport& rep = reports[industry];
        rep.industry = industry;
        rep.strategy_cents += t.profit_cents;
        rep.trades += 1;
        industry_stocks[industry].insert(t.stock_id);
    }

    // market baseline: close-to-close over [window_start, window_end]
    for (auto& [industry, rep] : reports) {
        std::int64_t total_cents = 0;
        std::size_t counted = 0;
        for (const std::string& stock : industry_stocks[industry]) {
            const data::PriceSeries& series = prices.at(stock);
            const data::PriceBar* first = nullptr;
            const data::PriceBar* last = nullptr;
            for (const data::PriceBar& b : series.bars) {
                if (b.date < window_start || b.date > window_end) continue;
                if (!first) first = &b;
                last = &b;
            }
            if (!first || !last || first == last || first->close <= 0) continue;
            total_cents += to_cents(kNotional * (last->close / first->close - 1.0));
            ++counted;
        }
        rep.market_cents =
            counted ? std::llround(static_cast<double>(total_cents) / counted) : 0;
    }

    for (auto& [name, rep] : reports) {
        (void)name;
        result.industries.push_back(rep);
    }
    return result;
}

} // namespace mman::backtest
