#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mman/data.hpp"

namespace mman::backtest {

enum class Direction { Long, Short };
enum class ExitReason { TakeProfit, Cover, HorizonClose };

std::string direction_name(Direction d);
Direction direction_from_name(const std::string& name);
std::string exit_reason_name(ExitReason r);

inline constexpr double kNotional = 10000.0;
inline constexpr double kLongTakeProfit = 1.02;  // sell at +2%
inline constexpr double kShortCover = 0.99;      // cover at -1%
inline constexpr std::size_t kHorizonDays = 5;

struct TradePlan {
    std::string stock_id;
    Direction direction = Direction::Long;
    std::size_t horizon = kHorizonDays;
    double notional = kNotional;
};

struct TradeResult {
    std::string stock_id;
    Direction direction = Direction::Long;
    std::string entry_date;
    std::string exit_date;
    double entry_price = 0.0;
    double exit_price = 0.0;
    ExitReason reason = ExitReason::HorizonClose;
    std::int64_t profit_cents = 0;

    double profit() const { return static_cast<double>(profit_cents) / 100.0; }
};

// bars[0] is the entry day; entry fills at its open. The first day whose
// high reaches +2% exits at exactly the trigger price, otherwise the last
// day's close. Requires `horizon` bars.
TradeResult simulate_long(const TradePlan& plan, std::span<const data::PriceBar> bars);

// Short at bars[0].open; covers at exactly -1% on the first day whose low
// reaches it, otherwise buys back at the last close.
TradeResult simulate_short(const TradePlan& plan, std::span<const data::PriceBar> bars);

struct Prediction {
    std::string date;  // prediction date; the trade enters the next trading day
    std::string stock;
    Direction direction = Direction::Long;
    double confidence = 0.0;
};

struct IndustryReport {
    std::string industry;
    std::int64_t strategy_cents = 0;
    std::int64_t market_cents = 0;
    std::size_t trades = 0;
};

struct BacktestResult {
    std::vector<TradeResult> trades;
    std::vector<IndustryReport> industries; // sorted by industry name
    std::size_t skipped = 0;                // predictions without enough bars
};

// One trade per prediction, Rise -> Long and Fall -> Short. The market
// baseline per industry is the mean close-to-close notional profit of its
// traded stocks over the window spanned by all trades.
BacktestResult run_backtest(const std::vector<Prediction>& predictions,
                            const std::map<std::string, data::PriceSeries>& prices,
                            const std::map<std::string, std::string>& industry_map);

} // namespace mman::backtest
