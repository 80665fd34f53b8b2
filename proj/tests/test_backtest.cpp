#include <doctest.h>

#include <random>

#include "mman/backtest.hpp"

using namespace mman;
using namespace mman::backtest;

namespace {

data::PriceBar bar(const std::string& date, double open, double high, double low,
                   double close) {
    data::PriceBar b;
    b.date = date;
    b.open = open;
    b.high = high;
    b.low = low;
    b.close = close;
    b.adj_close = close;
    b.volume = 1000;
    return b;
}

std::vector<data::PriceBar> flat_bars(double price, std::size_t n = 5) {
    std::vector<data::PriceBar> bars;
    const std::int64_t start = data::date_to_epoch("2021-01-04");
    for (std::size_t i = 0; i < n; ++i) {
        bars.push_back(bar(data::epoch_to_date(start + static_cast<std::int64_t>(i) * 86400),
                           price, price, price, price));
    }
    return bars;
}

} // namespace

TEST_CASE("long trade rules") {
    TradePlan plan;
    plan.stock_id = "TST";

    SUBCASE("take profit fires at exactly +2%") {
        auto bars = flat_bars(100.0);
        bars[2].high = 102.5; // day 3 trips the trigger
        const TradeResult t = simulate_long(plan, bars);
        CHECK(t.reason == ExitReason::TakeProfit);
        CHECK(t.exit_price == doctest::Approx(102.0).epsilon(1e-12));
        CHECK(t.exit_date == bars[2].date);
        CHECK(t.profit_cents == 20000); // $200.00
    }
    SUBCASE("flat prices close at zero profit") {
        const TradeResult t = simulate_long(plan, flat_bars(100.0));
        CHECK(t.reason == ExitReason::HorizonClose);
        CHECK(t.profit_cents == 0);
    }
    SUBCASE("horizon close books the loss") {
        auto bars = flat_bars(100.0);
        bars[4] = bar(bars[4].date, 99.5, 99.8, 98.5, 99.0);
        const TradeResult t = simulate_long(plan, bars);
        CHECK(t.reason == ExitReason::HorizonClose);
        CHECK(t.profit_cents == -10000); // -$100.00
    }
    SUBCASE("missing bars are a data error") {
        auto bars = flat_bars(100.0, 3);
        CHECK_THROWS_AS(simulate_long(plan, bars), DataError);
    }
}

TEST_CASE("short trade rules") {
    TradePlan plan;
    plan.stock_id = "TST";
    plan.direction = Direction::Short;

    SUBCASE("cover fires at exactly -1%") {
        auto bars = flat_bars(100.0);
        bars[1].low = 98.5; // day 2
        const TradeResult t = simulate_short(plan, bars);
        CHECK(t.reason == ExitReason::Cover);
        CHECK(t.exit_price == doctest::Approx(99.0).epsilon(1e-12));
        CHECK(t.profit_cents == 10000); // $100.00
    }
    SUBCASE("flat prices cover at zero") {
        CHECK(simulate_short(plan, flat_bars(100.0)).profit_cents == 0);
    }
    SUBCASE("rising prices cost the short seller") {
        auto bars = flat_bars(100.0);
        for (std::size_t i = 1; i < bars.size(); ++i) {
            bars[i] = bar(bars[i].date, 101, 104, 100.5, 103);
        }
        const TradeResult t = simulate_short(plan, bars);
        CHECK(t.reason == ExitReason::HorizonClose);
        CHECK(t.profit_cents == -30000); // -$300.00
    }
}

TEST_CASE("trigger exits pay exactly their percentage at any entry price") {
    std::mt19937_64 rng(8);
    for (int iter = 0; iter < 500; ++iter) {
        const double entry = 1.0 + static_cast<double>(rng() % 100000) / 123.0;
        auto bars = flat_bars(entry);
        bars[0].high = entry * 1.05;
        bars[0].low = entry * 0.95;
        TradePlan plan;
        plan.stock_id = "X";
        const TradeResult lt = simulate_long(plan, bars);
        CHECK(lt.profit_cents == 20000);
        plan.direction = Direction::Short;
        const TradeResult st = simulate_short(plan, bars);
        CHECK(st.profit_cents == 10000);
    }
}

TEST_CASE("long and short mirror each other at horizon close") {
    std::mt19937_64 rng(9);
    for (int iter = 0; iter < 200; ++iter) {
        const double entry = 50.0 + static_cast<double>(rng() % 10000) / 100.0;
        // drift small enough that neither trigger fires
        const double end = entry * (1.0 + (static_cast<double>(rng() % 100) - 50.0) / 10000.0);
        auto bars = flat_bars(entry);
        for (auto& b : bars) {
            b.open = b.high = b.low = b.close = entry;
        }
        bars[4].close = end;
        bars[4].high = std::max(entry, end);
        bars[4].low = std::min(entry, end);
        TradePlan plan;
        plan.stock_id = "X";
        const TradeResult lt = simulate_long(plan, bars);
        plan.direction = Direction::Short;
        const TradeResult st = simulate_short(plan, bars);
        CHECK(lt.profit_cents == -st.profit_cents);
    }
}

TEST_CASE("backtest aggregation") {
    // series: prediction on 01-04, entry on 01-05
    data::PriceSeries series;
    series.stock_id = "AAA";
    series.bars = flat_bars(100.0, 8);
    series.bars[3].high = 103.0; // entry day+2 (01-07) trips +2%
    std::map<std::string, data::PriceSeries> prices = {{"AAA", series}};

    SUBCASE("single long trade rolls up into its industry") {
        std::vector<Prediction> preds = {{"2021-01-04", "AAA", Direction::Long, 0.9}};
        std::map<std::string, std::string> industries = {{"AAA", "Medicine"}};
        const BacktestResult r = run_backtest(preds, prices, industries);
        REQUIRE(r.trades.size() == 1);
        CHECK(r.trades[0].entry_date == "2021-01-05");
        CHECK(r.trades[0].profit_cents == 20000);
        REQUIRE(r.industries.size() == 1);
        CHECK(r.industries[0].industry == "Medicine");
        CHECK(r.industries[0].strategy_cents == 20000);
        CHECK(r.industries[0].trades == 1);
    }
    SUBCASE("missing industry map buckets into Other") {
        std::vector<Prediction> preds = {{"2021-01-04", "AAA", Direction::Long, 0.9}};
        const BacktestResult r = run_backtest(preds, prices, {});
        REQUIRE(r.industries.size() == 1);
        CHECK(r.industries[0].industry == "Other");
    }
    SUBCASE("empty predictions produce an empty report") {
        const BacktestResult r = run_backtest({}, prices, {});
        CHECK(r.trades.empty());
        CHECK(r.industries.empty());
        CHECK(r.skipped == 0);
    }
    SUBCASE("unknown stock or missing bars are skipped and counted") {
        std::vector<Prediction> preds = {{"2021-01-04", "ZZZ", Direction::Long, 0.5},
                                         {"2021-01-09", "AAA", Direction::Long, 0.5}};
        const BacktestResult r = run_backtest(preds, prices, {});
        CHECK(r.trades.empty());
        CHECK(r.skipped == 2);
    }
    SUBCASE("totals equal the sum of per-trade profits to the cent") {
        std::vector<Prediction> preds = {{"2021-01-04", "AAA", Direction::Long, 0.9},
                                         {"2021-01-04", "AAA", Direction::Short, 0.4}};
        const BacktestResult r = run_backtest(preds, prices, {});
        std::int64_t total = 0;
        for (const auto& t : r.trades) total += t.profit_cents;
        std::int64_t report_total = 0;
        for (const auto& rep : r.industries) report_total += rep.strategy_cents;
        CHECK(total == report_total);
    }
}

TEST_CASE("perfect predictions beat the market on monotone prices") {
    // AAA rises steadily, BBB falls steadily; predictions match the truth
    std::map<std::string, data::PriceSeries> prices;
    const std::int64_t start = data::date_to_epoch("2021-01-04");
    for (const auto& [stock, slope] :
         std::vector<std::pair<std::string, double>>{{"AAA", 0.004}, {"BBB", -0.004}}) {
        data::PriceSeries s;
        s.stock_id = stock;
        double price = 100.0;
        for (int i = 0; i < 10; ++i) {
            price *= 1.0 + slope;
            s.bars.push_back(bar(data::epoch_to_date(start + i * 86400), price,
                                 price * 1.001, price * 0.999, price));
        }
        prices[stock] = s;
    }
    std::vector<Prediction> preds = {{"2021-01-04", "AAA", Direction::Long, 1.0},
                                     {"2021-01-04", "BBB", Direction::Short, 1.0}};
    std::map<std::string, std::string> industries = {{"AAA", "Tech"}, {"BBB", "Tech"}};
    const BacktestResult r = run_backtest(preds, prices, industries);
    REQUIRE(r.industries.size() == 1);
    CHECK(r.industries[0].strategy_cents >= r.industries[0].market_cents);
    CHECK(r.industries[0].strategy_cents > 0);
}
