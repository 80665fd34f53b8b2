#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mman/backtest.hpp"
#include "mman/data.hpp"
#include "mman/model.hpp"
#include "mman/synthetic.hpp"
#include "mman/textprep.hpp"

namespace mman::io {

// Shortest round-trip decimal form; used everywhere a double reaches a file.
std::string format_double(double v);

// ---- posts and prices ----

struct RawPost {
    std::string stock;
    std::int64_t time = 0;
    std::string text;
    data::PosterProfile poster;
    data::Feedback feedback;
};

// JSON-lines, one post per line with fields:
// {"stock","time","text","fans","followers","posted","concerned":[...],
//  "profits":{name:ratio},"likes","retweets","replies"}.
// Malformed lines raise DataError naming the line number.
std::vector<RawPost> load_posts_jsonl(const std::string& path);

// CSV with header date,open,high,low,close,adj_close,volume, ISO dates,
// ascending; bars are validated on load.
data::PriceSeries load_price_csv(const std::string& path, const std::string& stock_id);

// Loads every <stock>.csv in the directory.
std::map<std::string, data::PriceSeries> load_price_dir(const std::string& dir);

// ---- checkpoints ----

// Versioned little-endian binary: path, decay flag, shape, f64 payload per
// parameter. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const model::ModelParams& params);
model::ModelParams load_checkpoint(const std::string& path);

// ---- dataset archives ----

// Directory layout: manifest.json, vocab.txt, samples.jsonl and a binary
// blob of price windows referenced by index from the sample lines.
void save_archive(const std::string& dir, const std::vector<data::Sample>& samples,
                  const text::Vocabulary& vocab,
                  const std::map<std::string, std::string>& manifest_extra = {});

struct Archive {
    std::vector<data::Sample> samples;
    text::Vocabulary vocab;
    std::map<std::string, std::string> manifest_extra;
};

Archive load_archive(const std::string& dir);

// Synthetic plant manifest (JSON) with seed, per-sample plants and the
// oracle prediction per sample.
void save_plant_manifest(const std::string& path, const synth::SyntheticDataset& dataset);

// ---- embeddings import hook ----

// One line per token: token v1 v2 ... vd. Rows for tokens present in the
// vocabulary overwrite the embedding table in place; returns rows applied.
std::size_t apply_embedding_file(const std::string& path, const text::Vocabulary& vocab,
                                 model::ModelParams& params);

// ---- backtest files ----

// CSV header: date,stock,direction,confidence
std::vector<backtest::Prediction> load_predictions_csv(const std::string& path);
// CSV header: stock,industry
std::map<std::string, std::string> load_industry_csv(const std::string& path);
void save_trade_log_csv(const std::string& path,
                        const std::vector<backtest::TradeResult>& trades);
// aligned text table: Industry, Market, Strategy
std::string render_industry_report(const std::vector<backtest::IndustryReport>& reports);

// ---- metrics ----

struct MetricRow {
    std::size_t epoch = 0;
    std::string split;
    double loss = 0, accuracy = 0, mcc = 0;
};
void save_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);

struct AblationLine {
    std::string variant;
    double accuracy = 0, mcc = 0;
};
void save_ablation_csv(const std::string& path, const std::vector<AblationLine>& rows);
std::string render_ablation_table(const std::vector<AblationLine>& rows);

} // namespace mman::io
