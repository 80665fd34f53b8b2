#include "mman/io.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace mman::io {

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

// ---- posts ----

std::vector<RawPost> load_posts_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open posts file: " + path);
    std::vector<RawPost> posts;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": bad JSON: " + e.what());
        }
        try {
            RawPost p;
            p.stock = j.at("stock").get<std::string>();
            p.time = j.at("time").get<std::int64_t>();
            p.text = j.at("text").get<std::string>();
            p.poster.fans = j.at("fans").get<std::uint64_t>();
            p.poster.followers = j.at("followers").get<std::uint64_t>();
            p.poster.posted_texts = j.at("posted").get<std::uint64_t>();
            p.poster.concerned_stocks = j.at("concerned").get<std::vector<std::string>>();
            for (const auto& [name, ratio] : j.at("profits").items()) {
                p.poster.profits[name] = ratio.get<double>();
            }
            p.feedback.likes = j.at("likes").get<std::uint64_t>();
            p.feedback.retweets = j.at("retweets").get<std::uint64_t>();
            p.feedback.replies = j.at("replies").get<std::uint64_t>();
            posts.push_back(std::move(p));
        } catch (const json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return posts;
}

// ---- prices ----

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

double parse_double_field(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError(where + ": bad number '" + s + "'");
    }
}

std::string strip_cr(std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.pop_back();
    return s;
}

} // namespace

data::PriceSeries load_price_csv(const std::string& path, const std::string& stock_id) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open price file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    if (strip_cr(line) != "date,open,high,low,close,adj_close,volume") {
        throw DataError(path + ":1: bad header '" + line + "'");
    }
    data::PriceSeries series;
    series.stock_id = stock_id;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = strip_cr(line);
        if (line.empty()) continue;
        const std::vector<std::string> f = split_csv_line(line);
        const std::string where = path + ":" + std::to_string(line_no);
        if (f.size() != 7) throw DataError(where + ": expected 7 fields, got " +
                                           std::to_string(f.size()));
        data::PriceBar bar;
        bar.date = f[0];
        data::date_to_epoch(bar.date); // validates the format
        bar.open = parse_double_field(f[1], where);
        bar.high = parse_double_field(f[2], where);
        bar.low = parse_double_field(f[3], where);
        bar.close = parse_double_field(f[4], where);
        bar.adj_close = parse_double_field(f[5], where);
        bar.volume = parse_double_field(f[6], where);
        data::validate_bar(bar);
        if (!series.bars.empty() && bar.date <= series.bars.back().date) {
            throw DataError(where + ": dates not strictly ascending");
        }
        series.bars.push_back(std::move(bar));
    }
    return series;
}

std::map<std::string, data::PriceSeries> load_price_dir(const std::string& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
    std::map<std::string, data::PriceSeries> out;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() == ".csv") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const fs::path& p : files) {
        const std::string stock = p.stem().string();
        out[stock] = load_price_csv(p.string(), stock);
    }
    return out;
}

// ---- checkpoints ----

namespace {

constexpr char kCkptMagic[8] = {'M', 'M', 'A', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
        throw DataError("truncated checkpoint: " + path);
    }
    return v;
}

} // namespace

void save_checkpoint(const std::string& path, const model::ModelParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write(kCkptMagic, sizeof(kCkptMagic));
    write_pod(out, kCkptVersion);
    write_pod(out, static_cast<std::uint64_t>(params.entries().size()));
    for (const auto& e : params.entries()) {
        write_pod(out, static_cast<std::uint32_t>(e.path.size()));
        out.write(e.path.data(), static_cast<std::streamsize>(e.path.size()));
        write_pod(out, static_cast<std::uint8_t>(e.decay ? 1 : 0));
        write_pod(out, static_cast<std::uint32_t>(e.tensor.rank()));
        for (std::size_t d : e.tensor.shape()) write_pod(out, static_cast<std::uint64_t>(d));
        out.write(reinterpret_cast<const char*>(e.tensor.values().data()),
                  static_cast<std::streamsize>(e.tensor.numel() * sizeof(double)));
    }
    if (!out) throw DataError("failed writing checkpoint: " + path);
}

model::ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCkptMagic, 8) != 0) {
        throw DataError("not a checkpoint file: " + path);
    }
    const auto version = read_pod<std::uint32_t>(in, path);
    if (version != kCkptVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = read_pod<std::uint64_t>(in, path);
    std::vector<model::ParamEntry> entries;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto path_len = read_pod<std::uint32_t>(in, path);
        std::string ppath(path_len, '\0');
        if (!in.read(ppath.data(), path_len)) throw DataError("truncated checkpoint: " + path);
        const auto decay = read_pod<std::uint8_t>(in, path);
        const auto rank = read_pod<std::uint32_t>(in, path);
        Shape shape;
        for (std::uint32_t r = 0; r < rank; ++r) {
            shape.push_back(static_cast<std::size_t>(read_pod<std::uint64_t>(in, path)));
        }
        std::vector<double> values(shape_numel(shape));
        if (!in.read(reinterpret_cast<char*>(values.data()),
                     static_cast<std::streamsize>(values.size() * sizeof(double)))) {
            throw DataError("truncated checkpoint: " + path);
        }
        entries.push_back({std::move(ppath),
                           Tensor::from_data(std::move(shape), std::move(values), true),
                           decay != 0});
    }
    return model::make_params_for_io(std::move(entries));
}

// ---- archives ----

void save_archive(const std::string& dir, const std::vector<data::Sample>& samples,
                  const text::Vocabulary& vocab,
                  const std::map<std::string, std::string>& manifest_extra) {
    fs::create_directories(dir);
    vocab.save_file((fs::path(dir) / "vocab.txt").string());

    std::ofstream windows((fs::path(dir) / "windows.bin").string(), std::ios::binary);
    std::ofstream lines((fs::path(dir) / "samples.jsonl").string());
    if (!windows || !lines) throw DataError("cannot write archive into " + dir);

    std::size_t window_index = 0;
    for (const data::Sample& s : samples) {
        json j;
        j["stock"] = s.stock_id;
        j["t"] = s.reference_time;
        j["label"] = s.label;
        j["ratio"] = s.movement_ratio;
        json posts = json::array();
        for (std::size_t i = 0; i < s.posts.size(); ++i) {
            json p;
            p["time"] = s.posts[i].release_time;
            p["tokens"] = s.posts[i].tokens;
            p["social"] = std::vector<double>(s.social[i].begin(), s.social[i].end());
            p["win"] = window_index;
            windows.write(reinterpret_cast<const char*>(s.windows[i].values.data()),
                          sizeof(s.windows[i].values));
            ++window_index;
            posts.push_back(std::move(p));
        }
        j["posts"] = std::move(posts);
        lines << j.dump() << "\n";
    }

    json manifest;
    manifest["format"] = "mman-dataset";
    manifest["version"] = 1;
    manifest["samples"] = samples.size();
    manifest["windows"] = window_index;
    for (const auto& [k, v] : manifest_extra) manifest["extra"][k] = v;
    std::ofstream mf((fs::path(dir) / "manifest.json").string());
    mf << manifest.dump(2) << "\n";
    if (!windows || !lines || !mf) throw DataError("failed writing archive into " + dir);
}

Archive load_archive(const std::string& dir) {
    const fs::path base(dir);
    std::ifstream mf(base / "manifest.json");
    if (!mf) throw DataError("missing archive manifest in " + dir);
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw DataError(dir + "/manifest.json: " + e.what());
    }
    if (manifest.value("format", "") != "mman-dataset") {
        throw DataError(dir + ": not a dataset archive");
    }

    Archive archive;
    archive.vocab = text::Vocabulary::load_file((base / "vocab.txt").string());
    if (manifest.contains("extra")) {
        for (const auto& [k, v] : manifest["extra"].items()) {
            archive.manifest_extra[k] = v.get<std::string>();
        }
    }

    std::ifstream windows(base / "windows.bin", std::ios::binary);
    if (!windows) throw DataError("missing windows.bin in " + dir);
    const std::size_t n_windows = manifest.at("windows").get<std::size_t>();
    std::vector<data::PriceWindow> all_windows(n_windows);
    for (auto& w : all_windows) {
        if (!windows.read(reinterpret_cast<char*>(w.values.data()), sizeof(w.values))) {
            throw DataError("truncated windows.bin in " + dir);
        }
    }

    std::ifstream lines(base / "samples.jsonl");
    if (!lines) throw DataError("missing samples.jsonl in " + dir);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(lines, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(dir + "/samples.jsonl:" + std::to_string(line_no) + ": " + e.what());
        }
        data::Sample s;
        s.stock_id = j.at("stock").get<std::string>();
        s.reference_time = j.at("t").get<std::int64_t>();
        s.label = j.at("label").get<int>();
        s.movement_ratio = j.at("ratio").get<double>();
        for (const auto& pj : j.at("posts")) {
            data::Post p;
            p.stock_id = s.stock_id;
            p.release_time = pj.at("time").get<std::int64_t>();
            p.tokens = pj.at("tokens").get<std::vector<int>>();
            s.posts.push_back(std::move(p));
            const auto sv = pj.at("social").get<std::vector<double>>();
            if (sv.size() != data::kSocialDim) {
                throw DataError(dir + "/samples.jsonl:" + std::to_string(line_no) +
                                ": social vector must have 12 entries");
            }
            data::SocialVector vec{};
            std::copy(sv.begin(), sv.end(), vec.begin());
            s.social.push_back(vec);
            const std::size_t wi = pj.at("win").get<std::size_t>();
            if (wi >= all_windows.size()) {
                throw DataError(dir + "/samples.jsonl:" + std::to_string(line_no) +
                                ": window index out of range");
            }
            s.windows.push_back(all_windows[wi]);
        }
        archive.samples.push_back(std::move(s));
    }
    return archive;
}

void save_plant_manifest(const std::string& path, const synth::SyntheticDataset& dataset) {
    json j;
    j["seed"] = dataset.seed;
    j["signal_strength"] = dataset.signal_strength;
    j["samples"] = dataset.samples.size();
    j["bayes_accuracy"] = synth::manifest_bayes_accuracy(dataset);
    json plants = json::array();
    for (const synth::PlantRecord& p : dataset.plants) {
        json pj;
        pj["i"] = p.sample_index;
        pj["label"] = p.label;
        pj["informative"] = p.informative;
        pj["type"] = p.type;
        pj["text_dir"] = p.text_dir;
        pj["price_dir"] = p.price_dir;
        pj["credible_posts"] = p.credible_posts;
        pj["noise_posts"] = p.noise_posts;
        pj["oracle"] = synth::oracle_predict(p);
        plants.push_back(std::move(pj));
    }
    j["plants"] = std::move(plants);
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

// ---- embeddings hook ----

std::size_t apply_embedding_file(const std::string& path, const text::Vocabulary& vocab,
                                 model::ModelParams& params) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open embeddings file: " + path);
    Tensor table = params.at("embed.table");
    const std::size_t d = table.dim(1);
    std::string line;
    std::size_t applied = 0, line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string token;
        ss >> token;
        std::vector<double> row;
        double v;
        while (ss >> v) row.push_back(v);
        if (row.size() != d) {
            throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(d) + " values, got " + std::to_string(row.size()));
        }
        const int id = vocab.id(token);
        if (id == text::Vocabulary::kUnkId && token != "<unk>") continue;
        std::copy(row.begin(), row.end(),
                  table.values().begin() + static_cast<std::size_t>(id) * d);
        ++applied;
    }
    return applied;
}

// ---- backtest files ----

std::vector<backtest::Prediction> load_predictions_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open predictions file: " + path);
    std::string line;
    if (!std::getline(in, line) || strip_cr(line) != "date,stock,direction,confidence") {
        throw DataError(path + ":1: expected header date,stock,direction,confidence");
    }
    std::vector<backtest::Prediction> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = strip_cr(line);
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        const std::string where = path + ":" + std::to_string(line_no);
        if (f.size() != 4) throw DataError(where + ": expected 4 fields");
        backtest::Prediction p;
        p.date = f[0];
        data::date_to_epoch(p.date);
        p.stock = f[1];
        p.direction = backtest::direction_from_name(f[2]);
        p.confidence = parse_double_field(f[3], where);
        out.push_back(std::move(p));
    }
    return out;
}

std::map<std::string, std::string> load_industry_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open industry map: " + path);
    std::string line;
    if (!std::getline(in, line) || strip_cr(line) != "stock,industry") {
        throw DataError(path + ":1: expected header stock,industry");
    }
    std::map<std::string, std::string> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = strip_cr(line);
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 2) {
            throw DataError(path + ":" + std::to_string(line_no) + ": expected 2 fields");
        }
        out[f[0]] = f[1];
    }
    return out;
}

void save_trade_log_csv(const std::string& path,
                        const std::vector<backtest::TradeResult>& trades) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write trade log: " + path);
    out << "stock,direction,entry_date,entry_price,exit_date,exit_price,exit_reason,profit\n";
    for (const auto& t : trades) {
        out << t.stock_id << "," << backtest::direction_name(t.direction) << "," << t.entry_date
            << "," << format_double(t.entry_price) << "," << t.exit_date << ","
            << format_double(t.exit_price) << "," << backtest::exit_reason_name(t.reason) << ","
            << format_double(t.profit()) << "\n";
    }
}

namespace {
std::string money(std::int64_t cents) {
    std::ostringstream os;
    if (cents < 0) {
        os << "-$" << format_double(static_cast<double>(-cents) / 100.0);
    } else {
        os << "$" << format_double(static_cast<double>(cents) / 100.0);
    }
    return os.str();
}
} // namespace

std::string render_industry_report(const std::vector<backtest::IndustryReport>& reports) {
    std::size_t w0 = 8, w1 = 6, w2 = 8;
    for (const auto& r : reports) {
        w0 = std::max(w0, r.industry.size());
        w1 = std::max(w1, money(r.market_cents).size());
        w2 = std::max(w2, money(r.strategy_cents).size());
    }
    std::ostringstream os;
    os << std::left;
    os.width(static_cast<std::streamsize>(w0));
    os << "Industry";
    os << "  ";
    os.width(static_cast<std::streamsize>(w1));
    os << "Market";
    os << "  Strategy\n";
    for (const auto& r : reports) {
        os.width(static_cast<std::streamsize>(w0));
        os << r.industry << "  ";
        os.width(static_cast<std::streamsize>(w1));
        os << money(r.market_cents) << "  " << money(r.strategy_cents) << "\n";
    }
    return os.str();
}

// ---- metrics ----

void save_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write metrics: " + path);
    out << "epoch,split,loss,accuracy,mcc\n";
    for (const auto& r : rows) {
        out << r.epoch << "," << r.split << "," << format_double(r.loss) << ","
            << format_double(r.accuracy) << "," << format_double(r.mcc) << "\n";
    }
}

void save_ablation_csv(const std::string& path, const std::vector<AblationLine>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write ablation table: " + path);
    out << "variant,accuracy,mcc\n";
    for (const auto& r : rows) {
        out << r.variant << "," << format_double(r.accuracy) << "," << format_double(r.mcc)
            << "\n";
    }
}

std::string render_ablation_table(const std::vector<AblationLine>& rows) {
    std::ostringstream os;
    os << "variant  accuracy  mcc\n";
    for (const auto& r : rows) {
        os << std::left;
        os.width(7);
        os << r.variant << "  ";
        char acc[32];
        std::snprintf(acc, sizeof(acc), "%-8.4f", r.accuracy);
        os << acc << "  ";
        std::snprintf(acc, sizeof(acc), "%.4f", r.mcc);
        os << acc << "\n";
    }
    return os.str();
}

} // namespace mman::io
