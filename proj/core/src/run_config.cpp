#include "mman/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "mman/io.hpp"

namespace mman::config {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::string unquote(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                          (s.front() == '\'' && s.back() == '\''))) {
        return s.substr(1, s.size() - 2);
    }
    return s;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ConfigError("key '" + key + "': bad count '" + v + "'");
    }
    return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ConfigError("key '" + key + "': bad integer '" + v + "'");
    }
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': bad number '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "': bad boolean '" + v + "'");
}

} // namespace

void RunConfig::set(const std::string& key, const std::string& raw_value) {
    const std::string v = unquote(trim(raw_value));
    using Setter = std::function<void(RunConfig&, const std::string&)>;
    static const std::map<std::string, Setter> setters = {
        {"latent_dim", [](RunConfig& c, const std::string& v) { c.latent_dim = parse_size("latent_dim", v); }},
        {"heads", [](RunConfig& c, const std::string& v) { c.heads = parse_size("heads", v); }},
        {"max_posts", [](RunConfig& c, const std::string& v) { c.max_posts = parse_size("max_posts", v); }},
        {"max_tokens", [](RunConfig& c, const std::string& v) { c.max_tokens = parse_size("max_tokens", v); }},
        {"encoder_layers", [](RunConfig& c, const std::string& v) { c.encoder_layers = parse_size("encoder_layers", v); }},
        {"decoder_layers", [](RunConfig& c, const std::string& v) { c.decoder_layers = parse_size("decoder_layers", v); }},
        {"capsule_dim", [](RunConfig& c, const std::string& v) { c.capsule_dim = parse_size("capsule_dim", v); }},
        {"infer_channels", [](RunConfig& c, const std::string& v) { c.infer_channels = parse_size("infer_channels", v); }},
        {"cnn_channels", [](RunConfig& c, const std::string& v) { c.cnn_channels = parse_size("cnn_channels", v); }},
        {"dropout", [](RunConfig& c, const std::string& v) { c.dropout = parse_real("dropout", v); }},
        {"desk_preset", [](RunConfig& c, const std::string& v) { c.desk_preset = parse_bool("desk_preset", v); }},
        {"ablation", [](RunConfig& c, const std::string& v) { model::ablation_from_name(v); c.ablation = v; }},
        {"lr0", [](RunConfig& c, const std::string& v) { c.lr0 = parse_real("lr0", v); }},
        {"weight_decay", [](RunConfig& c, const std::string& v) { c.weight_decay = parse_real("weight_decay", v); }},
        {"batch", [](RunConfig& c, const std::string& v) { c.batch = parse_size("batch", v); }},
        {"epochs", [](RunConfig& c, const std::string& v) { c.epochs = parse_size("epochs", v); }},
        {"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); }},
        {"entropy_threshold", [](RunConfig& c, const std::string& v) { c.entropy_threshold = parse_real("entropy_threshold", v); }},
        {"top_k", [](RunConfig& c, const std::string& v) { c.top_k = parse_size("top_k", v); }},
        {"bm25_k1", [](RunConfig& c, const std::string& v) { c.bm25_k1 = parse_real("bm25_k1", v); }},
        {"bm25_b", [](RunConfig& c, const std::string& v) { c.bm25_b = parse_real("bm25_b", v); }},
        {"min_tokens", [](RunConfig& c, const std::string& v) { c.min_tokens = parse_size("min_tokens", v); }},
        {"theta", [](RunConfig& c, const std::string& v) { c.theta = parse_real("theta", v); }},
        {"lookback_days", [](RunConfig& c, const std::string& v) { c.lookback_days = parse_size("lookback_days", v); }},
        {"horizon_days", [](RunConfig& c, const std::string& v) { c.horizon_days = parse_size("horizon_days", v); }},
        {"stopwords_file", [](RunConfig& c, const std::string& v) { c.stopwords_file = v; }},
        {"lexicon_file", [](RunConfig& c, const std::string& v) { c.lexicon_file = v; }},
        {"embeddings_file", [](RunConfig& c, const std::string& v) { c.embeddings_file = v; }},
        {"n_samples", [](RunConfig& c, const std::string& v) { c.n_samples = parse_size("n_samples", v); }},
        {"signal", [](RunConfig& c, const std::string& v) { c.signal = parse_real("signal", v); }},
        {"plants", [](RunConfig& c, const std::string& v) {
             if (v != "dual" && v != "text" && v != "price" && v != "none") {
                 throw ConfigError("key 'plants': expected dual|text|price|none, got '" + v + "'");
             }
             c.plants = v;
         }},
        {"split", [](RunConfig& c, const std::string& v) {
             if (v != "chrono" && v != "none") {
                 throw ConfigError("key 'split': expected chrono|none, got '" + v + "'");
             }
             c.split = v;
         }},
    };
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key: '" + key + "'");
    it->second(*this, v);
}

void RunConfig::apply_override(const std::string& key_equals_value) {
    const auto eq = key_equals_value.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("override must be key=value, got '" + key_equals_value + "'");
    }
    set(trim(key_equals_value.substr(0, eq)), key_equals_value.substr(eq + 1));
}

RunConfig RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    RunConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
        }
        try {
            cfg.set(trim(t.substr(0, eq)), t.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return cfg;
}

std::string RunConfig::serialize() const {
    std::map<std::string, std::string> kv;
    kv["latent_dim"] = std::to_string(latent_dim);
    kv["heads"] = std::to_string(heads);
    kv["max_posts"] = std::to_string(max_posts);
    kv["max_tokens"] = std::to_string(max_tokens);
    kv["encoder_layers"] = std::to_string(encoder_layers);
    kv["decoder_layers"] = std::to_string(decoder_layers);
    kv["capsule_dim"] = std::to_string(capsule_dim);
    kv["infer_channels"] = std::to_string(infer_channels);
    kv["cnn_channels"] = std::to_string(cnn_channels);
    kv["dropout"] = io::format_double(dropout);
    kv["desk_preset"] = desk_preset ? "true" : "false";
    kv["ablation"] = ablation;
    kv["lr0"] = io::format_double(lr0);
    kv["weight_decay"] = io::format_double(weight_decay);
    kv["batch"] = std::to_string(batch);
    kv["epochs"] = std::to_string(epochs);
    kv["seed"] = std::to_string(seed);
    kv["entropy_threshold"] = io::format_double(entropy_threshold);
    kv["top_k"] = std::to_string(top_k);
    kv["bm25_k1"] = io::format_double(bm25_k1);
    kv["bm25_b"] = io::format_double(bm25_b);
    kv["min_tokens"] = std::to_string(min_tokens);
    kv["theta"] = io::format_double(theta);
    kv["lookback_days"] = std::to_string(lookback_days);
    kv["horizon_days"] = std::to_string(horizon_days);
    kv["stopwords_file"] = stopwords_file;
    kv["lexicon_file"] = lexicon_file;
    kv["embeddings_file"] = embeddings_file;
    kv["n_samples"] = std::to_string(n_samples);
    kv["signal"] = io::format_double(signal);
    kv["plants"] = plants;
    kv["split"] = split;
    std::ostringstream os;
    for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
    return os.str();
}

model::ModelConfig RunConfig::to_model_config(std::size_t vocab_size) const {
    model::ModelConfig mc;
    mc.vocab_size = vocab_size;
    if (desk_preset) {
        mc = model::ModelConfig::desk_preset(vocab_size);
    } else {
        mc.latent_dim = latent_dim;
        mc.heads = heads;
        mc.max_posts = max_posts;
        mc.max_tokens = max_tokens;
    }
    mc.encoder_layers = encoder_layers;
    mc.decoder_layers = decoder_layers;
    mc.capsule_dim = capsule_dim;
    mc.infer_channels = infer_channels;
    mc.cnn_channels = cnn_channels;
    mc.dropout_rate = dropout;
    mc.tau_cap_hours = static_cast<double>(lookback_days) * 24.0;
    mc.ablation = model::ablation_from_name(ablation);
    mc.validate();
    return mc;
}

train::TrainConfig RunConfig::to_train_config() const {
    train::TrainConfig tc;
    tc.lr0 = lr0;
    tc.weight_decay = weight_decay;
    tc.batch_size = batch;
    tc.epochs = epochs;
    tc.seed = seed;
    return tc;
}

synth::SyntheticConfig RunConfig::to_synthetic_config() const {
    synth::SyntheticConfig sc;
    sc.seed = seed;
    sc.n_samples = n_samples;
    sc.signal_strength = plants == "none" ? 0.0 : signal;
    sc.text_plants = plants == "dual" || plants == "text";
    sc.price_plants = plants == "dual" || plants == "price";
    sc.max_posts = desk_preset ? 8 : max_posts;
    sc.tokens_per_post = desk_preset ? 12 : max_tokens;
    return sc;
}

text::ExtractConfig RunConfig::to_extract_config() const {
    text::ExtractConfig ec;
    ec.min_tokens = min_tokens;
    ec.max_tokens = desk_preset ? 12 : max_tokens;
    ec.bm25.k1 = bm25_k1;
    ec.bm25.b = bm25_b;
    return ec;
}

} // namespace mman::config
