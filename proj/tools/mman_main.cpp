#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "mman/grad_check.hpp"
#include "mman/io.hpp"
#include "mman/run_config.hpp"
#include "mman/synthetic.hpp"
#include "mman/train.hpp"

namespace fs = std::filesystem;
using namespace mman;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitInputError = 2;
constexpr int kExitNumericError = 3;

struct GlobalArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::vector<std::string> overrides;
    bool seed_set = false;
    std::uint64_t seed = 0;
};

config::RunConfig resolve_config(const GlobalArgs& g) {
    config::RunConfig cfg;
    if (!g.config_path.empty()) cfg = config::RunConfig::load_file(g.config_path);
    for (const std::string& kv : g.overrides) cfg.apply_override(kv);
    if (g.seed_set) cfg.seed = g.seed;
    return cfg;
}

void write_resolved_config(const config::RunConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "config.resolved");
    if (!out) throw DataError("cannot write resolved config into " + out_dir);
    out << cfg.serialize();
}

// ---- datagen ----

int cmd_datagen(const GlobalArgs& g) {
    const config::RunConfig cfg = resolve_config(g);
    const synth::SyntheticConfig scfg = cfg.to_synthetic_config();
    const synth::SyntheticDataset ds = synth::generate_synthetic_dataset(scfg);

    write_resolved_config(cfg, g.out_dir);
    io::save_archive(g.out_dir, ds.samples, ds.vocab,
                     {{"kind", "synthetic"},
                      {"seed", std::to_string(ds.seed)},
                      {"signal", io::format_double(ds.signal_strength)},
                      {"plants", cfg.plants}});
    io::save_plant_manifest((fs::path(g.out_dir) / "plants.json").string(), ds);

    std::cout << "samples: " << ds.samples.size() << "\n";
    std::cout << "bayes_accuracy: " << io::format_double(synth::manifest_bayes_accuracy(ds))
              << "\n";
    return kExitOk;
}

// ---- prep ----

int cmd_prep(const GlobalArgs& g, const std::string& posts_file, const std::string& prices_dir) {
    const config::RunConfig cfg = resolve_config(g);

    const std::vector<io::RawPost> raw_posts = io::load_posts_jsonl(posts_file);
    if (raw_posts.empty()) throw DataError("no posts in " + posts_file);
    const auto prices = io::load_price_dir(prices_dir);

    // unsupervised new-word discovery over the whole corpus
    std::vector<std::string> texts;
    texts.reserve(raw_posts.size());
    for (const auto& p : raw_posts) texts.push_back(p.text);
    const text::Corpus corpus = text::build_corpus(texts);
    text::Lexicon lexicon;
    if (!cfg.lexicon_file.empty()) lexicon = text::Lexicon::load_file(cfg.lexicon_file);
    text::DiscoveryConfig dcfg;
    dcfg.entropy_threshold = cfg.entropy_threshold;
    dcfg.top_k = cfg.top_k;
    const auto discovered = text::discover_new_words(corpus, dcfg);
    for (const auto& w : discovered) lexicon.add(w.word);

    const text::StopWords stop_words = cfg.stopwords_file.empty()
                                           ? text::StopWords::bundled()
                                           : text::StopWords::load_file(cfg.stopwords_file);
    const text::ExtractConfig ecfg = cfg.to_extract_config();

    // tokenize and length-gate each post
    struct TokenizedPost {
        io::RawPost raw;
        std::vector<std::string> tokens;
    };
    std::vector<TokenizedPost> kept;
    std::size_t rejected_text = 0;
    std::map<std::string, std::uint64_t> token_counts;
    for (const auto& p : raw_posts) {
        const auto r = text::preprocess_post_text(p.text, lexicon, stop_words, ecfg);
        if (r.rejected) {
            ++rejected_text;
            continue;
        }
        for (const auto& t : r.tokens) ++token_counts[t];
        kept.push_back({p, r.tokens});
    }
    const text::Vocabulary vocab = text::Vocabulary::build(token_counts);

    // group posts by stock
    std::map<std::string, std::vector<data::Post>> by_stock;
    for (const auto& tp : kept) {
        data::Post post;
        post.stock_id = tp.raw.stock;
        post.release_time = tp.raw.time;
        post.poster = tp.raw.poster;
        post.feedback = tp.raw.feedback;
        for (const auto& t : tp.tokens) post.tokens.push_back(vocab.id(t));
        by_stock[post.stock_id].push_back(std::move(post));
    }

    data::AssembleConfig acfg;
    acfg.max_posts = cfg.max_posts;
    acfg.lookback_seconds = static_cast<std::int64_t>(cfg.lookback_days) * 86400;
    acfg.theta = cfg.theta;
    acfg.horizon = cfg.horizon_days;
    data::NameEmbedder embedder;

    std::vector<data::Sample> samples;
    std::map<std::string, std::size_t> dropped;
    for (const auto& [stock, posts] : by_stock) {
        const auto pit = prices.find(stock);
        if (pit == prices.end()) {
            dropped["no_price_series"] += posts.size() ? 1 : 0;
            continue;
        }
        // one candidate sample per trading day
        for (const data::PriceBar& bar : pit->second.bars) {
            const std::int64_t ref = data::date_to_epoch(bar.date) + 86399;
            const auto out = data::assemble_sample(posts, pit->second, stock, ref, acfg, embedder);
            if (out.sample.has_value()) {
                samples.push_back(*out.sample);
            } else {
                switch (out.reason) {
                    case data::DropReason::NoPosts: ++dropped["no_posts"]; break;
                    case data::DropReason::DeadZone: ++dropped["dead_zone"]; break;
                    case data::DropReason::InsufficientHistory:
                        ++dropped["insufficient_history"];
                        break;
                    case data::DropReason::NoReferencePrice:
                        ++dropped["no_reference_price"];
                        break;
                    case data::DropReason::NoFutureBars: ++dropped["no_future_bars"]; break;
                    case data::DropReason::None: break;
                }
            }
        }
    }

    write_resolved_config(cfg, g.out_dir);
    io::save_archive(g.out_dir, samples, vocab, {{"kind", "prep"}});
    lexicon.save_file((fs::path(g.out_dir) / "lexicon.txt").string());

    // stats report
    {
        std::ofstream stats(fs::path(g.out_dir) / "stats.txt");
        stats << "posts_total " << raw_posts.size() << "\n";
        stats << "posts_rejected_text " << rejected_text << "\n";
        stats << "lexicon_added " << discovered.size() << "\n";
        stats << "vocab_size " << vocab.size() << "\n";
        stats << "samples_kept " << samples.size() << "\n";
        for (const auto& [reason, count] : dropped) {
            stats << "dropped_" << reason << " " << count << "\n";
        }
    }
    std::cout << "samples: " << samples.size() << "\n";
    std::cout << "new_words: " << discovered.size() << "\n";
    for (const auto& [reason, count] : dropped) {
        std::cout << "dropped_" << reason << ": " << count << "\n";
    }
    return kExitOk;
}

// ---- train ----

int cmd_train(const GlobalArgs& g, const std::string& data_dir) {
    const config::RunConfig cfg = resolve_config(g);
    const io::Archive archive = io::load_archive(data_dir);
    if (archive.samples.empty()) throw DataError("archive has no samples: " + data_dir);

    const model::ModelConfig mcfg = cfg.to_model_config(archive.vocab.size());
    const train::TrainConfig tcfg = cfg.to_train_config();
    model::Model m(mcfg);
    model::ModelParams params = model::ModelParams::init(mcfg, tcfg.seed);
    if (!cfg.embeddings_file.empty()) {
        const std::size_t applied =
            io::apply_embedding_file(cfg.embeddings_file, archive.vocab, params);
        std::cout << "imported_embeddings: " << applied << "\n";
    }

    std::vector<data::Sample> train_set, val_set;
    if (cfg.split == "none") {
        train_set = archive.samples;
    } else {
        const train::SplitIndices split = train::chronological_split(archive.samples);
        train_set = train::take(archive.samples, split.train);
        val_set = train::take(archive.samples, split.val);
    }
    if (train_set.empty()) throw DataError("chronological split left no training samples");

    write_resolved_config(cfg, g.out_dir);

    std::vector<io::MetricRow> metrics;
    train::AdamState adam(params);
    std::vector<model::ModelInput> inputs;
    inputs.reserve(train_set.size());
    for (const auto& s : train_set) inputs.push_back(model::tensorize(s, mcfg));

    // epoch loop with checkpointing; the last finished epoch is the
    // last-good state for NaN aborts
    const std::size_t steps_per_epoch =
        (train_set.size() + tcfg.batch_size - 1) / tcfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * tcfg.epochs;
    std::mt19937_64 rng(tcfg.seed);
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    double final_train_acc = 0;
    for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
            const std::size_t count = std::min(tcfg.batch_size, order.size() - start);
            params.zero_grads();
            double batch_loss = 0.0;
            for (std::size_t k = 0; k < count; ++k) {
                const std::size_t idx = order[start + k];
                Tape tape;
                TapeScope scope(tape);
                const auto fwd = m.forward(inputs[idx], params, true, &rng);
                Tensor loss = m.total_loss(fwd, train_set[idx].label, params);
                batch_loss += loss.item();
                tape.backward(scalar_mul(loss, 1.0 / static_cast<double>(count)));
            }
            if (!std::isfinite(batch_loss)) {
                throw NumericError("loss diverged at epoch " + std::to_string(epoch) +
                                   "; last-good checkpoint is epoch " +
                                   std::to_string(epoch - 1));
            }
            epoch_loss += batch_loss;
            const double lr = train::linear_decay_lr(tcfg.lr0, adam.step_index() + 1, total_steps);
            adam.step(params, lr, tcfg);
        }
        const train::EvalReport train_rep = train::evaluate(m, params, train_set);
        metrics.push_back({epoch, "train", epoch_loss / static_cast<double>(train_set.size()),
                           train_rep.accuracy, train_rep.mcc});
        if (!val_set.empty()) {
            const train::EvalReport val_rep = train::evaluate(m, params, val_set);
            metrics.push_back({epoch, "val", val_rep.mean_loss, val_rep.accuracy, val_rep.mcc});
        }
        final_train_acc = train_rep.accuracy;
        char name[64];
        std::snprintf(name, sizeof(name), "checkpoint_epoch_%04zu.ckpt", epoch);
        io::save_checkpoint((fs::path(g.out_dir) / name).string(), params);
    }

    io::save_checkpoint((fs::path(g.out_dir) / "model.ckpt").string(), params);
    io::save_metrics_csv((fs::path(g.out_dir) / "metrics.csv").string(), metrics);
    std::cout << "final_train_accuracy: " << io::format_double(final_train_acc) << "\n";
    return kExitOk;
}

// ---- eval ----

int cmd_eval(const GlobalArgs& g, const std::string& data_dir, const std::string& ckpt_path,
             const std::string& split_name, bool dump_activations) {
    const config::RunConfig cfg = resolve_config(g);
    const io::Archive archive = io::load_archive(data_dir);
    if (archive.samples.empty()) throw DataError("archive has no samples: " + data_dir);
    model::ModelParams params = io::load_checkpoint(ckpt_path);
    const model::ModelConfig mcfg = cfg.to_model_config(archive.vocab.size());
    model::Model m(mcfg);

    std::vector<data::Sample> subset;
    if (split_name == "all") {
        subset = archive.samples;
    } else {
        const train::SplitIndices split = train::chronological_split(archive.samples);
        const auto& idx = split_name == "train" ? split.train
                          : split_name == "val" ? split.val
                                                : split.test;
        subset = train::take(archive.samples, idx);
    }
    if (subset.empty()) throw DataError("split '" + split_name + "' is empty");

    const train::EvalReport rep = train::evaluate(m, params, subset);
    write_resolved_config(cfg, g.out_dir);

    // predictions feed the backtest command
    {
        std::ofstream preds(fs::path(g.out_dir) / "predictions.csv");
        preds << "date,stock,direction,confidence\n";
        for (const auto& s : subset) {
            const auto input = model::tensorize(s, mcfg);
            const auto fwd = m.forward(input, params, false, nullptr);
            const int pred = train::predict_label(fwd.capsules);
            preds << data::epoch_to_date(s.reference_time) << "," << s.stock_id << ","
                  << (pred == 1 ? "long" : "short") << ","
                  << io::format_double(fwd.capsules.norms.values()[pred]) << "\n";
        }
    }
    if (dump_activations) {
        std::ofstream act(fs::path(g.out_dir) / "activations.csv");
        act << "sample,record,shape,values\n";
        const std::size_t limit = std::min<std::size_t>(subset.size(), 8);
        for (std::size_t i = 0; i < limit; ++i) {
            const auto input = model::tensorize(subset[i], mcfg);
            model::ForwardTrace trace;
            m.forward(input, params, false, nullptr, &trace);
            for (const auto& [name, tensor] : trace.records) {
                if (name != "fm" && name.find(".att") == std::string::npos) continue;
                act << i << "," << name << "," << shape_str(tensor.shape()) << ",\"";
                for (std::size_t k = 0; k < tensor.numel(); ++k) {
                    if (k) act << ";";
                    act << io::format_double(tensor.values()[k]);
                }
                act << "\"\n";
            }
        }
    }

    std::ofstream summary(fs::path(g.out_dir) / "eval.txt");
    summary << "split " << split_name << "\n";
    summary << "samples " << rep.total() << "\n";
    summary << "accuracy " << io::format_double(rep.accuracy) << "\n";
    summary << "mcc " << io::format_double(rep.mcc) << "\n";
    summary << "confusion tp=" << rep.tp << " fp=" << rep.fp << " tn=" << rep.tn
            << " fn=" << rep.fn << "\n";

    std::cout << "accuracy: " << io::format_double(rep.accuracy) << "\n";
    std::cout << "mcc: " << io::format_double(rep.mcc) << "\n";
    return kExitOk;
}

// ---- ablate ----

int cmd_ablate(const GlobalArgs& g, const std::string& data_dir) {
    const config::RunConfig cfg = resolve_config(g);
    const io::Archive archive = io::load_archive(data_dir);
    if (archive.samples.empty()) throw DataError("archive has no samples: " + data_dir);

    const model::ModelConfig mcfg = cfg.to_model_config(archive.vocab.size());
    const train::TrainConfig tcfg = cfg.to_train_config();
    const train::AblationResult result =
        train::run_ablation_suite(archive.samples, mcfg, tcfg);

    std::vector<io::AblationLine> lines;
    for (const auto& row : result.rows) {
        lines.push_back({row.variant, row.test.accuracy, row.test.mcc});
    }
    write_resolved_config(cfg, g.out_dir);
    io::save_ablation_csv((fs::path(g.out_dir) / "ablation.csv").string(), lines);
    const std::string table = io::render_ablation_table(lines);
    std::ofstream(fs::path(g.out_dir) / "ablation.txt") << table;
    std::cout << table;
    return kExitOk;
}

// ---- gradcheck ----

int cmd_gradcheck(const GlobalArgs& g, std::size_t n_seeds, double eps, bool corrupt) {
    const config::RunConfig cfg = resolve_config(g);

    double worst = 0.0;
    std::string worst_path;
    std::map<std::string, double> per_group;

    debug::corrupt_tanh_adjoint = corrupt;
    for (std::size_t s = 0; s < n_seeds; ++s) {
        const std::uint64_t seed = cfg.seed + s;
        synth::SyntheticConfig scfg;
        scfg.seed = seed;
        scfg.n_samples = 1;
        const auto ds = synth::generate_synthetic_dataset(scfg);

        model::ModelConfig mcfg = model::ModelConfig::desk_preset(ds.vocab.size());
        mcfg.ablation = model::ablation_from_name(cfg.ablation);
        model::Model m(mcfg);
        model::ModelParams params = model::ModelParams::init(mcfg, seed);
        const model::ModelInput input = model::tensorize(ds.samples[0], mcfg);
        const int label = ds.samples[0].label;

        auto loss_fn = [&] {
            const auto fwd = m.forward(input, params, false, nullptr);
            return m.total_loss(fwd, label, params);
        };
        const GradCheckReport report = grad_check(loss_fn, params.named_tensors(), eps);
        for (const auto& entry : report.per_param) {
            auto [it, inserted] = per_group.try_emplace(entry.path, entry.max_rel_err);
            if (!inserted) it->second = std::max(it->second, entry.max_rel_err);
        }
        if (report.max_rel_err >= worst) {
            worst = report.max_rel_err;
            worst_path = report.worst_path;
        }
        std::cout << "seed " << seed << ": max_rel_err "
                  << io::format_double(report.max_rel_err) << " (worst at "
                  << report.worst_path << ")\n";
    }
    debug::corrupt_tanh_adjoint = false;

    fs::create_directories(g.out_dir);
    write_resolved_config(cfg, g.out_dir);
    {
        std::ofstream rep(fs::path(g.out_dir) / "gradcheck.txt");
        rep << "seeds " << n_seeds << "\n";
        rep << "eps " << io::format_double(eps) << "\n";
        rep << "max_rel_err " << io::format_double(worst) << "\n";
        rep << "worst_param " << worst_path << "\n";
        for (const auto& [path, err] : per_group) {
            rep << "group " << path << " " << io::format_double(err) << "\n";
        }
    }
    std::cout << "max_rel_err: " << io::format_double(worst) << "\n";
    std::cout << "worst_param: " << worst_path << "\n";
    return worst <= 1e-4 ? kExitOk : kExitCheckFailed;
}

// ---- backtest ----

int cmd_backtest(const GlobalArgs& g, const std::string& predictions_file,
                 const std::string& prices_dir, const std::string& industry_file) {
    const config::RunConfig cfg = resolve_config(g);
    const auto predictions = io::load_predictions_csv(predictions_file);
    const auto prices = io::load_price_dir(prices_dir);
    std::map<std::string, std::string> industries;
    if (!industry_file.empty()) industries = io::load_industry_csv(industry_file);

    const backtest::BacktestResult result =
        backtest::run_backtest(predictions, prices, industries);

    write_resolved_config(cfg, g.out_dir);
    io::save_trade_log_csv((fs::path(g.out_dir) / "trades.csv").string(), result.trades);
    const std::string table = io::render_industry_report(result.industries);
    std::ofstream(fs::path(g.out_dir) / "report.txt") << table;

    std::cout << table;
    std::cout << "trades: " << result.trades.size() << "\n";
    std::cout << "skipped: " << result.skipped << "\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"MMAN stock-movement pipeline: preprocessing, synthetic data, "
                 "training, evaluation, ablations and virtual trading"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "key = value config file")->capture_default_str();
    app.add_option("--out", g.out_dir, "output directory")->capture_default_str();
    app.add_option("--set", g.overrides, "config override key=value (repeatable)");
    auto* seed_opt = app.add_option("--seed", g.seed, "seed override");

    auto* prep = app.add_subcommand("prep", "build a dataset archive from posts and prices");
    std::string posts_file, prices_dir;
    prep->add_option("--posts", posts_file, "posts JSONL file")->required();
    prep->add_option("--prices", prices_dir, "directory of <stock>.csv price files")->required();

    auto* datagen = app.add_subcommand("datagen", "generate a synthetic planted dataset");

    auto* train_cmd = app.add_subcommand("train", "train on a dataset archive");
    std::string data_dir, ckpt_path;
    train_cmd->add_option("--data", data_dir, "dataset archive directory")->required();

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string split_name = "test";
    bool dump_activations = false;
    eval_cmd->add_option("--data", data_dir, "dataset archive directory")->required();
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval_cmd->add_option("--split", split_name, "train|val|test|all")->capture_default_str();
    eval_cmd->add_flag("--dump-activations", dump_activations,
                       "write feature maps and attention weights as CSV");

    auto* ablate = app.add_subcommand("ablate", "train and evaluate all five model variants");
    ablate->add_option("--data", data_dir, "dataset archive directory")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the tape");
    std::size_t n_seeds = 5;
    double eps = 1e-5;
    bool corrupt = false;
    gradcheck->add_option("--seeds", n_seeds, "number of seeds")->capture_default_str();
    gradcheck->add_option("--eps", eps, "finite-difference step")->capture_default_str();
    gradcheck->add_flag("--corrupt-adjoint", corrupt, "negative control: break one adjoint");

    auto* backtest_cmd = app.add_subcommand("backtest", "virtual trading over predictions");
    std::string predictions_file, industry_file;
    backtest_cmd->add_option("--predictions", predictions_file, "predictions CSV")->required();
    backtest_cmd->add_option("--prices", prices_dir, "directory of <stock>.csv price files")
        ->required();
    backtest_cmd->add_option("--industries", industry_file, "stock,industry CSV");

    // let --config/--out/--seed/--set appear after the subcommand too
    for (CLI::App* sc : app.get_subcommands([](const CLI::App*) { return true; })) {
        sc->fallthrough();
    }

    try {
        app.parse(argc, argv);
        g.seed_set = seed_opt->count() > 0;

        if (prep->parsed()) return cmd_prep(g, posts_file, prices_dir);
        if (datagen->parsed()) return cmd_datagen(g);
        if (train_cmd->parsed()) return cmd_train(g, data_dir);
        if (eval_cmd->parsed()) {
            return cmd_eval(g, data_dir, ckpt_path, split_name, dump_activations);
        }
        if (ablate->parsed()) return cmd_ablate(g, data_dir);
        if (gradcheck->parsed()) return cmd_gradcheck(g, n_seeds, eps, corrupt);
        if (backtest_cmd->parsed()) return cmd_backtest(g, predictions_file, prices_dir,
                                                        industry_file);
        std::cerr << "no subcommand\n";
        return kExitInputError;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInputError;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumericError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInputError;
    }
}
