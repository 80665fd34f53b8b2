#include "mman/model.hpp"

#include <algorithm>
#include <cmath>

#include "mman/textprep.hpp"

namespace mman::model {

std::string ablation_name(Ablation a) {
    switch (a) {
        case Ablation::Full: return "full";
        case Ablation::NoSocial: return "nA";
        case Ablation::NoHistory: return "nH";
        case Ablation::OnlyText: return "oC";
        case Ablation::OnlyHistory: return "oH";
    }
    return "full";
}

Ablation ablation_from_name(const std::string& name) {
    if (name == "full") return Ablation::Full;
    if (name == "nA") return Ablation::NoSocial;
    if (name == "nH") return Ablation::NoHistory;
    if (name == "oC") return Ablation::OnlyText;
    if (name == "oH") return Ablation::OnlyHistory;
    throw ConfigError("unknown ablation variant: '" + name + "'");
}

const std::vector<Ablation>& all_ablations() {
    static const std::vector<Ablation> v = {Ablation::Full, Ablation::NoSocial,
                                            Ablation::NoHistory, Ablation::OnlyText,
                                            Ablation::OnlyHistory};
    return v;
}

void ModelConfig::validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2 (pad + unk)");
    if (heads == 0 || latent_dim == 0) throw ConfigError("latent_dim and heads must be positive");
    if (latent_dim % heads != 0) {
        throw ConfigError("latent_dim " + std::to_string(latent_dim) +
                          " not divisible by heads " + std::to_string(heads));
    }
    if (latent_dim % 2 != 0) throw ConfigError("latent_dim must be even for the time encoding");
    if (head_dim() < 8) {
        throw ConfigError("head_dim " + std::to_string(head_dim()) +
                          " too small for the inference conv stack (needs >= 8)");
    }
    if (max_posts == 0 || max_tokens == 0) throw ConfigError("max_posts/max_tokens must be >= 1");
    if (encoder_layers == 0 || decoder_layers == 0) {
        throw ConfigError("encoder_layers/decoder_layers must be >= 1");
    }
    if (capsule_dim == 0 || infer_channels == 0 || cnn_channels == 0) {
        throw ConfigError("capsule_dim/infer_channels/cnn_channels must be >= 1");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
        throw ConfigError("dropout_rate must lie in [0, 1)");
    }
}

ModelConfig ModelConfig::desk_preset(std::size_t vocab) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.latent_dim = 32;
    c.heads = 4;
    c.max_posts = 8;
    c.max_tokens = 12;
    c.encoder_layers = 2;
    c.decoder_layers = 1;
    return c;
}

// ---- parameters ----

namespace {

struct ParamBuilder {
    std::vector<ParamEntry> entries;
    std::mt19937_64 rng;

    explicit ParamBuilder(std::uint64_t seed) : rng(seed) {}

    void weight(const std::string& path, Shape shape, std::size_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        entries.push_back({path, Tensor::uniform(std::move(shape), -bound, bound, rng, true),
                           /*decay=*/true});
    }
    void bias(const std::string& path, Shape shape) {
        entries.push_back({path, Tensor::zeros(std::move(shape), true), /*decay=*/false});
    }
    void gain(const std::string& path, Shape shape) {
        entries.push_back({path, Tensor::full(std::move(shape), 1.0, true), /*decay=*/false});
    }
    void attention(const std::string& prefix, std::size_t d) {
        for (const char* nm : {"wq", "wk", "wv", "wo"}) {
            weight(prefix + "." + nm, {d, d}, d);
        }
        for (const char* nm : {"bq", "bk", "bv", "bo"}) {
            bias(prefix + "." + nm, {d});
        }
    }
    void norm(const std::string& prefix, std::size_t d) {
        gain(prefix + ".g", {d});
        bias(prefix + ".b", {d});
    }
    void ffn(const std::string& prefix, std::size_t d, std::size_t hidden) {
        weight(prefix + ".w1", {d, hidden}, d);
        bias(prefix + ".b1", {hidden});
        weight(prefix + ".w2", {hidden, d}, hidden);
        bias(prefix + ".b2", {d});
    }
};

} // namespace

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    const std::size_t d = config.latent_dim;
    const std::size_t m = config.heads;
    const std::size_t h = config.head_dim();
    const std::size_t s = config.max_tokens;
    const std::size_t cc = config.cnn_channels;
    const std::size_t cd = config.capsule_dim;
    const std::size_t ic = config.infer_channels;

    ParamBuilder b(seed);

    b.weight("embed.table", {config.vocab_size, d}, d);

    b.weight("dan.w1", {s * d, config.dan_hidden_dim()}, s * d);
    b.bias("dan.b1", {config.dan_hidden_dim()});
    b.weight("dan.w2", {config.dan_hidden_dim(), d}, config.dan_hidden_dim());
    b.bias("dan.b2", {d});

    b.weight("social.w", {data::kSocialDim, d}, data::kSocialDim);
    b.bias("social.b", {d});

    b.weight("cnn.mix.k", {cc, data::PriceWindow::kChannels, 1}, data::PriceWindow::kChannels);
    b.bias("cnn.mix.b", {cc});
    b.weight("cnn.conv1.k", {cc, cc, 3}, cc * 3);
    b.bias("cnn.conv1.b", {cc});
    b.weight("cnn.conv2.k", {cc, cc, 3}, cc * 3);
    b.bias("cnn.conv2.b", {cc});
    // 64 -> 62 -> 31 -> 29 -> 14 through the conv/pool stack
    const std::size_t cnn_flat = cc * 14;
    b.weight("cnn.proj.w", {cnn_flat, d}, cnn_flat);
    b.bias("cnn.proj.b", {d});

    for (std::size_t i = 0; i < config.encoder_layers; ++i) {
        const std::string p = "enc" + std::to_string(i);
        b.norm(p + ".ln1", d);
        b.attention(p + ".attn", d);
        b.norm(p + ".ln2", d);
        b.ffn(p + ".ffn", d, config.ffn_hidden_dim());
    }
    for (std::size_t i = 0; i < config.decoder_layers; ++i) {
        const std::string p = "dec" + std::to_string(i);
        b.norm(p + ".ln1", d);
        b.attention(p + ".attn", d);
        b.norm(p + ".ln2", d);
        b.ffn(p + ".ffn", d, config.ffn_hidden_dim());
    }

    for (const char* side : {"h", "c"}) {
        const std::string p = std::string("inter.") + side;
        for (const char* nm : {"wq", "wk", "wv"}) b.weight(p + "." + nm, {d, d}, d);
        for (const char* nm : {"bq", "bk", "bv"}) b.bias(p + "." + nm, {d});
        b.weight(p + ".proj.w", {2 * d, d}, 2 * d);
        b.bias(p + ".proj.b", {d});
    }
    b.weight("gate.h.w", {d, d}, d);
    b.bias("gate.h.b", {d});
    b.weight("gate.c.w", {d, d}, d);
    b.bias("gate.c.b", {d});
    for (const char* side : {"h", "c"}) {
        const std::string p = std::string("intra.") + side;
        for (const char* nm : {"wq", "wk", "wv"}) b.weight(p + "." + nm, {d, d}, d);
        for (const char* nm : {"bq", "bk", "bv"}) b.bias(p + "." + nm, {d});
        b.weight(p + ".out.w", {m, h, h}, h);
        b.bias(p + ".out.b", {m, h});
    }

    b.weight("infer.conv1.k", {ic, m, 3}, m * 3);
    b.bias("infer.conv1.b", {ic});
    b.weight("infer.conv2.k", {ic, ic, 3}, ic * 3);
    b.bias("infer.conv2.b", {ic});
    b.weight("infer.fc.w", {ic, 2 * cd}, ic);
    b.bias("infer.fc.b", {2 * cd});

    b.weight("recon.w1", {2 * cd, 64}, 2 * cd);
    b.bias("recon.b1", {64});
    b.weight("recon.w2", {64, m * h}, 64);
    b.bias("recon.b2", {m * h});

    ModelParams params;
    params.entries_ = std::move(b.entries);
    params.reindex();
    return params;
}

void ModelParams::reindex() {
    index_.clear();
    for (std::size_t i = 0; i < entries_.size(); ++i) index_[entries_[i].path] = i;
}

Tensor ModelParams::at(const std::string& path) const {
    const auto it = index_.find(path);
    if (it == index_.end()) throw ContractError("unknown parameter path: " + path);
    return entries_[it->second].tensor;
}

bool ModelParams::has(const std::string& path) const { return index_.count(path) > 0; }

std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(entries_.size());
    for (const ParamEntry& e : entries_) out.emplace_back(e.path, e.tensor);
    return out;
}

void ModelParams::zero_grads() {
    for (ParamEntry& e : entries_) e.tensor.zero_grad();
}

std::size_t ModelParams::coordinate_count() const {
    std::size_t n = 0;
    for (const ParamEntry& e : entries_) n += e.tensor.numel();
    return n;
}

ModelParams ModelParams::clone() const {
    ModelParams copy;
    for (const ParamEntry& e : entries_) {
        copy.entries_.push_back(
            {e.path, Tensor::from_data(e.tensor.shape(), e.tensor.values(), true), e.decay});
    }
    copy.reindex();
    return copy;
}

void ModelParams::restore(const ModelParams& snapshot) {
    if (snapshot.entries_.size() != entries_.size()) {
        throw ContractError("restore: parameter layout mismatch");
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (snapshot.entries_[i].path != entries_[i].path ||
            snapshot.entries_[i].tensor.shape() != entries_[i].tensor.shape()) {
            throw ContractError("restore: parameter layout mismatch at " + entries_[i].path);
        }
        entries_[i].tensor.values() = snapshot.entries_[i].tensor.values();
    }
}

ModelParams make_params_for_io(std::vector<ParamEntry> entries) {
    ModelParams params;
    params.entries_ = std::move(entries);
    params.reindex();
    return params;
}

// ---- inputs ----

ModelInput tensorize(const data::Sample& sample, const ModelConfig& config) {
    const std::size_t n = sample.posts.size();
    if (n == 0) throw ContractError("tensorize: sample has no posts");
    if (sample.windows.size() != n || sample.social.size() != n) {
        throw ContractError("tensorize: misaligned post/window/social streams");
    }
    if (n > config.max_posts) throw ContractError("tensorize: more posts than config.max_posts");

    ModelInput input;
    const std::size_t s = config.max_tokens;
    std::vector<double> social_flat;
    social_flat.reserve(n * data::kSocialDim);
    for (std::size_t i = 0; i < n; ++i) {
        const data::Post& post = sample.posts[i];
        std::vector<int> ids(s, text::Vocabulary::kPadId);
        std::vector<double> tok_mask(s, 0.0);
        const std::size_t len = std::min(post.tokens.size(), s);
        for (std::size_t k = 0; k < len; ++k) {
            ids[k] = post.tokens[k];
            tok_mask[k] = 1.0;
        }
        input.token_ids.push_back(std::move(ids));
        input.token_masks.push_back(Tensor::from_data({s}, std::move(tok_mask)));

        // windows arrive day-major, the CNN wants channel-major
        std::vector<double> w(data::PriceWindow::kChannels * data::PriceWindow::kDays);
        for (std::size_t day = 0; day < data::PriceWindow::kDays; ++day) {
            for (std::size_t ch = 0; ch < data::PriceWindow::kChannels; ++ch) {
                w[ch * data::PriceWindow::kDays + day] = sample.windows[i].at(day, ch);
            }
        }
        input.windows.push_back(Tensor::from_data(
            {data::PriceWindow::kChannels, data::PriceWindow::kDays}, std::move(w)));

        for (double v : sample.social[i]) social_flat.push_back(v);

        const double age_seconds =
            static_cast<double>(sample.reference_time - post.release_time);
        if (age_seconds < 0) {
            throw ContractError("tensorize: post released after the reference time");
        }
        input.tau_hours.push_back(std::min(age_seconds / 3600.0, config.tau_cap_hours));
    }
    input.social = Tensor::from_data({n, data::kSocialDim}, std::move(social_flat));
    input.post_mask.assign(n, 1);
    return input;
}

Tensor time_positional_encoding(const std::vector<double>& tau_hours, std::size_t d, double c) {
    if (d % 2 != 0) throw ContractError("time_positional_encoding: d must be even");
    Tensor pe = Tensor::zeros({tau_hours.size(), d});
    for (std::size_t r = 0; r < tau_hours.size(); ++r) {
        const double tau = tau_hours[r];
        if (tau < 0) throw ContractError("time_positional_encoding: negative age");
        for (std::size_t i = 0; i < d / 2; ++i) {
            const double denom = std::pow(c, static_cast<double>(2 * i) / static_cast<double>(d));
            pe.values()[r * d + 2 * i] = std::sin(tau / denom);
            pe.values()[r * d + 2 * i + 1] = std::cos(tau / denom);
        }
    }
    return pe;
}

const Tensor* ForwardTrace::find(const std::string& name) const {
    for (const auto& [n, t] : records) {
        if (n == name) return &t;
    }
    return nullptr;
}

// ---- model ----

Model::Model(ModelConfig config) : config_(std::move(config)) { config_.validate(); }

Tensor Model::embed_texts(const ModelInput& input, const ModelParams& params) const {
    const Tensor table = params.at("embed.table");
    std::vector<Tensor> rows;
    rows.reserve(input.token_ids.size());
    for (std::size_t i = 0; i < input.token_ids.size(); ++i) {
        Tensor e = embedding_rows(table, input.token_ids[i]);
        e = scale_channels(e, input.token_masks[i]); // zero the PAD rows before flatten
        rows.push_back(e);
    }
    Tensor flat = stack_rows(rows); // n x (s*d)
    Tensor h1 = tanh_act(linear(flat, params.at("dan.w1"), params.at("dan.b1")));
    return tanh_act(linear(h1, params.at("dan.w2"), params.at("dan.b2")));
}

Tensor Model::embed_social(const Tensor& social, const ModelParams& params) const {
    return linear(social, params.at("social.w"), params.at("social.b"));
}

Tensor Model::embed_history(const std::vector<Tensor>& windows,
                            const ModelParams& params) const {
    std::vector<Tensor> rows;
    rows.reserve(windows.size());
    for (const Tensor& w : windows) {
        Tensor z = conv1d(w, params.at("cnn.mix.k"), 1);
        z = tanh_act(shift_channels(z, params.at("cnn.mix.b")));
        z = conv1d(z, params.at("cnn.conv1.k"), 1);
        z = tanh_act(shift_channels(z, params.at("cnn.conv1.b")));
        z = max_pool1d(z, 2, 2);
        z = conv1d(z, params.at("cnn.conv2.k"), 1);
        z = tanh_act(shift_channels(z, params.at("cnn.conv2.b")));
        z = max_pool1d(z, 2, 2);
        rows.push_back(z);
    }
    Tensor flat = stack_rows(rows);
    return linear(flat, params.at("cnn.proj.w"), params.at("cnn.proj.b"));
}

Tensor Model::attention_block(const Tensor& q_src, const Tensor& k_src, const Tensor& v_src,
                              const std::string& prefix, const Mask& mask,
                              const ModelParams& params, ForwardTrace* trace,
                              const std::string& trace_name) const {
    const std::size_t n = q_src.dim(0);
    const std::size_t d = config_.latent_dim;
    const std::size_t m = config_.heads;
    const std::size_t h = config_.head_dim();

    auto to_heads = [&](const Tensor& t) {
        return permute(reshape(t, {n, m, h}), {1, 0, 2});
    };
    Tensor q = to_heads(linear(q_src, params.at(prefix + ".wq"), params.at(prefix + ".bq")));
    Tensor k = to_heads(linear(k_src, params.at(prefix + ".wk"), params.at(prefix + ".bk")));
    Tensor v = to_heads(linear(v_src, params.at(prefix + ".wv"), params.at(prefix + ".bv")));

    Tensor scores = scalar_mul(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(h)));
    Tensor att = softmax_lastdim(mask_scores(scores, mask));
    if (trace) trace->add(trace_name, att);

    Tensor ctx = reshape(permute(matmul(att, v), {1, 0, 2}), {n, d});
    return linear(ctx, params.at(prefix + ".wo"), params.at(prefix + ".bo"));
}

Tensor Model::ffn_block(const Tensor& x, const std::string& prefix,
                        const ModelParams& params) const {
    Tensor h1 = tanh_act(linear(x, params.at(prefix + ".w1"), params.at(prefix + ".b1")));
    return linear(h1, params.at(prefix + ".w2"), params.at(prefix + ".b2"));
}

Tensor Model::encode(const Tensor& cs_plus_pe, const Mask& mask, const ModelParams& params,
                     ForwardTrace* trace) const {
    bool any = false;
    for (auto b : mask) any = any || (b != 0);
    if (!any) throw ContractError("encode: all posts masked");

    Tensor x = cs_plus_pe;
    for (std::size_t i = 0; i < config_.encoder_layers; ++i) {
        const std::string p = "enc" + std::to_string(i);
        Tensor pre = layer_norm(x, params.at(p + ".ln1.g"), params.at(p + ".ln1.b"));
        Tensor att =
            attention_block(pre, pre, pre, p + ".attn", mask, params, trace, p + ".att");
        x = add(x, att);
        Tensor pre2 = layer_norm(x, params.at(p + ".ln2.g"), params.at(p + ".ln2.b"));
        x = add(x, ffn_block(pre2, p + ".ffn", params));
    }
    return x;
}

Tensor Model::fuse_decode(const Tensor& ae, const Tensor& ce, const Mask& mask,
                          const ModelParams& params, ForwardTrace* trace) const {
    Tensor x = ce;
    for (std::size_t i = 0; i < config_.decoder_layers; ++i) {
        const std::string p = "dec" + std::to_string(i);
        // queries and keys come from the social embedding, values from the
        // encoded text; residual follows the value stream
        Tensor vpre = layer_norm(x, params.at(p + ".ln1.g"), params.at(p + ".ln1.b"));
        Tensor cross =
            attention_block(ae, ae, vpre, p + ".attn", mask, params, trace, p + ".att");
        x = add(x, cross);
        Tensor pre2 = layer_norm(x, params.at(p + ".ln2.g"), params.at(p + ".ln2.b"));
        x = add(x, ffn_block(pre2, p + ".ffn", params));
    }
    return x;
}

std::pair<Tensor, Tensor> Model::inter_attention(const Tensor& h, const Tensor& c,
                                                 const Mask& mask, const ModelParams& params,
                                                 ForwardTrace* trace) const {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(config_.latent_dim));

    Tensor hq = linear(h, params.at("inter.h.wq"), params.at("inter.h.bq"));
    Tensor hk = linear(h, params.at("inter.h.wk"), params.at("inter.h.bk"));
    Tensor hv = linear(h, params.at("inter.h.wv"), params.at("inter.h.bv"));
    Tensor cq = linear(c, params.at("inter.c.wq"), params.at("inter.c.bq"));
    Tensor ck = linear(c, params.at("inter.c.wk"), params.at("inter.c.bk"));
    Tensor cv = linear(c, params.at("inter.c.wv"), params.at("inter.c.bv"));

    Tensor att_h = softmax_lastdim(
        mask_scores(scalar_mul(matmul_nt(hq, ck), inv_sqrt_d), mask));
    if (trace) trace->add("inter.h.att", att_h);
    Tensor h_itv = matmul(att_h, cv);

    Tensor att_c = softmax_lastdim(
        mask_scores(scalar_mul(matmul_nt(cq, hk), inv_sqrt_d), mask));
    if (trace) trace->add("inter.c.att", att_c);
    Tensor c_itv = matmul(att_c, hv);

    Tensor h_itd = linear(concat_lastdim(h, h_itv), params.at("inter.h.proj.w"),
                          params.at("inter.h.proj.b"));
    Tensor c_itd = linear(concat_lastdim(c, c_itv), params.at("inter.c.proj.w"),
                          params.at("inter.c.proj.b"));
    return {h_itd, c_itd};
}

std::pair<Tensor, Tensor> Model::conditioning_gates(const Tensor& h_itd, const Tensor& c_itd,
                                                    const Mask& mask,
                                                    const ModelParams& params) const {
    Tensor pooled_c = masked_mean_dim0(c_itd, mask);
    Tensor gate_h = sigmoid(linear(pooled_c, params.at("gate.h.w"), params.at("gate.h.b")));
    Tensor pooled_h = masked_mean_dim0(h_itd, mask);
    Tensor gate_c = sigmoid(linear(pooled_h, params.at("gate.c.w"), params.at("gate.c.b")));
    return {gate_h, gate_c};
}

std::pair<Tensor, Tensor> Model::intra_attention(const Tensor& h_itd, const Tensor& c_itd,
                                                 const Tensor& gate_h1, const Tensor& gate_c1,
                                                 const Mask& mask, const ModelParams& params,
                                                 ForwardTrace* trace) const {
    const std::size_t n = h_itd.dim(0);
    const std::size_t m = config_.heads;
    const std::size_t h = config_.head_dim();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(config_.latent_dim));

    auto one_side = [&](const Tensor& x, const Tensor& gate1, const std::string& p,
                        const std::string& trace_name) {
        Tensor q = scale_features(linear(x, params.at(p + ".wq"), params.at(p + ".bq")), gate1);
        Tensor k = scale_features(linear(x, params.at(p + ".wk"), params.at(p + ".bk")), gate1);
        Tensor v = linear(x, params.at(p + ".wv"), params.at(p + ".bv"));
        auto to_heads = [&](const Tensor& t) {
            return permute(reshape(t, {n, m, h}), {1, 0, 2});
        };
        Tensor scores = scalar_mul(matmul_nt(to_heads(q), to_heads(k)), inv_sqrt_d);
        Tensor att = softmax_lastdim(mask_scores(scores, mask));
        if (trace) trace->add(trace_name, att);
        Tensor inu = permute(matmul(att, to_heads(v)), {1, 0, 2}); // n x m x h
        Tensor summed = add(reshape(x, {n, m, h}), inu);
        // per-head output map
        Tensor mapped = matmul(permute(summed, {1, 0, 2}), params.at(p + ".out.w"));
        return shift_features(permute(mapped, {1, 0, 2}), params.at(p + ".out.b"));
    };

    Tensor h_ind = one_side(h_itd, gate_h1, "intra.h", "intra.h.att");
    Tensor c_ind = one_side(c_itd, gate_c1, "intra.c", "intra.c.att");
    return {h_ind, c_ind};
}

Tensor Model::final_fusion(const Tensor& h_ind, const Tensor& c_ind, const Mask& mask) const {
    return masked_mean_dim0(mul(h_ind, c_ind), mask);
}

Capsules Model::infer(const Tensor& feature_map, const ModelParams& params) const {
    if (feature_map.rank() != 2 || feature_map.dim(0) != config_.heads ||
        feature_map.dim(1) != config_.head_dim()) {
        throw ShapeError("infer: feature map must be " + std::to_string(config_.heads) + "x" +
                         std::to_string(config_.head_dim()) + ", got " +
                         shape_str(feature_map.shape()));
    }
    Tensor z = conv1d(feature_map, params.at("infer.conv1.k"), 1);
    z = tanh_act(shift_channels(z, params.at("infer.conv1.b")));
    z = max_pool1d(z, 2, 2);
    z = conv1d(z, params.at("infer.conv2.k"), 1);
    z = tanh_act(shift_channels(z, params.at("infer.conv2.b")));
    Tensor pooled = mean_lastdim(z); // global average over the remaining length
    Tensor pre = reshape(linear(pooled, params.at("infer.fc.w"), params.at("infer.fc.b")),
                         {2, config_.capsule_dim});
    // squash: v * |v| / (1 + |v|^2), norms land in [0, 1)
    Tensor nrm = norm_lastdim(pre);
    Tensor factor = div(nrm, scalar_add(mul(nrm, nrm), 1.0));
    Capsules caps;
    caps.vectors = scale_channels(pre, factor);
    caps.norms = norm_lastdim(caps.vectors);
    return caps;
}

namespace {
Tensor one_hot2(int label) {
    if (label != 0 && label != 1) {
        throw ContractError("label must be 0 (Fall) or 1 (Rise), got " + std::to_string(label));
    }
    return Tensor::from_data({2}, {label == 0 ? 1.0 : 0.0, label == 1 ? 1.0 : 0.0});
}
} // namespace

Tensor Model::margin_loss(const Tensor& norms, int label) const {
    Tensor y = one_hot2(label);
    Tensor y_inv = Tensor::from_data({2}, {y.values()[0] == 1.0 ? 0.0 : 1.0,
                                           y.values()[1] == 1.0 ? 0.0 : 1.0});
    Tensor present = relu(scalar_add(scalar_mul(norms, -1.0), kMarginUpper));
    Tensor present_sq = mul(present, present);
    Tensor absent = relu(scalar_add(norms, -kMarginLower));
    Tensor absent_sq = mul(absent, absent);
    return add(sum_all(mul(present_sq, y)),
               scalar_mul(sum_all(mul(absent_sq, y_inv)), kMarginLambda));
}

Tensor Model::total_loss(const ForwardResult& result, int label,
                         const ModelParams& params) const {
    Tensor margin = margin_loss(result.capsules.norms, label);
    Tensor y = one_hot2(label);
    Tensor masked = scale_channels(result.capsules.vectors, y);
    Tensor rin = reshape(masked, {2 * config_.capsule_dim});
    Tensor r1 = tanh_act(linear(rin, params.at("recon.w1"), params.at("recon.b1")));
    Tensor rec = linear(r1, params.at("recon.w2"), params.at("recon.b2"));
    Tensor diff = sub(rec, reshape(result.feature_map,
                                   {config_.heads * config_.head_dim()}));
    return add(margin, scalar_mul(sum_all(mul(diff, diff)), kReconScale));
}

Tensor Model::reshape_pooled_to_heads(const Tensor& pooled) const {
    return reshape(pooled, {config_.heads, config_.head_dim()});
}

ForwardResult Model::forward(const ModelInput& input, const ModelParams& params, bool training,
                             std::mt19937_64* dropout_rng, ForwardTrace* trace) const {
    const Mask& mask = input.post_mask;
    bool any = false;
    for (auto b : mask) any = any || (b != 0);
    if (!any) throw ContractError("forward: sample has no unmasked posts");
    if (training && config_.dropout_rate > 0.0 && dropout_rng == nullptr) {
        throw ContractError("forward: training mode needs a dropout rng");
    }

    auto drop = [&](const Tensor& t) {
        return training ? dropout(t, config_.dropout_rate, *dropout_rng, true) : t;
    };

    const Ablation ab = config_.ablation;
    Tensor fm;

    if (ab == Ablation::OnlyHistory) {
        Tensor h = drop(embed_history(input.windows, params));
        if (trace) trace->add("h", h);
        fm = reshape_pooled_to_heads(masked_mean_dim0(h, mask));
    } else {
        Tensor cs = drop(embed_texts(input, params));
        if (trace) trace->add("cs", cs);
        Tensor pe =
            time_positional_encoding(input.tau_hours, config_.latent_dim, config_.pe_base);
        if (trace) trace->add("pe", pe);
        Tensor ce = encode(add(cs, pe), mask, params, trace);
        if (trace) trace->add("ce", ce);

        if (ab == Ablation::OnlyText) {
            fm = reshape_pooled_to_heads(masked_mean_dim0(ce, mask));
        } else {
            Tensor c;
            if (ab == Ablation::NoSocial) {
                c = ce;
            } else {
                Tensor ae = drop(embed_social(input.social, params));
                if (trace) trace->add("ae", ae);
                c = fuse_decode(ae, ce, mask, params, trace);
            }
            if (trace) trace->add("c", c);

            if (ab == Ablation::NoHistory) {
                fm = reshape_pooled_to_heads(masked_mean_dim0(c, mask));
            } else {
                Tensor h = drop(embed_history(input.windows, params));
                if (trace) trace->add("h", h);
                auto [h_itd, c_itd] = inter_attention(h, c, mask, params, trace);
                if (trace) {
                    trace->add("h_itd", h_itd);
                    trace->add("c_itd", c_itd);
                }
                auto [gate_h, gate_c] = conditioning_gates(h_itd, c_itd, mask, params);
                Tensor gh1 = scalar_add(gate_h, 1.0);
                Tensor gc1 = scalar_add(gate_c, 1.0);
                auto [h_ind, c_ind] =
                    intra_attention(h_itd, c_itd, gh1, gc1, mask, params, trace);
                if (trace) {
                    trace->add("h_ind", h_ind);
                    trace->add("c_ind", c_ind);
                }
                fm = final_fusion(h_ind, c_ind, mask);
            }
        }
    }
    if (trace) trace->add("fm", fm);

    ForwardResult result;
    result.feature_map = fm;
    result.capsules = infer(fm, params);
    if (trace) trace->add("capsules", result.capsules.vectors);
    return result;
}

} // namespace mman::model
