#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mman/data.hpp"
#include "mman/ops.hpp"
#include "mman/tensor.hpp"

namespace mman::model {

// Ablation variants: nA drops the social-impact decoder, nH drops the
// price modality, oC runs on text alone, oH runs on price history alone.
enum class Ablation { Full, NoSocial, NoHistory, OnlyText, OnlyHistory };

std::string ablation_name(Ablation a);
Ablation ablation_from_name(const std::string& name);
const std::vector<Ablation>& all_ablations();

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t latent_dim = 512;  // d
    std::size_t heads = 8;         // m
    std::size_t max_posts = 96;    // n
    std::size_t max_tokens = 64;   // s
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 1;
    std::size_t dan_hidden = 0;    // 0 -> latent_dim
    std::size_t ffn_hidden = 0;    // 0 -> latent_dim
    std::size_t capsule_dim = 8;
    std::size_t infer_channels = 16;
    std::size_t cnn_channels = 8;  // CNNpred internal width
    double dropout_rate = 0.2;
    double pe_base = 10000.0;      // c in the time encoding
    double tau_cap_hours = 14.0 * 24.0;
    Ablation ablation = Ablation::Full;

    std::size_t head_dim() const { return latent_dim / heads; }
    std::size_t dan_hidden_dim() const { return dan_hidden ? dan_hidden : latent_dim; }
    std::size_t ffn_hidden_dim() const { return ffn_hidden ? ffn_hidden : latent_dim; }

    // Throws ConfigError on inconsistent dimensions (d % m, even d, the
    // inference conv stack needing head_dim >= 8, vocab present).
    void validate() const;

    // d=32, m=4, n=8, s=12 with 2 encoder layers.
    static ModelConfig desk_preset(std::size_t vocab);
};

struct ParamEntry {
    std::string path;
    Tensor tensor;
    bool decay = false; // weight decay applies to weight matrices only
};

class ModelParams {
public:
    // Fan-in uniform init for weights, zeros for biases, ones for norm gains.
    static ModelParams init(const ModelConfig& config, std::uint64_t seed);

    Tensor at(const std::string& path) const;
    bool has(const std::string& path) const;
    const std::vector<ParamEntry>& entries() const { return entries_; }
    std::vector<ParamEntry>& mutable_entries() { return entries_; }
    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
    void zero_grads();
    std::size_t coordinate_count() const;

    // Deep value copy (for last-good snapshots); layout must match on restore.
    ModelParams clone() const;
    void restore(const ModelParams& snapshot);

private:
    friend ModelParams make_params_for_io(std::vector<ParamEntry> entries);
    std::vector<ParamEntry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
    void reindex();
};

ModelParams make_params_for_io(std::vector<ParamEntry> entries);

// One sample converted to model inputs. Posts are row-aligned across
// token/window/social streams; the mask marks real posts.
struct ModelInput {
    std::vector<std::vector<int>> token_ids; // n rows, each padded to s
    std::vector<Tensor> token_masks;         // n constants of shape {s}
    std::vector<Tensor> windows;             // n constants of shape 7x64
    Tensor social;                           // n x 12 constant
    std::vector<double> tau_hours;           // post age vs reference time
    Mask post_mask;                          // length n
};

ModelInput tensorize(const data::Sample& sample, const ModelConfig& config);

// PE(tau, 2i) = sin(tau / c^(2i/d)), PE(tau, 2i+1) = cos(tau / c^(2i/d)).
Tensor time_positional_encoding(const std::vector<double>& tau_hours, std::size_t d,
                                double c = 10000.0);

struct ForwardTrace {
    std::vector<std::pair<std::string, Tensor>> records;
    void add(const std::string& name, const Tensor& t) { records.emplace_back(name, t); }
    const Tensor* find(const std::string& name) const;
};

struct Capsules {
    Tensor vectors; // 2 x capsule_dim, squashed
    Tensor norms;   // {2}, class probabilities
};

struct ForwardResult {
    Capsules capsules;
    Tensor feature_map; // m x h
};

class Model {
public:
    explicit Model(ModelConfig config);
    const ModelConfig& config() const { return config_; }

    // module pieces, exposed for targeted tests
    Tensor embed_texts(const ModelInput& input, const ModelParams& params) const;   // n x d
    Tensor embed_social(const Tensor& social, const ModelParams& params) const;     // n x d
    Tensor embed_history(const std::vector<Tensor>& windows,
                         const ModelParams& params) const;                          // n x d
    Tensor encode(const Tensor& cs_plus_pe, const Mask& mask, const ModelParams& params,
                  ForwardTrace* trace = nullptr) const;
    Tensor fuse_decode(const Tensor& ae, const Tensor& ce, const Mask& mask,
                       const ModelParams& params, ForwardTrace* trace = nullptr) const;
    std::pair<Tensor, Tensor> inter_attention(const Tensor& h, const Tensor& c,
                                              const Mask& mask, const ModelParams& params,
                                              ForwardTrace* trace = nullptr) const;
    // Returns the raw sigmoid gates (G_H, G_C), each of shape {d}.
    std::pair<Tensor, Tensor> conditioning_gates(const Tensor& h_itd, const Tensor& c_itd,
                                                 const Mask& mask,
                                                 const ModelParams& params) const;
    // Inputs are the updated modality features plus (1+G) gate vectors.
    std::pair<Tensor, Tensor> intra_attention(const Tensor& h_itd, const Tensor& c_itd,
                                              const Tensor& gate_h1, const Tensor& gate_c1,
                                              const Mask& mask, const ModelParams& params,
                                              ForwardTrace* trace = nullptr) const; // n x m x h
    Tensor final_fusion(const Tensor& h_ind, const Tensor& c_ind, const Mask& mask) const;
    Capsules infer(const Tensor& feature_map, const ModelParams& params) const;

    Tensor margin_loss(const Tensor& norms, int label) const;
    Tensor total_loss(const ForwardResult& result, int label, const ModelParams& params) const;

    ForwardResult forward(const ModelInput& input, const ModelParams& params, bool training,
                          std::mt19937_64* dropout_rng, ForwardTrace* trace = nullptr) const;

private:
    ModelConfig config_;

    Tensor attention_block(const Tensor& q_src, const Tensor& k_src, const Tensor& v_src,
                           const std::string& prefix, const Mask& mask,
                           const ModelParams& params, ForwardTrace* trace,
                           const std::string& trace_name) const;
    Tensor ffn_block(const Tensor& x, const std::string& prefix,
                     const ModelParams& params) const;
    Tensor reshape_pooled_to_heads(const Tensor& pooled) const;
};

// margin-loss constants
inline constexpr double kMarginUpper = 0.9;
inline constexpr double kMarginLower = 0.1;
inline constexpr double kMarginLambda = 0.5;
inline constexpr double kReconScale = 0.0005;

} // namespace mman::model
