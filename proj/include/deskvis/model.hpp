#pragma once

// The full clip model: toy backbone projections, positional encoding,
// encoder and decoder stacks, prediction heads, and the mask head, with a
// named parameter registry backing the optimizer and TSR1-directory
// checkpoints (bit-exact reload).

#include "deskvis/config.hpp"
#include "deskvis/mask_head.hpp"
#include "deskvis/matching.hpp"
#include "deskvis/synthetic.hpp"
#include "deskvis/tracker.hpp"
#include "deskvis/transformer.hpp"

#include <filesystem>

namespace deskvis {

struct ClipForward {
    TokenLayout layout{1, {}};
    Tensor memory;  // encoded tokens [P, C]
    std::vector<DecoderLayerOutput> outputs;
};

class VisModel {
  public:
    RunConfig cfg;
    SamplingSchedule schedule;
    ToyBackbone backbone;
    PositionalEncoding pos;
    std::vector<EncoderLayerParams> encoder;
    DecoderParams decoder;
    MaskHeadParams mask_head;

    explicit VisModel(const RunConfig& config) : cfg(config) {
        cfg.validate();
        schedule = SamplingSchedule{cfg.frames, cfg.k_curr, cfg.k_temp};
        std::mt19937_64 rng(cfg.seed);
        backbone = ToyBackbone::init(cfg.channels, cfg.levels, cfg.backbone_seed, cfg.learnable_backbone);
        pos = PositionalEncoding::init(cfg.channels, cfg.frames, level_dims());
        for (std::size_t i = 0; i < cfg.enc_layers; ++i)
            encoder.push_back(
                EncoderLayerParams::init(cfg.channels, cfg.heads, cfg.levels, cfg.frames, schedule, rng));
        decoder = DecoderParams::init(cfg.channels, cfg.heads, cfg.levels, cfg.frames,
                                      cfg.queries_per_frame, cfg.dec_layers, cfg.num_classes, schedule, rng);
        mask_head = MaskHeadParams::init(cfg.channels, cfg.levels, cfg.heads, cfg.mask_head_width, rng);
    }

    std::vector<std::pair<std::size_t, std::size_t>> level_dims() const {
        std::vector<std::pair<std::size_t, std::size_t>> dims;
        for (std::size_t l = 0; l < cfg.levels; ++l) {
            const std::size_t d = cfg.canvas >> (2 + l);
            dims.push_back({d, d});
        }
        return dims;
    }

    template <typename Fn>
    void visit(Fn&& fn) {
        if (cfg.learnable_backbone) backbone.visit("backbone", fn);
        pos.visit("pos", fn);
        for (std::size_t i = 0; i < encoder.size(); ++i)
            encoder[i].visit("enc" + std::to_string(i), fn);
        decoder.visit("dec", fn);
        mask_head.visit("mask", fn);
    }

    std::vector<std::pair<std::string, Tensor*>> parameters() {
        std::vector<std::pair<std::string, Tensor*>> out;
        visit([&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
        return out;
    }

    ClipForward forward_clip(const FeatureClip& clip, const DecodeTrace* replay = nullptr,
                             DecodeTrace* capture = nullptr) const {
        ClipForward fwd;
        fwd.layout = TokenLayout(clip.frames, clip.level_dims);
        Tensor tokens = clip_to_tokens(clip);
        fwd.memory = encoder.empty()
                         ? tokens
                         : encode_tokens(std::move(tokens), pos.tokens(fwd.layout), fwd.layout, encoder, schedule);
        fwd.outputs = decode(decoder, fwd.memory, fwd.layout, schedule, replay, capture);
        return fwd;
    }

    // Mask logits for the given query rows of one decoder layer's embeddings.
    Tensor predict_masks(const ClipForward& fwd, const Tensor& raw_finest,
                         const std::vector<std::size_t>& query_rows, std::size_t layer) const {
        Tensor emb = filter_positive(fwd.outputs.at(layer).embeddings, query_rows);
        std::vector<std::size_t> frames;
        frames.reserve(query_rows.size());
        for (std::size_t row : query_rows) frames.push_back(row / cfg.queries_per_frame);
        AttentionMapStack maps = compute_attention_maps(emb, frames, fwd.memory, fwd.layout, mask_head);
        return mask_head_forward(fwd.memory, fwd.layout, raw_finest, maps, frames, mask_head);
    }
};

// ---------------------------------------------------------------------------
// Checkpoints: a directory of TSR1 tensors plus a structured-text manifest.

inline void save_checkpoint(const std::string& dir, VisModel& model,
                            const std::map<std::string, Tensor>& extra_tensors = {},
                            const std::map<std::string, std::string>& extra_fields = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream manifest(dir + "/manifest.txt");
    if (!manifest) throw std::runtime_error("save_checkpoint: cannot open manifest in " + dir);

    manifest << "hyper channels " << model.cfg.channels << "\nhyper heads " << model.cfg.heads
             << "\nhyper levels " << model.cfg.levels << "\nhyper frames " << model.cfg.frames
             << "\nhyper enc_layers " << model.cfg.enc_layers << "\nhyper dec_layers "
             << model.cfg.dec_layers << "\nhyper queries_per_frame " << model.cfg.queries_per_frame
             << "\nhyper num_classes " << model.cfg.num_classes << "\nhyper mask_head_width "
             << model.cfg.mask_head_width << "\nhyper k_curr " << model.cfg.k_curr << "\nhyper k_temp "
             << model.cfg.k_temp << "\nhyper canvas " << model.cfg.canvas << "\nhyper backbone_seed "
             << model.cfg.backbone_seed << "\nhyper learnable_backbone "
             << (model.cfg.learnable_backbone ? 1 : 0) << "\n";
    for (const auto& [key, value] : extra_fields) manifest << "field " << key << " " << value << "\n";

    auto dump = [&](const std::string& name, const Tensor& t) {
        manifest << "tensor " << name << " " << name << ".tsr";
        for (std::size_t d : t.shape()) manifest << " " << d;
        manifest << "\n";
        save_tensor(dir + "/" + name + ".tsr", t);
    };
    model.visit([&](const std::string& name, Tensor& t) { dump(name, t); });
    for (const auto& [name, t] : extra_tensors) dump(name, t);
}

struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> fields;
    std::map<std::string, std::string> hypers;
};

inline Checkpoint read_checkpoint(const std::string& dir) {
    std::ifstream manifest(dir + "/manifest.txt");
    if (!manifest) throw std::runtime_error("read_checkpoint: cannot open manifest in " + dir);
    Checkpoint ckpt;
    std::string line;
    while (std::getline(manifest, line)) {
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "hyper") {
            std::string key, value;
            ss >> key >> value;
            ckpt.hypers[key] = value;
        } else if (tag == "field") {
            std::string key;
            ss >> key;
            std::string value;
            std::getline(ss, value);
            if (!value.empty() && value[0] == ' ') value.erase(0, 1);
            ckpt.fields[key] = value;
        } else if (tag == "tensor") {
            std::string name, file;
            ss >> name >> file;
            ckpt.tensors[name] = load_tensor(dir + "/" + file);
        }
    }
    return ckpt;
}

// Restores parameters into a model whose configuration must match the
// manifest's hyperparameters.
inline void load_checkpoint(const Checkpoint& ckpt, VisModel& model) {
    auto expect = [&](const std::string& key, std::size_t value) {
        auto it = ckpt.hypers.find(key);
        if (it != ckpt.hypers.end() && std::stoul(it->second) != value)
            throw std::runtime_error("checkpoint: " + key + " is " + it->second + ", model has " +
                                     std::to_string(value));
    };
    expect("channels", model.cfg.channels);
    expect("heads", model.cfg.heads);
    expect("levels", model.cfg.levels);
    expect("frames", model.cfg.frames);
    expect("enc_layers", model.cfg.enc_layers);
    expect("dec_layers", model.cfg.dec_layers);
    expect("queries_per_frame", model.cfg.queries_per_frame);
    expect("num_classes", model.cfg.num_classes);
    expect("k_curr", model.cfg.k_curr);
    expect("k_temp", model.cfg.k_temp);

    model.visit([&](const std::string& name, Tensor& t) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
        if (it->second.shape() != t.shape())
            throw std::runtime_error("checkpoint: tensor " + name + " has shape " +
                                     shape_str(it->second.shape()) + ", expected " + shape_str(t.shape()));
        const bool grad = t.requires_grad();
        t = it->second.clone();
        t.set_requires_grad(grad);
    });
}

// Applies the checkpoint's architecture hyperparameters onto a config.
inline RunConfig config_from_checkpoint(const Checkpoint& ckpt, RunConfig base) {
    auto get = [&](const std::string& key, std::size_t& into) {
        auto it = ckpt.hypers.find(key);
        if (it != ckpt.hypers.end()) into = std::stoul(it->second);
    };
    get("channels", base.channels);
    get("heads", base.heads);
    get("levels", base.levels);
    get("frames", base.frames);
    get("enc_layers", base.enc_layers);
    get("dec_layers", base.dec_layers);
    get("queries_per_frame", base.queries_per_frame);
    get("num_classes", base.num_classes);
    get("mask_head_width", base.mask_head_width);
    get("k_curr", base.k_curr);
    get("k_temp", base.k_temp);
    get("canvas", base.canvas);
    auto it = ckpt.hypers.find("backbone_seed");
    if (it != ckpt.hypers.end()) base.backbone_seed = std::stoull(it->second);
    it = ckpt.hypers.find("learnable_backbone");
    if (it != ckpt.hypers.end()) base.learnable_backbone = it->second == "1";
    return base;
}

}  // namespace deskvis
