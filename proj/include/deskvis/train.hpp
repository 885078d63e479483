#pragma once

// Training loop: clip sampling over synthetic sequences, Hungarian matching
// on the final decoder layer, the cascaded loss stack, Adam with global
// gradient-norm clipping, and a step-decayed learning rate (x0.1 at 60% and
// 90% of the run). Checkpoints carry optimizer moments, the RNG state, and
// the iteration counter, so a resumed run continues the original trajectory.

#include "deskvis/model.hpp"

namespace deskvis {

struct AdamParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
  public:
    AdamParams hp;
    std::size_t step_count = 0;
    std::map<std::string, Tensor> m, v;

    // lr_of(name) supplies the per-group learning rate.
    void step(std::vector<std::pair<std::string, Tensor*>>& params, Tape& tape,
              const std::function<double(const std::string&)>& lr_of, double clip_norm) {
        std::vector<Tensor> grads;
        grads.reserve(params.size());
        double sq_norm = 0.0;
        for (auto& [name, p] : params) {
            Tensor g = tape.grad(*p);
            for (std::size_t i = 0; i < g.size(); ++i) sq_norm += g[i] * g[i];
            grads.push_back(std::move(g));
        }
        const double norm = std::sqrt(sq_norm);
        const double scale = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

        ++step_count;
        const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step_count));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& [name, p] = params[k];
            Tensor& g = grads[k];
            Tensor& mk = m.try_emplace(name, Tensor::zeros(p->shape())).first->second;
            Tensor& vk = v.try_emplace(name, Tensor::zeros(p->shape())).first->second;
            const double lr = lr_of(name);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double gi = g[i] * scale;
                mk[i] = hp.beta1 * mk[i] + (1.0 - hp.beta1) * gi;
                vk[i] = hp.beta2 * vk[i] + (1.0 - hp.beta2) * gi * gi;
                (*p)[i] -= lr * (mk[i] / bc1) / (std::sqrt(vk[i] / bc2) + hp.eps);
            }
        }
    }
};

inline double lr_decay_factor(std::size_t iter, std::size_t total) {
    const double frac = total == 0 ? 0.0 : static_cast<double>(iter) / static_cast<double>(total);
    if (frac >= 0.9) return 0.01;
    if (frac >= 0.6) return 0.1;
    return 1.0;
}

struct TrainResult {
    std::vector<std::string> log_lines;  // one structured record per iteration
    double first_loss = 0.0;
    double final_loss = 0.0;
};

struct TrainState {
    Adam optimizer;
    std::mt19937_64 rng;
    std::size_t start_iteration = 0;
};

// One training iteration on a clip window of one sequence. Returns the loss
// report; gradients are applied in place.
inline LossReport train_step(VisModel& model, const SyntheticSequence& seq, std::size_t t0, Adam& opt,
                             double lr_factor) {
    const RunConfig& cfg = model.cfg;
    FeatureClip clip = clip_window(seq, t0, cfg.frames);
    Tensor raw = raw_window(seq, t0, cfg.frames);
    GroundTruthClip gt = gt_window(seq, t0, cfg.frames);

    LossWeights weights;
    weights.lambda_class = cfg.lambda_class;
    weights.lambda_l1 = cfg.lambda_l1;
    weights.lambda_giou = cfg.lambda_giou;
    weights.lambda_dice = cfg.lambda_dice;
    weights.lambda_mask = cfg.lambda_mask;
    weights.no_object_weight = cfg.no_object_weight;

    Tape tape;
    ClipForward fwd = model.forward_clip(clip);

    SlotPredictions preds = slot_predictions(fwd.outputs.back(), cfg.frames, cfg.queries_per_frame);
    Assignment assign;
    if (!gt.instances.empty()) assign = hungarian(trajectory_match_cost(preds, gt, weights));

    MatchedTargets matched = matched_targets(assign, gt, cfg.queries_per_frame);
    std::map<std::size_t, Tensor> mask_logits;
    for (std::size_t layer : mask_loss_layers(cfg.dec_layers))
        if (!matched.query_rows.empty())
            mask_logits[layer] = model.predict_masks(fwd, raw, matched.query_rows, layer);

    LossReport report;
    Tensor loss = compute_losses(fwd.outputs, assign, gt, weights, cfg.queries_per_frame, mask_logits,
                                 &report);
    if (!std::isfinite(report.total))
        throw std::runtime_error("train_step: non-finite loss " + std::to_string(report.total));

    tape.backward(loss);
    auto params = model.parameters();
    auto lr_of = [&](const std::string& name) {
        const double base = name.rfind("backbone", 0) == 0 ? cfg.backbone_lr : cfg.lr;
        return base * lr_factor;
    };
    opt.step(params, tape, lr_of, cfg.grad_clip);
    return report;
}

// Full training run over a sequence set. `log` receives one line per
// iteration; a non-finite loss dumps diagnostics and aborts.
inline TrainResult train(VisModel& model, const std::vector<SyntheticSequence>& sequences,
                         TrainState& state, std::ostream* log = nullptr) {
    if (sequences.empty()) throw std::invalid_argument("train: no sequences");
    const RunConfig& cfg = model.cfg;
    TrainResult result;

    for (std::size_t iter = state.start_iteration; iter < cfg.iterations; ++iter) {
        const std::size_t seq_idx =
            std::uniform_int_distribution<std::size_t>(0, sequences.size() - 1)(state.rng);
        const SyntheticSequence& seq = sequences[seq_idx];
        const std::size_t max_off = seq.frames() - cfg.frames;
        const std::size_t t0 =
            max_off == 0 ? 0 : std::uniform_int_distribution<std::size_t>(0, max_off)(state.rng);

        LossReport report;
        try {
            report = train_step(model, seq, t0, state.optimizer, lr_decay_factor(iter, cfg.iterations));
        } catch (const std::runtime_error& e) {
            std::string diag = "abort iter=" + std::to_string(iter) + " seq=" + std::to_string(seq_idx) +
                               " offset=" + std::to_string(t0) + " reason=" + e.what();
            if (log) (*log) << diag << "\n" << std::flush;
            result.log_lines.push_back(diag);
            throw std::runtime_error(diag);
        }
        std::string line = report.line(iter) + " seq=" + std::to_string(seq_idx) +
                           " offset=" + std::to_string(t0);
        if (log) (*log) << line << "\n";
        result.log_lines.push_back(std::move(line));
        if (iter == state.start_iteration) result.first_loss = report.total;
        result.final_loss = report.total;
    }
    state.start_iteration = cfg.iterations;
    return result;
}

// ---------------------------------------------------------------------------
// Checkpointing with optimizer and RNG state

inline void save_training_checkpoint(const std::string& dir, VisModel& model, const TrainState& state) {
    std::map<std::string, Tensor> extra;
    for (const auto& [name, t] : state.optimizer.m) extra["opt.m." + name] = t;
    for (const auto& [name, t] : state.optimizer.v) extra["opt.v." + name] = t;
    std::ostringstream rng_text;
    rng_text << state.rng;
    std::map<std::string, std::string> fields{
        {"iteration", std::to_string(state.start_iteration)},
        {"opt_steps", std::to_string(state.optimizer.step_count)},
        {"rng", rng_text.str()},
    };
    save_checkpoint(dir, model, extra, fields);
}

inline TrainState load_training_state(const Checkpoint& ckpt, VisModel& model) {
    load_checkpoint(ckpt, model);
    TrainState state;
    state.rng.seed(model.cfg.seed);
    if (auto it = ckpt.fields.find("rng"); it != ckpt.fields.end()) {
        std::istringstream ss(it->second);
        ss >> state.rng;
    }
    if (auto it = ckpt.fields.find("iteration"); it != ckpt.fields.end())
        state.start_iteration = std::stoul(it->second);
    if (auto it = ckpt.fields.find("opt_steps"); it != ckpt.fields.end())
        state.optimizer.step_count = std::stoul(it->second);
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.rfind("opt.m.", 0) == 0) state.optimizer.m[name.substr(6)] = t.clone();
        if (name.rfind("opt.v.", 0) == 0) state.optimizer.v[name.substr(6)] = t.clone();
    }
    return state;
}

}  // namespace deskvis
