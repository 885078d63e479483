#pragma once

// Run configuration. Config files hold one `key = value` per line with `#`
// comments; any key can be overridden on the command line via --set key=value.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace deskvis {

struct RunConfig {
    // model
    std::size_t channels = 64;
    std::size_t heads = 4;
    std::size_t levels = 3;
    std::size_t frames = 6;  // clip size tau
    std::size_t enc_layers = 2;
    std::size_t dec_layers = 3;
    std::size_t queries_per_frame = 10;
    std::size_t num_classes = 3;
    std::size_t mask_head_width = 32;
    std::size_t k_curr = 4;
    std::size_t k_temp = 4;

    // inference
    std::size_t stride = 4;  // clip stride S
    std::size_t topk = 10;

    // synthetic data
    std::size_t canvas = 64;
    std::size_t train_sequences = 8;
    std::size_t sequence_frames = 6;
    std::size_t min_objects = 2;
    std::size_t max_objects = 3;
    double min_size = 0.10;
    double max_size = 0.15;
    double max_speed = 0.04;
    bool force_crossing = false;
    bool same_class = false;
    double visibility_threshold = 0.1;

    // optimization
    std::size_t iterations = 2000;
    double lr = 1e-4;
    double backbone_lr = 1e-5;
    double grad_clip = 0.1;
    bool learnable_backbone = false;

    // losses
    double lambda_class = 1.0;
    double lambda_l1 = 5.0;
    double lambda_giou = 2.0;
    double lambda_dice = 1.0;
    double lambda_mask = 1.0;
    double no_object_weight = 0.1;

    // stitching
    double sigma_mask = 1.0;
    double sigma_class = 1.0;
    double sigma_score = 1.0;

    // seeds
    std::uint64_t seed = 1;
    std::uint64_t data_seed = 100;
    std::uint64_t backbone_seed = 7;

    void validate() const {
        if (stride == 0 || frames <= stride)
            throw std::invalid_argument("config: clips must overlap (need frames > stride >= 1, got frames=" +
                                        std::to_string(frames) + " stride=" + std::to_string(stride) + ")");
        if (channels % heads != 0) throw std::invalid_argument("config: channels not divisible by heads");
        if (channels % 4 != 0) throw std::invalid_argument("config: channels must be divisible by 4");
        if (levels == 0 || (canvas >> (2 + levels - 1)) < 1)
            throw std::invalid_argument("config: too many pyramid levels for the canvas");
        if (k_curr == 0) throw std::invalid_argument("config: k_curr must be at least 1");
        if (sequence_frames < frames)
            throw std::invalid_argument("config: sequences shorter than the clip size");
    }

    using Setter = std::function<void(RunConfig&, const std::string&)>;

    static const std::map<std::string, Setter>& setters() {
        auto u = [](std::size_t RunConfig::*f) {
            return [f](RunConfig& c, const std::string& v) { c.*f = std::stoul(v); };
        };
        auto d = [](double RunConfig::*f) {
            return [f](RunConfig& c, const std::string& v) { c.*f = std::stod(v); };
        };
        auto b = [](bool RunConfig::*f) {
            return [f](RunConfig& c, const std::string& v) {
                if (v == "true" || v == "1")
                    c.*f = true;
                else if (v == "false" || v == "0")
                    c.*f = false;
                else
                    throw std::invalid_argument("config: boolean expected, got '" + v + "'");
            };
        };
        auto s = [](std::uint64_t RunConfig::*f) {
            return [f](RunConfig& c, const std::string& v) { c.*f = std::stoull(v); };
        };
        static const std::map<std::string, Setter> table = {
            {"channels", u(&RunConfig::channels)},
            {"heads", u(&RunConfig::heads)},
            {"levels", u(&RunConfig::levels)},
            {"frames", u(&RunConfig::frames)},
            {"enc_layers", u(&RunConfig::enc_layers)},
            {"dec_layers", u(&RunConfig::dec_layers)},
            {"queries_per_frame", u(&RunConfig::queries_per_frame)},
            {"num_classes", u(&RunConfig::num_classes)},
            {"mask_head_width", u(&RunConfig::mask_head_width)},
            {"k_curr", u(&RunConfig::k_curr)},
            {"k_temp", u(&RunConfig::k_temp)},
            {"stride", u(&RunConfig::stride)},
            {"topk", u(&RunConfig::topk)},
            {"canvas", u(&RunConfig::canvas)},
            {"train_sequences", u(&RunConfig::train_sequences)},
            {"sequence_frames", u(&RunConfig::sequence_frames)},
            {"min_objects", u(&RunConfig::min_objects)},
            {"max_objects", u(&RunConfig::max_objects)},
            {"min_size", d(&RunConfig::min_size)},
            {"max_size", d(&RunConfig::max_size)},
            {"max_speed", d(&RunConfig::max_speed)},
            {"force_crossing", b(&RunConfig::force_crossing)},
            {"same_class", b(&RunConfig::same_class)},
            {"visibility_threshold", d(&RunConfig::visibility_threshold)},
            {"iterations", u(&RunConfig::iterations)},
            {"lr", d(&RunConfig::lr)},
            {"backbone_lr", d(&RunConfig::backbone_lr)},
            {"grad_clip", d(&RunConfig::grad_clip)},
            {"learnable_backbone", b(&RunConfig::learnable_backbone)},
            {"lambda_class", d(&RunConfig::lambda_class)},
            {"lambda_l1", d(&RunConfig::lambda_l1)},
            {"lambda_giou", d(&RunConfig::lambda_giou)},
            {"lambda_dice", d(&RunConfig::lambda_dice)},
            {"lambda_mask", d(&RunConfig::lambda_mask)},
            {"no_object_weight", d(&RunConfig::no_object_weight)},
            {"sigma_mask", d(&RunConfig::sigma_mask)},
            {"sigma_class", d(&RunConfig::sigma_class)},
            {"sigma_score", d(&RunConfig::sigma_score)},
            {"seed", s(&RunConfig::seed)},
            {"data_seed", s(&RunConfig::data_seed)},
            {"backbone_seed", s(&RunConfig::backbone_seed)},
        };
        return table;
    }

    void set(const std::string& key, const std::string& value) {
        auto it = setters().find(key);
        if (it == setters().end()) throw std::invalid_argument("config: unknown key '" + key + "'");
        it->second(*this, value);
    }

    // `key = value` lines; '#' starts a comment.
    void apply_stream(std::istream& is) {
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            std::istringstream ss(line);
            std::string key, eq, value;
            if (!(ss >> key)) continue;  // blank
            if (!(ss >> eq) || eq != "=" || !(ss >> value))
                throw std::invalid_argument("config line " + std::to_string(lineno) +
                                            ": expected 'key = value', got '" + line + "'");
            std::string extra;
            if (ss >> extra)
                throw std::invalid_argument("config line " + std::to_string(lineno) + ": trailing '" + extra + "'");
            set(key, value);
        }
    }

    static RunConfig load(const std::string& path, const std::vector<std::string>& overrides = {}) {
        RunConfig cfg;
        if (!path.empty()) {
            std::ifstream is(path);
            if (!is) throw std::runtime_error("config: cannot open " + path);
            cfg.apply_stream(is);
        }
        for (const std::string& ov : overrides) {
            const auto eq = ov.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("config: --set expects key=value, got '" + ov + "'");
            cfg.set(ov.substr(0, eq), ov.substr(eq + 1));
        }
        cfg.validate();
        return cfg;
    }

    std::string dump() const {
        std::ostringstream os;
        os << "channels = " << channels << "\nheads = " << heads << "\nlevels = " << levels
           << "\nframes = " << frames << "\nenc_layers = " << enc_layers << "\ndec_layers = " << dec_layers
           << "\nqueries_per_frame = " << queries_per_frame << "\nk_curr = " << k_curr
           << "\nk_temp = " << k_temp << "\nstride = " << stride << "\ntopk = " << topk
           << "\niterations = " << iterations << "\nseed = " << seed << "\ndata_seed = " << data_seed
           << "\nbackbone_seed = " << backbone_seed << "\n";
        return os.str();
    }
};

}  // namespace deskvis
