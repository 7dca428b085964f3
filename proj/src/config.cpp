#include "prelora/config.hpp"

#include <fstream>
#include <set>

namespace prelora {

using nlohmann::json;

std::string_view run_mode_name(RunMode mode) noexcept { return mode == RunMode::baseline ? "baseline" : "prelora"; }

namespace {

class Reader {
public:
    Reader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
        if (!node_.is_object()) throw ConfigError(where() + ": expected an object");
    }

    void allow(std::initializer_list<const char*> keys) const {
        std::set<std::string> ok(keys.begin(), keys.end());
        for (const auto& [key, _] : node_.items())
            if (!ok.contains(key)) throw ConfigError(join(key) + ": unknown key");
    }

    template <typename T>
    void get(const char* key, T& out) const {
        if (!node_.contains(key)) return;
        const json& v = node_.at(key);
        try {
            if constexpr (std::is_same_v<T, double>) {
                if (!v.is_number()) throw ConfigError("");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_integer()) throw ConfigError("");
                if constexpr (std::is_unsigned_v<T>)
                    if (v.get<std::int64_t>() < 0 && !v.is_number_unsigned()) throw ConfigError("");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw ConfigError("");
            }
            out = v.get<T>();
        } catch (const std::exception&) {
            throw ConfigError(join(key) + ": wrong type (" + std::string(v.type_name()) + ")");
        }
    }

    bool has(const char* key) const { return node_.contains(key); }
    Reader child(const char* key) const { return Reader(node_.at(key), join(key)); }
    const json& raw(const char* key) const { return node_.at(key); }
    std::string join(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }

private:
    std::string where() const { return path_.empty() ? "<root>" : path_; }

    const json& node_;
    std::string path_;
};

void rethrow_with_key(const std::string& key, const std::function<void()>& f) {
    try {
        f();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        const std::string msg = e.what();
        throw ConfigError(msg.starts_with(key) ? msg : key + ": " + msg);
    }
}

}  // namespace

void RunConfig::validate() const {
    rethrow_with_key("model", [&] { model.validate(); });
    rethrow_with_key("gate", [&] { gate.validate(); });
    rethrow_with_key("ranks", [&] { (void)RankLadder::build(ranks.r_min, ranks.r_max); });
    if (!(ranks.scaling > 0.0)) throw ConfigError("ranks.scaling: must be > 0");
    if (optimizer.batch_size == 0) throw ConfigError("optimizer.batch_size: must be positive");
    if (!(optimizer.adam.learning_rate >= 0.0)) throw ConfigError("optimizer.learning_rate: must be >= 0");
    if (!(optimizer.adam.beta1 >= 0.0 && optimizer.adam.beta1 < 1.0)) throw ConfigError("optimizer.beta1: must be in [0, 1)");
    if (!(optimizer.adam.beta2 >= 0.0 && optimizer.adam.beta2 < 1.0)) throw ConfigError("optimizer.beta2: must be in [0, 1)");
    if (!(optimizer.adam.epsilon > 0.0)) throw ConfigError("optimizer.epsilon: must be > 0");
    if (warmup_epochs < 0) throw ConfigError("warmup.epochs: must be >= 0");
    if (run.total_epochs <= 0) throw ConfigError("run.total_epochs: must be positive");
    if (run.checkpoint_epoch && (*run.checkpoint_epoch < 0 || *run.checkpoint_epoch >= run.total_epochs))
        throw ConfigError("run.checkpoint_epoch: must lie in [0, total_epochs)");
    if (const auto* s = std::get_if<SyntheticSpec>(&data)) {
        if (s->num_examples == 0) throw ConfigError("data.num_examples: must be positive");
        if (s->input_dim <= 0) throw ConfigError("data.input_dim: must be positive");
        if (s->num_classes <= 0) throw ConfigError("data.num_classes: must be positive");
        if (!(s->cluster_std >= 0.0)) throw ConfigError("data.cluster_std: must be >= 0");
        if (!(s->label_noise >= 0.0 && s->label_noise <= 1.0)) throw ConfigError("data.label_noise: must be in [0, 1]");
    } else {
        const auto& idx = std::get<IdxSpec>(data);
        if (!std::filesystem::exists(idx.images_path))
            throw ConfigError("data.images_path: '" + idx.images_path + "' does not exist");
        if (!std::filesystem::exists(idx.labels_path))
            throw ConfigError("data.labels_path: '" + idx.labels_path + "' does not exist");
        if (idx.num_classes <= 0) throw ConfigError("data.num_classes: must be positive");
    }
    if (static_cast<std::size_t>(model.input_dim) != dataset_input_dim(data) ||
        model.num_classes != dataset_num_classes(data))
        throw ConfigError("model: input_dim/num_classes disagree with the dataset");
}

RunConfig config_from_json(const json& doc) {
    RunConfig cfg;
    Reader root(doc, "");
    root.allow({"model", "data", "optimizer", "gate", "warmup", "ranks", "run"});

    if (!root.has("data")) throw ConfigError("data: required section missing");
    {
        Reader d = root.child("data");
        std::string kind = "synthetic";
        d.get("kind", kind);
        if (kind == "synthetic") {
            d.allow({"kind", "num_examples", "input_dim", "num_classes", "seed", "center_scale", "cluster_std", "label_noise"});
            SyntheticSpec s;
            d.get("num_examples", s.num_examples);
            d.get("input_dim", s.input_dim);
            d.get("num_classes", s.num_classes);
            d.get("seed", s.seed);
            d.get("center_scale", s.center_scale);
            d.get("cluster_std", s.cluster_std);
            d.get("label_noise", s.label_noise);
            cfg.data = s;
        } else if (kind == "idx") {
            d.allow({"kind", "images_path", "labels_path", "limit", "num_classes"});
            IdxSpec s;
            if (!d.has("images_path")) throw ConfigError("data.images_path: required for idx data");
            if (!d.has("labels_path")) throw ConfigError("data.labels_path: required for idx data");
            d.get("images_path", s.images_path);
            d.get("labels_path", s.labels_path);
            d.get("limit", s.limit);
            d.get("num_classes", s.num_classes);
            cfg.data = s;
        } else {
            throw ConfigError("data.kind: expected 'synthetic' or 'idx', got '" + kind + "'");
        }
    }

    if (root.has("model")) {
        Reader m = root.child("model");
        m.allow({"num_layers", "hidden_dim", "num_heads", "mlp_dim", "num_tokens", "seed"});
        m.get("num_layers", cfg.model.num_layers);
        m.get("hidden_dim", cfg.model.hidden_dim);
        m.get("num_heads", cfg.model.num_heads);
        m.get("mlp_dim", cfg.model.mlp_dim);
        m.get("num_tokens", cfg.model.num_tokens);
        m.get("seed", cfg.model.seed);
    }
    if (root.has("optimizer")) {
        Reader o = root.child("optimizer");
        o.allow({"learning_rate", "beta1", "beta2", "epsilon", "batch_size"});
        o.get("learning_rate", cfg.optimizer.adam.learning_rate);
        o.get("beta1", cfg.optimizer.adam.beta1);
        o.get("beta2", cfg.optimizer.adam.beta2);
        o.get("epsilon", cfg.optimizer.adam.epsilon);
        o.get("batch_size", cfg.optimizer.batch_size);
    }
    if (root.has("gate")) {
        Reader g = root.child("gate");
        g.allow({"k", "m", "tau", "zeta", "roles"});
        g.get("k", cfg.gate.k);
        g.get("m", cfg.gate.m);
        g.get("tau", cfg.gate.tau);
        g.get("zeta", cfg.gate.zeta);
        if (g.has("roles")) {
            const json& roles = g.raw("roles");
            if (!roles.is_array()) throw ConfigError("gate.roles: expected an array of role names");
            std::vector<Role> parsed;
            for (const auto& r : roles) {
                if (!r.is_string()) throw ConfigError("gate.roles: expected role names");
                rethrow_with_key("gate.roles", [&] { parsed.push_back(parse_role(r.get<std::string>())); });
            }
            rethrow_with_key("gate.roles", [&] { cfg.gate.roles = TargetModuleSet(std::move(parsed)); });
        }
    }
    if (root.has("warmup")) {
        Reader w = root.child("warmup");
        w.allow({"epochs"});
        w.get("epochs", cfg.warmup_epochs);
    }
    if (root.has("ranks")) {
        Reader r = root.child("ranks");
        r.allow({"r_min", "r_max", "scaling", "degenerate_rule"});
        r.get("r_min", cfg.ranks.r_min);
        r.get("r_max", cfg.ranks.r_max);
        r.get("scaling", cfg.ranks.scaling);
        if (r.has("degenerate_rule")) {
            std::string rule;
            r.get("degenerate_rule", rule);
            rethrow_with_key("ranks.degenerate_rule", [&] { cfg.ranks.degenerate_rule = parse_degenerate_rule(rule); });
        }
    }
    if (root.has("run")) {
        Reader r = root.child("run");
        r.allow({"total_epochs", "seed", "mode", "output_dir", "checkpoint_epoch"});
        r.get("total_epochs", cfg.run.total_epochs);
        r.get("seed", cfg.run.seed);
        r.get("output_dir", cfg.run.output_dir);
        if (r.has("mode")) {
            std::string mode;
            r.get("mode", mode);
            if (mode == "baseline")
                cfg.run.mode = RunMode::baseline;
            else if (mode == "prelora")
                cfg.run.mode = RunMode::prelora;
            else
                throw ConfigError("run.mode: expected 'baseline' or 'prelora', got '" + mode + "'");
        }
        if (r.has("checkpoint_epoch") && !r.raw("checkpoint_epoch").is_null()) {
            int e = 0;
            r.get("checkpoint_epoch", e);
            cfg.run.checkpoint_epoch = e;
        }
    }

    if (const auto* s = std::get_if<SyntheticSpec>(&cfg.data)) {
        cfg.model.input_dim = s->input_dim;
        cfg.model.num_classes = s->num_classes;
    } else {
        const auto& idx = std::get<IdxSpec>(cfg.data);
        if (!std::filesystem::exists(idx.images_path))
            throw ConfigError("data.images_path: '" + idx.images_path + "' does not exist");
        rethrow_with_key("data.images_path", [&] { cfg.model.input_dim = static_cast<int>(dataset_input_dim(cfg.data)); });
        cfg.model.num_classes = idx.num_classes;
    }
    cfg.validate();
    return cfg;
}

json config_to_json(const RunConfig& cfg) {
    json doc;
    doc["model"] = {{"num_layers", cfg.model.num_layers}, {"hidden_dim", cfg.model.hidden_dim},
                    {"num_heads", cfg.model.num_heads},   {"mlp_dim", cfg.model.mlp_dim},
                    {"num_tokens", cfg.model.num_tokens}, {"seed", cfg.model.seed}};
    if (const auto* s = std::get_if<SyntheticSpec>(&cfg.data)) {
        doc["data"] = {{"kind", "synthetic"},          {"num_examples", s->num_examples}, {"input_dim", s->input_dim},
                       {"num_classes", s->num_classes}, {"seed", s->seed},                 {"center_scale", s->center_scale},
                       {"cluster_std", s->cluster_std}, {"label_noise", s->label_noise}};
    } else {
        const auto& idx = std::get<IdxSpec>(cfg.data);
        doc["data"] = {{"kind", "idx"},
                       {"images_path", idx.images_path},
                       {"labels_path", idx.labels_path},
                       {"limit", idx.limit},
                       {"num_classes", idx.num_classes}};
    }
    doc["optimizer"] = {{"learning_rate", cfg.optimizer.adam.learning_rate},
                        {"beta1", cfg.optimizer.adam.beta1},
                        {"beta2", cfg.optimizer.adam.beta2},
                        {"epsilon", cfg.optimizer.adam.epsilon},
                        {"batch_size", cfg.optimizer.batch_size}};
    json roles = json::array();
    for (Role r : cfg.gate.roles.roles()) roles.push_back(std::string(role_name(r)));
    doc["gate"] = {{"k", cfg.gate.k}, {"m", cfg.gate.m}, {"tau", cfg.gate.tau}, {"zeta", cfg.gate.zeta}, {"roles", roles}};
    doc["warmup"] = {{"epochs", cfg.warmup_epochs}};
    doc["ranks"] = {{"r_min", cfg.ranks.r_min},
                    {"r_max", cfg.ranks.r_max},
                    {"scaling", cfg.ranks.scaling},
                    {"degenerate_rule", std::string(degenerate_rule_name(cfg.ranks.degenerate_rule))}};
    doc["run"] = {{"total_epochs", cfg.run.total_epochs},
                  {"seed", cfg.run.seed},
                  {"mode", std::string(run_mode_name(cfg.run.mode))},
                  {"output_dir", cfg.run.output_dir},
                  {"checkpoint_epoch", cfg.run.checkpoint_epoch ? json(*cfg.run.checkpoint_epoch) : json(nullptr)}};
    return doc;
}

void apply_overrides(json& doc, std::span<const std::string> overrides) {
    for (const auto& item : overrides) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + item + "': expected key=value");
        const std::string key = item.substr(0, eq);
        const std::string text = item.substr(eq + 1);
        json value = json::parse(text, nullptr, false);
        if (value.is_discarded()) value = text;

        json* node = &doc;
        std::size_t start = 0;
        while (true) {
            const auto dot = key.find('.', start);
            const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (part.empty()) throw ConfigError("override '" + item + "': empty key segment");
            if (!node->is_object()) *node = json::object();
            node = &(*node)[part];
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        *node = std::move(value);
    }
}

RunConfig parse_config(const std::filesystem::path& path, std::span<const std::string> overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file '" + path.string() + "' cannot be opened");
    json doc = json::parse(in, nullptr, false, true);
    if (doc.is_discarded()) throw ConfigError("config file '" + path.string() + "': malformed JSON");
    apply_overrides(doc, overrides);
    return config_from_json(doc);
}

}  // namespace prelora
