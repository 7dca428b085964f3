#include "prelora/report_io.hpp"

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <unistd.h>

namespace prelora {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ReportError("cannot write " + path.string() + ": " + std::strerror(errno));
    return out;
}

void finish(std::ofstream& out, const fs::path& path) {
    out.flush();
    if (!out) throw ReportError("write to " + path.string() + " failed");
}

std::vector<std::string> split(const std::string& line, char sep = ',') {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, sep)) out.push_back(cell);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

double to_double(const std::string& s, const fs::path& path) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ReportError(path.string() + ": not a number: '" + s + "'");
    }
}

struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name, const fs::path& path) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw ReportError(path.string() + ": missing column '" + name + "'");
    }
};

Csv read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ReportError("cannot read " + path.string());
    Csv csv;
    std::string line;
    if (!std::getline(in, line)) throw ReportError(path.string() + ": empty file");
    csv.header = split(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto row = split(line);
        if (row.size() != csv.header.size())
            throw ReportError(path.string() + ": row has " + std::to_string(row.size()) + " cells, header has " +
                              std::to_string(csv.header.size()));
        csv.rows.push_back(std::move(row));
    }
    return csv;
}

template <typename T>
json optional_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

template <typename T>
std::optional<T> optional_from(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<T>();
}

std::vector<Role> report_roles(const RunReport& report) {
    const auto roles = report.config.gate.roles.roles();
    return {roles.begin(), roles.end()};
}

}  // namespace

ModuleAddress parse_address(std::string_view text) {
    const auto dot = text.find('.');
    if (dot == std::string_view::npos || dot == 0) throw ReportError("bad layer address '" + std::string(text) + "'");
    int layer = 0;
    try {
        std::size_t used = 0;
        layer = std::stoi(std::string(text.substr(0, dot)), &used);
        if (used != dot || layer < 0) throw std::invalid_argument("layer");
    } catch (const std::exception&) {
        throw ReportError("bad layer index in address '" + std::string(text) + "'");
    }
    return {layer, parse_role(text.substr(dot + 1))};
}

json ranks_to_json(const std::map<ModuleAddress, int>& ranks) {
    json j = json::object();
    for (const auto& [addr, r] : ranks) j[to_string(addr)] = r;
    return j;
}

std::map<ModuleAddress, int> ranks_from_json(const json& j) {
    std::map<ModuleAddress, int> out;
    for (const auto& [key, v] : j.items()) out[parse_address(key)] = v.get<int>();
    return out;
}

namespace {

json doubles_by_address(const std::map<ModuleAddress, double>& m) {
    json j = json::object();
    for (const auto& [addr, v] : m) j[to_string(addr)] = v;
    return j;
}

std::map<ModuleAddress, double> doubles_by_address(const json& j) {
    std::map<ModuleAddress, double> out;
    for (const auto& [key, v] : j.items()) out[parse_address(key)] = v.get<double>();
    return out;
}

}  // namespace

json to_json(const EpochRecord& r) {
    return {{"epoch", r.epoch},
            {"phase", phase_name(r.phase)},
            {"loss", r.loss},
            {"train_acc", r.train_acc},
            {"wall_s", r.wall_s},
            {"trainable_params", r.trainable_params},
            {"examples_per_s", r.examples_per_s}};
}

EpochRecord epoch_record_from_json(const json& j) {
    EpochRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.phase = parse_phase(j.at("phase").get<std::string>());
    r.loss = j.at("loss").get<double>();
    r.train_acc = j.at("train_acc").get<double>();
    r.wall_s = j.at("wall_s").get<double>();
    r.trainable_params = j.at("trainable_params").get<std::size_t>();
    r.examples_per_s = j.at("examples_per_s").get<double>();
    return r;
}

json to_json(const EpochSnapshot& s) {
    return {{"epoch", s.epoch}, {"loss", s.loss}, {"norms", doubles_by_address(s.layer_norms)}};
}

EpochSnapshot snapshot_from_json(const json& j) {
    return {j.at("epoch").get<int>(), doubles_by_address(j.at("norms")), j.at("loss").get<double>()};
}

json to_json(const WindowStats& w) {
    json roles = json::object();
    for (const auto& [role, v] : w.module_norms) roles[std::string(role_name(role))] = v;
    return {{"index", w.index},     {"first_epoch", w.first_epoch},
            {"last_epoch", w.last_epoch}, {"loss", w.loss},
            {"module_norms", roles}, {"layer_norms", doubles_by_address(w.layer_norms)}};
}

WindowStats window_from_json(const json& j) {
    WindowStats w;
    w.index = j.at("index").get<int>();
    w.first_epoch = j.at("first_epoch").get<int>();
    w.last_epoch = j.at("last_epoch").get<int>();
    w.loss = j.at("loss").get<double>();
    for (const auto& [key, v] : j.at("module_norms").items()) w.module_norms[parse_role(key)] = v.get<double>();
    w.layer_norms = doubles_by_address(j.at("layer_norms"));
    return w;
}

json to_json(const SwitchInfo& s) {
    return {{"gate_pass_epoch", optional_json(s.gate_pass_epoch)},
            {"injection_epoch", optional_json(s.injection_epoch)},
            {"freeze_epoch", optional_json(s.freeze_epoch)},
            {"rank_plan", s.plan ? ranks_to_json(s.plan->ranks) : json(nullptr)},
            {"applied_ranks", ranks_to_json(s.applied_ranks)},
            {"layer_deltas", doubles_by_address(s.layer_deltas)},
            {"warmup_epochs_done", s.warmup_epochs_done}};
}

SwitchInfo switch_info_from_json(const json& j) {
    SwitchInfo s;
    s.gate_pass_epoch = optional_from<int>(j, "gate_pass_epoch");
    s.injection_epoch = optional_from<int>(j, "injection_epoch");
    s.freeze_epoch = optional_from<int>(j, "freeze_epoch");
    if (!j.at("rank_plan").is_null()) s.plan = RankPlan{ranks_from_json(j.at("rank_plan"))};
    s.applied_ranks = ranks_from_json(j.at("applied_ranks"));
    s.layer_deltas = doubles_by_address(j.at("layer_deltas"));
    s.warmup_epochs_done = j.at("warmup_epochs_done").get<int>();
    return s;
}

json to_json(const Event& e) { return {{"epoch", e.epoch}, {"kind", e.kind}, {"detail", e.detail}}; }

Event event_from_json(const json& j) {
    return {j.at("epoch").get<int>(), j.at("kind").get<std::string>(), j.at("detail")};
}

std::size_t training_memory_bytes(std::size_t total_params, std::size_t trainable_params, std::size_t bytes_per_scalar) {
    return (total_params + 3 * trainable_params) * bytes_per_scalar;
}

ReportAggregates compute_aggregates(const RunReport& report) {
    ReportAggregates agg;
    std::map<Phase, std::pair<double, int>> sums;
    for (const auto& r : report.records) {
        sums[r.phase].first += r.wall_s;
        sums[r.phase].second += 1;
        agg.total_wall_s += r.wall_s;
    }
    for (const auto& [phase, s] : sums) agg.mean_epoch_s[phase] = s.first / s.second;
    if (agg.mean_epoch_s.contains(Phase::full) && agg.mean_epoch_s.contains(Phase::lora_only) &&
        agg.mean_epoch_s.at(Phase::lora_only) > 0.0)
        agg.speedup_ratio = agg.mean_epoch_s.at(Phase::full) / agg.mean_epoch_s.at(Phase::lora_only);

    const std::size_t full = report.full_param_count;
    agg.memory_full_bytes = training_memory_bytes(full, full);
    if (report.lora_param_count) {
        const std::size_t lora = *report.lora_param_count;
        agg.param_reduction_ratio = static_cast<double>(lora) / static_cast<double>(full);
        agg.optimizer_state_bytes_saved = full > lora ? 2 * (full - lora) * sizeof(double) : 0;
        agg.memory_lora_bytes = training_memory_bytes(full + lora, lora);
    }
    return agg;
}

json report_to_json(const RunReport& report) {
    const ReportAggregates agg = compute_aggregates(report);
    const SwitchInfo& sw = report.switch_info;

    json mean = json::object();
    for (const auto& [phase, v] : agg.mean_epoch_s) mean[std::string(phase_name(phase))] = v;
    json aggregates = {{"epochs", report.records.size()},
                       {"total_wall_s", agg.total_wall_s},
                       {"mean_epoch_s", mean},
                       {"memory_estimate_bytes",
                        {{"full_training", agg.memory_full_bytes}, {"lora_only", optional_json(agg.memory_lora_bytes)}}}};
    if (agg.speedup_ratio) aggregates["speedup_ratio"] = *agg.speedup_ratio;
    if (agg.param_reduction_ratio) aggregates["param_reduction_ratio"] = *agg.param_reduction_ratio;
    if (agg.optimizer_state_bytes_saved) aggregates["optimizer_state_bytes_saved"] = *agg.optimizer_state_bytes_saved;

    json telemetry = json::array();
    for (const auto& s : report.trace) telemetry.push_back(to_json(s));

    json columns = json::array();
    for (const char* c : kMetricsColumns) columns.push_back(c);

    return {{"format_version", kReportFormatVersion},
            {"metrics_columns", columns},
            {"config", config_to_json(report.config)},
            {"switched", sw.switched()},
            {"gate_pass_epoch", optional_json(sw.gate_pass_epoch)},
            {"injection_epoch", optional_json(sw.injection_epoch)},
            {"freeze_epoch", optional_json(sw.freeze_epoch)},
            {"rank_plan", sw.plan ? ranks_to_json(sw.plan->ranks) : json(nullptr)},
            {"switch", to_json(sw)},
            {"full_param_count", report.full_param_count},
            {"lora_param_count", optional_json(report.lora_param_count)},
            {"aggregates", aggregates},
            {"telemetry", telemetry}};
}

void export_report(const RunReport& report, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ReportError("cannot create " + dir.string() + ": " + ec.message());

    {
        const fs::path p = dir / "metrics.csv";
        auto out = open_out(p);
        for (std::size_t i = 0; i < std::size(kMetricsColumns); ++i) out << (i ? "," : "") << kMetricsColumns[i];
        out << '\n';
        for (const auto& r : report.records)
            out << r.epoch << ',' << phase_name(r.phase) << ',' << fmt(r.loss) << ',' << fmt(r.train_acc) << ','
                << fmt(r.wall_s) << ',' << r.trainable_params << ',' << fmt(r.examples_per_s) << '\n';
        finish(out, p);
    }
    {
        const auto roles = report_roles(report);
        const fs::path p = dir / "windows.csv";
        auto out = open_out(p);
        out << "window,first_epoch,last_epoch,loss";
        for (Role r : roles) out << ",norm_" << role_name(r);
        out << ",loss_pct";
        for (Role r : roles) out << ",delta_pct_" << role_name(r);
        out << '\n';
        for (std::size_t i = 0; i < report.windows.size(); ++i) {
            const WindowStats& w = report.windows[i];
            out << w.index << ',' << w.first_epoch << ',' << w.last_epoch << ',' << fmt(w.loss);
            for (Role r : roles) out << ',' << fmt(w.module_norms.at(r));
            if (i == 0) {
                for (std::size_t c = 0; c <= roles.size(); ++c) out << ',';
            } else {
                const WindowDeltas d = window_deltas(report.windows[i - 1], w);
                out << ',' << fmt(d.loss_pct);
                for (Role r : roles) out << ',' << fmt(d.weight_pct.at(r));
            }
            out << '\n';
        }
        finish(out, p);
    }
    {
        const fs::path p = dir / "deltas.csv";
        auto out = open_out(p);
        out << "layer,role,delta_pct\n";
        for (const auto& [addr, v] : report.switch_info.layer_deltas)
            out << addr.layer << ',' << role_name(addr.role) << ',' << fmt(v) << '\n';
        finish(out, p);
    }
    {
        const fs::path p = dir / "run.json";
        auto out = open_out(p);
        out << report_to_json(report).dump(2) << '\n';
        finish(out, p);
    }
    {
        const fs::path p = dir / "events.log";
        auto out = open_out(p);
        for (const auto& e : report.events) out << to_json(e).dump() << '\n';
        finish(out, p);
    }
}

void emit_plot_data(const RunReport& report, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ReportError("cannot create " + dir.string() + ": " + ec.message());
    const auto roles = report_roles(report);

    {
        const fs::path p = dir / "plot_module_norms.csv";
        auto out = open_out(p);
        out << "epoch";
        for (Role r : roles) out << ',' << role_name(r);
        out << '\n';
        for (const auto& s : report.trace) {
            out << s.epoch;
            for (Role r : roles) {
                double sum = 0.0;
                int n = 0;
                for (const auto& [addr, v] : s.layer_norms)
                    if (addr.role == r) sum += v, ++n;
                out << ',' << fmt(n ? sum / n : 0.0);
            }
            out << '\n';
        }
        finish(out, p);
    }
    {
        const fs::path p = dir / "plot_loss.csv";
        auto out = open_out(p);
        out << "epoch,phase,loss\n";
        for (const auto& r : report.records) out << r.epoch << ',' << phase_name(r.phase) << ',' << fmt(r.loss) << '\n';
        finish(out, p);
    }
    {
        const fs::path p = dir / "plot_query_layers.csv";
        auto out = open_out(p);
        std::vector<ModuleAddress> queries;
        if (!report.trace.empty())
            for (const auto& [addr, v] : report.trace.front().layer_norms)
                if (addr.role == Role::query) queries.push_back(addr);
        out << "epoch";
        for (const auto& a : queries) out << ",layer_" << a.layer;
        out << '\n';
        for (const auto& s : report.trace) {
            out << s.epoch;
            for (const auto& a : queries) out << ',' << fmt(s.layer_norms.at(a));
            out << '\n';
        }
        finish(out, p);
    }
    {
        const fs::path p = dir / "plot_epoch_time.csv";
        auto out = open_out(p);
        out << "epoch,phase,wall_s,examples_per_s\n";
        for (const auto& r : report.records)
            out << r.epoch << ',' << phase_name(r.phase) << ',' << fmt(r.wall_s) << ',' << fmt(r.examples_per_s) << '\n';
        finish(out, p);
    }
}

std::vector<EpochRecord> read_metrics_csv(const fs::path& path) {
    const Csv csv = read_csv(path);
    std::vector<std::size_t> col;
    for (const char* c : kMetricsColumns) col.push_back(csv.column(c, path));
    std::vector<EpochRecord> out;
    for (const auto& row : csv.rows) {
        EpochRecord r;
        r.epoch = static_cast<int>(to_double(row[col[0]], path));
        r.phase = parse_phase(row[col[1]]);
        r.loss = to_double(row[col[2]], path);
        r.train_acc = to_double(row[col[3]], path);
        r.wall_s = to_double(row[col[4]], path);
        r.trainable_params = static_cast<std::size_t>(to_double(row[col[5]], path));
        r.examples_per_s = to_double(row[col[6]], path);
        out.push_back(r);
    }
    return out;
}

std::vector<WindowStats> read_windows_csv(const fs::path& path) {
    const Csv csv = read_csv(path);
    const std::size_t c_index = csv.column("window", path), c_first = csv.column("first_epoch", path),
                      c_last = csv.column("last_epoch", path), c_loss = csv.column("loss", path);
    std::vector<std::pair<Role, std::size_t>> norm_cols;
    for (std::size_t i = 0; i < csv.header.size(); ++i)
        if (csv.header[i].starts_with("norm_")) norm_cols.emplace_back(parse_role(csv.header[i].substr(5)), i);
    if (norm_cols.empty()) throw ReportError(path.string() + ": no norm_<role> columns");

    std::vector<WindowStats> out;
    for (const auto& row : csv.rows) {
        WindowStats w;
        w.index = static_cast<int>(to_double(row[c_index], path));
        w.first_epoch = static_cast<int>(to_double(row[c_first], path));
        w.last_epoch = static_cast<int>(to_double(row[c_last], path));
        w.loss = to_double(row[c_loss], path);
        for (const auto& [role, c] : norm_cols) w.module_norms[role] = to_double(row[c], path);
        if (!out.empty() && (w.index != out.back().index + 1 || w.first_epoch != out.back().last_epoch + 1))
            throw ReportError(path.string() + ": windows are not consecutive at window " + std::to_string(w.index));
        out.push_back(std::move(w));
    }
    return out;
}

std::map<ModuleAddress, double> read_deltas_csv(const fs::path& path) {
    const Csv csv = read_csv(path);
    const std::size_t c_layer = csv.column("layer", path), c_role = csv.column("role", path),
                      c_delta = csv.column("delta_pct", path);
    std::map<ModuleAddress, double> out;
    for (const auto& row : csv.rows) {
        const ModuleAddress addr{static_cast<int>(to_double(row[c_layer], path)), parse_role(row[c_role])};
        if (!out.emplace(addr, to_double(row[c_delta], path)).second)
            throw ReportError(path.string() + ": duplicate entry for " + to_string(addr));
    }
    if (out.empty()) throw ReportError(path.string() + ": no deltas (the run never switched?)");
    return out;
}

RunReport load_report(const fs::path& dir) {
    std::ifstream in(dir / "run.json");
    if (!in) throw ReportError("cannot read " + (dir / "run.json").string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ReportError((dir / "run.json").string() + ": " + e.what());
    }
    if (doc.value("format_version", 0) != kReportFormatVersion)
        throw ReportError("run.json format_version " + doc.value("format_version", json(nullptr)).dump() +
                          " is not supported (expected " + std::to_string(kReportFormatVersion) + ")");
    RunReport r;
    r.config = config_from_json(doc.at("config"));
    r.records = read_metrics_csv(dir / "metrics.csv");
    for (const auto& s : doc.at("telemetry")) r.trace.push_back(snapshot_from_json(s));
    r.switch_info = switch_info_from_json(doc.at("switch"));
    r.full_param_count = doc.at("full_param_count").get<std::size_t>();
    r.lora_param_count = optional_from<std::size_t>(doc, "lora_param_count");
    return r;
}

RunDirLock::RunDirLock(const fs::path& dir) : path_(dir / ".lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ReportError("cannot create " + dir.string() + ": " + ec.message());
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
        throw ReportError("run directory " + dir.string() + " is locked by another run (remove " + path_.string() +
                          " if that run is gone)");
    std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
    std::fclose(f);
}

RunDirLock::~RunDirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

}  // namespace prelora
