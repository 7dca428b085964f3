#include "prelora/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "prelora/report_io.hpp"

namespace prelora {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'R', 'E', 'L', 'O', 'R', 'A', '\0'};
constexpr std::size_t kHeaderBytes = sizeof kMagic + 4 + 8 + 8;

json tensor_to_json(const Tensor& t) {
    const auto data = t.data();
    std::vector<std::uint8_t> raw(data.size() * sizeof(double));
    std::memcpy(raw.data(), data.data(), raw.size());
    return {{"shape", t.shape()}, {"data", json::binary(std::move(raw))}};
}

Tensor tensor_from_json(const json& j) {
    Shape shape = j.at("shape").get<Shape>();
    const auto& raw = j.at("data").get_binary();
    if (raw.size() != shape_numel(shape) * sizeof(double))
        throw CheckpointError("tensor payload size does not match shape " + shape_to_string(shape));
    std::vector<double> values(shape_numel(shape));
    std::memcpy(values.data(), raw.data(), raw.size());
    return Tensor(std::move(shape), std::move(values));
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof v);
}

template <typename T>
T get(std::span<const std::uint8_t> bytes, std::size_t offset) {
    T v;
    std::memcpy(&v, bytes.data() + offset, sizeof v);
    return v;
}

json state_to_json(const RunConfig& config, const TrainState& st) {
    json params = json::array();
    for (const auto& p : st.model.parameters())
        params.push_back({{"name", p.name}, {"requires_grad", p.requires_grad}, {"value", tensor_to_json(p.value)}});

    json slots = json::object();
    for (const auto& [name, s] : st.optimizer.slots())
        slots[name] = {{"m", tensor_to_json(s.first_moment)}, {"v", tensor_to_json(s.second_moment)}, {"steps", s.steps}};

    json windows = json::array(), buffer = json::array(), records = json::array(), trace = json::array(),
         events = json::array();
    for (const auto& w : st.ledger.windows()) windows.push_back(to_json(w));
    for (const auto& s : st.ledger.open_epochs()) buffer.push_back(to_json(s));
    for (const auto& r : st.records) records.push_back(to_json(r));
    for (const auto& s : st.trace) trace.push_back(to_json(s));
    for (const auto& e : st.events) events.push_back(to_json(e));

    const auto last = st.ledger.last_epoch();
    return {{"config", config_to_json(config)},
            {"phase", phase_name(st.phase)},
            {"next_epoch", st.next_epoch},
            {"params", params},
            {"optimizer", {{"slots", slots}}},
            {"ledger",
             {{"window_size", st.ledger.window_size()},
              {"windows", windows},
              {"buffer", buffer},
              {"last_epoch", last ? json(*last) : json(nullptr)}}},
            {"switch", to_json(st.switch_info)},
            {"records", records},
            {"trace", trace},
            {"events", events}};
}

Checkpoint state_from_json(const json& doc) {
    RunConfig cfg = config_from_json(doc.at("config"));
    SwitchInfo sw = switch_info_from_json(doc.at("switch"));

    Model model = build_model(cfg.model);
    if (!sw.applied_ranks.empty())
        inject(model, cfg.gate.roles, RankPlan{sw.applied_ranks}, LoraOptions{cfg.ranks.scaling, 0, std::nullopt});
    const auto& saved = doc.at("params");
    if (saved.size() != model.parameters().size())
        throw CheckpointError("checkpoint holds " + std::to_string(saved.size()) + " parameters, model has " +
                              std::to_string(model.parameters().size()));
    for (const auto& p : saved) {
        const auto name = p.at("name").get<std::string>();
        Parameter* target = model.find_parameter(name);
        if (!target) throw CheckpointError("checkpoint parameter '" + name + "' does not exist in the model");
        Tensor value = tensor_from_json(p.at("value"));
        if (value.shape() != target->value.shape())
            throw CheckpointError("parameter '" + name + "' has shape " + shape_to_string(value.shape()) +
                                  ", model expects " + shape_to_string(target->value.shape()));
        target->value = std::move(value);
        target->requires_grad = p.at("requires_grad").get<bool>();
    }

    Adam opt(cfg.optimizer.adam);
    for (const auto& [name, s] : doc.at("optimizer").at("slots").items()) {
        if (!model.find_parameter(name)) throw CheckpointError("optimizer slot for unknown parameter '" + name + "'");
        opt.slots()[name] = AdamSlot{tensor_from_json(s.at("m")), tensor_from_json(s.at("v")), s.at("steps").get<std::uint64_t>()};
    }

    const auto& lj = doc.at("ledger");
    std::vector<WindowStats> windows;
    std::vector<EpochSnapshot> buffer;
    for (const auto& w : lj.at("windows")) windows.push_back(window_from_json(w));
    for (const auto& s : lj.at("buffer")) buffer.push_back(snapshot_from_json(s));
    std::optional<int> last;
    if (!lj.at("last_epoch").is_null()) last = lj.at("last_epoch").get<int>();

    TrainState st{std::move(model),
                  std::move(opt),
                  parse_phase(doc.at("phase").get<std::string>()),
                  doc.at("next_epoch").get<int>(),
                  TelemetryLedger::from_parts(lj.at("window_size").get<std::size_t>(), std::move(windows),
                                              std::move(buffer), last),
                  std::move(sw),
                  {},
                  {},
                  {}};
    for (const auto& r : doc.at("records")) st.records.push_back(epoch_record_from_json(r));
    for (const auto& s : doc.at("trace")) st.trace.push_back(snapshot_from_json(s));
    for (const auto& e : doc.at("events")) st.events.push_back(event_from_json(e));
    if (st.records.size() != static_cast<std::size_t>(st.next_epoch))
        throw CheckpointError("checkpoint has " + std::to_string(st.records.size()) + " epoch records but next epoch " +
                              std::to_string(st.next_epoch));
    return {std::move(cfg), std::move(st)};
}

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::vector<std::uint8_t> encode_checkpoint(const RunConfig& config, const TrainState& state) {
    const std::vector<std::uint8_t> payload = json::to_cbor(state_to_json(config, state));
    std::vector<std::uint8_t> out(kMagic, kMagic + sizeof kMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, fnv1a64(payload));
    put<std::uint64_t>(out, payload.size());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
        throw CheckpointError("not a checkpoint file (bad magic)");
    const auto version = get<std::uint32_t>(bytes, 8);
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    const auto checksum = get<std::uint64_t>(bytes, 12);
    const auto length = get<std::uint64_t>(bytes, 20);
    if (length != bytes.size() - kHeaderBytes)
        throw CheckpointError("checkpoint is truncated or has trailing bytes");
    const auto payload = bytes.subspan(kHeaderBytes);
    if (fnv1a64(payload) != checksum) throw CheckpointError("checkpoint checksum mismatch (corrupt file)");
    try {
        return state_from_json(json::from_cbor(payload.begin(), payload.end()));
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint payload: ") + e.what());
    }
}

void save_checkpoint(const fs::path& path, const RunConfig& config, const TrainState& state) {
    const auto bytes = encode_checkpoint(config, state);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw CheckpointError("checkpoint " + path.string() + " does not exist");
    const auto bytes = read_file_bytes(path);
    return decode_checkpoint(bytes);
}

}  // namespace prelora
