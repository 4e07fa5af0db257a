#include "settings.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>

#include "hmar/errors.hpp"

namespace hmar::cli {

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || end != value.data() + value.size())
        throw DomainError("setting '" + key + "': cannot parse '" + value + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw DomainError("setting '" + key + "': expected true or false, got '" + value + "'");
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

using Setter = std::function<void(Settings&, const std::string&, const std::string&)>;

template <typename T, typename Field>
Setter number(Field field) {
    return [field](Settings& s, const std::string& k, const std::string& v) { field(s) = parse_number<T>(k, v); };
}

template <typename Field>
Setter text(Field field) {
    return [field](Settings& s, const std::string&, const std::string& v) { field(s) = v; };
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"bits",
         [](Settings& s, const std::string& k, const std::string& v) {
             s.train.bits = s.model.bits = parse_number<std::size_t>(k, v);
         }},
        {"epochs_per_stage", number<std::size_t>([](Settings& s) -> auto& { return s.train.epochs_per_stage; })},
        {"batch_size", number<std::size_t>([](Settings& s) -> auto& { return s.train.batch_size; })},
        {"lr", number<double>([](Settings& s) -> auto& { return s.train.lr; })},
        {"weight_decay", number<double>([](Settings& s) -> auto& { return s.train.weight_decay; })},
        {"lambda_reg", number<double>([](Settings& s) -> auto& { return s.train.lambda_reg; })},
        {"seed", number<std::uint64_t>([](Settings& s) -> auto& { return s.train.seed; })},
        {"beta1", number<double>([](Settings& s) -> auto& { return s.train.beta1; })},
        {"beta2", number<double>([](Settings& s) -> auto& { return s.train.beta2; })},
        {"adam_eps", number<double>([](Settings& s) -> auto& { return s.train.adam_eps; })},
        {"eval_each_epoch",
         [](Settings& s, const std::string& k, const std::string& v) { s.train.eval_each_epoch = parse_bool(k, v); }},
        {"input_size", number<std::size_t>([](Settings& s) -> auto& { return s.model.backbone.input_size; })},
        {"in_channels", number<std::size_t>([](Settings& s) -> auto& { return s.model.backbone.in_channels; })},
        {"shallow_channels", number<std::size_t>([](Settings& s) -> auto& { return s.model.backbone.shallow_channels; })},
        {"deep_channels", number<std::size_t>([](Settings& s) -> auto& { return s.model.backbone.deep_channels; })},
        {"blocks_shallow", number<std::size_t>([](Settings& s) -> auto& { return s.model.backbone.blocks_shallow; })},
        {"blocks_deep", number<std::size_t>([](Settings& s) -> auto& { return s.model.backbone.blocks_deep; })},
        {"num_classes", number<std::size_t>([](Settings& s) -> auto& { return s.model.backbone.num_classes; })},
        {"kan_grid_size", number<int>([](Settings& s) -> auto& { return s.model.kan.grid_size; })},
        {"kan_range", number<double>([](Settings& s) -> auto& { return s.model.kan.range; })},
        {"kan_degree", number<int>([](Settings& s) -> auto& { return s.model.kan.degree; })},
        {"host", text([](Settings& s) -> auto& { return s.service.host; })},
        {"port", number<int>([](Settings& s) -> auto& { return s.service.port; })},
        {"checkpoint", text([](Settings& s) -> auto& { return s.service.checkpoint; })},
        {"code_db", text([](Settings& s) -> auto& { return s.service.code_db; })},
        {"manifest", text([](Settings& s) -> auto& { return s.service.manifest; })},
        {"cache_dir", text([](Settings& s) -> auto& { return s.service.cache_dir; })},
        {"top_k_global", number<std::size_t>([](Settings& s) -> auto& { return s.service.top_k_global; })},
        {"top_n_local", number<std::size_t>([](Settings& s) -> auto& { return s.service.top_n_local; })},
        {"alpha", number<double>([](Settings& s) -> auto& { return s.service.alpha; })},
    };
    return table;
}

} // namespace

void apply_setting(Settings& settings, const std::string& key, const std::string& value) {
    const auto it = setters().find(key);
    if (it == setters().end()) throw DomainError("unknown setting '" + key + "'");
    it->second(settings, key, value);
    settings.assigned.insert(key);
}

void apply_config_file(Settings& settings, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config " + path.string());
    std::string line;
    for (int number = 1; std::getline(in, line); ++number) {
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError(path.string() + ":" + std::to_string(number) + ": expected key = value");
        try {
            apply_setting(settings, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const DomainError& e) {
            throw FormatError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
}

std::vector<std::string> setting_keys() {
    std::vector<std::string> keys;
    for (const auto& [key, setter] : setters()) keys.push_back(key);
    return keys;
}

} // namespace hmar::cli
