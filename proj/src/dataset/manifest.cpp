#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>
#include <numeric>
#include <random>

#include "hmar/dataset.hpp"
#include "hmar/errors.hpp"
#include "hmar/seed.hpp"

namespace hmar {

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json entry_json(const ManifestEntry& e) {
    ordered_json j;
    j["id"] = e.id;
    j["path"] = e.path;
    j["label"] = e.label;
    if (e.box)
        j["box"] = {e.box->x1, e.box->y1, e.box->x2, e.box->y2};
    else
        j["box"] = nullptr;
    return j;
}

ManifestEntry parse_entry(const std::string& line, std::size_t line_no) {
    try {
        const auto j = nlohmann::json::parse(line);
        ManifestEntry e;
        e.id = j.at("id").get<std::uint64_t>();
        e.path = j.at("path").get<std::string>();
        e.label = j.at("label").get<int>();
        if (j.contains("box") && !j.at("box").is_null()) {
            const auto& b = j.at("box");
            if (!b.is_array() || b.size() != 4) throw FormatError("box must be [x1,y1,x2,y2]");
            e.box = BoundingBox{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
        }
        return e;
    } catch (const nlohmann::json::exception& ex) {
        throw FormatError("manifest line " + std::to_string(line_no) + ": " + ex.what());
    } catch (const FormatError& ex) {
        throw FormatError("manifest line " + std::to_string(line_no) + ": " + ex.what());
    }
}

} // namespace

std::filesystem::path Manifest::resolve(const ManifestEntry& e) const {
    const std::filesystem::path p(e.path);
    return p.is_absolute() ? p : base_dir / p;
}

const ManifestEntry& Manifest::find(std::uint64_t id) const {
    for (const auto& e : entries)
        if (e.id == id) return e;
    throw DomainError("no image with id " + std::to_string(id));
}

std::size_t Manifest::num_classes() const {
    int top = -1;
    for (const auto& e : entries) top = std::max(top, e.label);
    return static_cast<std::size_t>(top + 1);
}

Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest " + path.string());
    Manifest m;
    m.base_dir = path.parent_path();
    std::string line;
    std::size_t line_no = 0;
    std::map<std::uint64_t, bool> seen;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        ManifestEntry e = parse_entry(line, line_no);
        if (e.label < 0) throw FormatError("manifest line " + std::to_string(line_no) + ": negative label");
        if (seen[e.id]) throw FormatError("manifest line " + std::to_string(line_no) + ": duplicate id " + std::to_string(e.id));
        seen[e.id] = true;
        m.entries.push_back(std::move(e));
    }
    return m;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    namespace fs = std::filesystem;
    const fs::path dir = fs::absolute(path.parent_path().empty() ? fs::path(".") : path.parent_path()).lexically_normal();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write manifest " + path.string());
    for (const auto& e : manifest.entries) {
        ManifestEntry rel = e;
        const fs::path full = fs::absolute(manifest.resolve(e)).lexically_normal();
        const fs::path r = full.lexically_relative(dir);
        rel.path = (!r.empty() && *r.begin() != "..") ? r.generic_string() : full.generic_string();
        out << entry_json(rel).dump() << '\n';
    }
}

Manifest generate(const SyntheticSpec& spec, std::uint64_t seed, const std::filesystem::path& out_dir) {
    spec.validate();
    std::filesystem::create_directories(out_dir / "images");
    Manifest m;
    m.base_dir = out_dir;
    const std::size_t total = spec.num_classes * spec.images_per_class;
    for (std::size_t id = 0; id < total; ++id) {
        const int label = static_cast<int>(id % spec.num_classes);
        SyntheticImage img = render_synthetic(spec, label, derive_seed(seed, static_cast<std::uint64_t>(id)));
        const std::string rel = "images/" + std::to_string(id) + ".png";
        save_image(out_dir / rel, img.pixels);
        m.entries.push_back({id, rel, label, img.box});
    }
    write_manifest(m, out_dir / "manifest.jsonl");
    return m;
}

Splits split(const Manifest& manifest, std::array<double, 3> ratios, std::uint64_t seed) {
    double total = 0.0;
    for (double r : ratios) {
        if (!(r >= 0.0)) throw DomainError("split ratios must be non-negative");
        total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) throw DomainError("split ratios must sum to 1");
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) by_class[manifest.entries[i].label].push_back(i);

    std::vector<int> which(manifest.entries.size(), 0);
    for (auto& [label, idx] : by_class) {
        std::mt19937_64 rng(derive_seed(seed, "split/" + std::to_string(label)));
        std::shuffle(idx.begin(), idx.end(), rng);
        const double n = static_cast<double>(idx.size());
        const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * n));
        const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(ratios[1] * n)));
        for (std::size_t k = 0; k < idx.size(); ++k) which[idx[k]] = k < n_train ? 0 : (k < n_train + n_val ? 1 : 2);
    }
    Splits s;
    for (Manifest* m : {&s.train, &s.val, &s.test}) m->base_dir = manifest.base_dir;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        Manifest* dst = which[i] == 0 ? &s.train : (which[i] == 1 ? &s.val : &s.test);
        dst->entries.push_back(manifest.entries[i]);
    }
    return s;
}

Tensor load_batch(const Manifest& manifest, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw DomainError("load_batch: no indices");
    std::vector<double> data;
    Shape first;
    for (std::size_t i : indices) {
        if (i >= manifest.entries.size()) throw DomainError("load_batch: index out of range");
        Tensor img = load_image(manifest.resolve(manifest.entries[i]));
        if (first.empty())
            first = img.shape();
        else if (img.shape() != first)
            throw ShapeError("load_batch: image " + shape_string(img.shape()) + " differs from " + shape_string(first));
        data.insert(data.end(), img.data().begin(), img.data().end());
    }
    return Tensor({indices.size(), first[0], first[1], first[2]}, std::move(data));
}

Tensor ImageSet::batch(const std::vector<std::size_t>& indices) const {
    if (indices.empty()) throw DomainError("ImageSet::batch: no indices");
    const std::size_t per = images.size() / std::max<std::size_t>(size(), 1);
    Shape shape = images.shape();
    shape[0] = indices.size();
    std::vector<double> data;
    data.reserve(indices.size() * per);
    for (std::size_t i : indices) {
        if (i >= size()) throw DomainError("ImageSet::batch: index " + std::to_string(i) + " out of range");
        const auto src = images.data().subspan(i * per, per);
        data.insert(data.end(), src.begin(), src.end());
    }
    return Tensor(std::move(shape), std::move(data));
}

ImageSet load_image_set(const Manifest& manifest) {
    if (manifest.entries.empty()) throw DomainError("load_image_set: empty manifest");
    std::vector<std::size_t> all(manifest.entries.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    ImageSet set;
    set.images = load_batch(manifest, all);
    for (const auto& e : manifest.entries) {
        set.labels.push_back(e.label);
        set.ids.push_back(e.id);
        set.boxes.push_back(e.box);
    }
    return set;
}

} // namespace hmar
