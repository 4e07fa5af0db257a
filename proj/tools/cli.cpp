#include "cli.hpp"

#include <csignal>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "hmar/checkpoint.hpp"
#include "hmar/dataset.hpp"
#include "hmar/errors.hpp"
#include "hmar/gradcheck.hpp"
#include "hmar/retrieval.hpp"
#include "hmar/service.hpp"
#include "hmar/trainer.hpp"
#include "settings.hpp"

namespace hmar::cli {

namespace {

using Json = nlohmann::ordered_json;

/// Failure that is reported with its own kind instead of the exception type.
struct CommandError : std::runtime_error {
    CommandError(std::string kind, const std::string& message) : std::runtime_error(message), kind(std::move(kind)) {}
    std::string kind;
};

void print_error(std::ostream& err, const std::string& kind, const std::string& message) {
    err << Json{{"error", kind}, {"message", message}}.dump() << "\n";
}

/// Flags that mirror config-file keys; applied after the file so they take precedence.
class SettingFlags {
public:
    void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
        auto& slot = values_[app][key];
        options_[app].emplace_back(app->add_option(flag, slot, help), key);
    }

    void apply(CLI::App* app, Settings& settings) const {
        const auto it = options_.find(app);
        if (it == options_.end()) return;
        for (const auto& [option, key] : it->second)
            if (option->count() > 0) apply_setting(settings, key, values_.at(app).at(key));
    }

private:
    std::map<CLI::App*, std::map<std::string, std::string>> values_;
    std::map<CLI::App*, std::vector<std::pair<CLI::Option*, std::string>>> options_;
};

std::vector<std::size_t> parse_list(const std::string& text, const std::string& what) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(item, &used);
            if (used != item.size() || v < 0) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::logic_error&) {
            throw CommandError("usage", what + ": cannot parse '" + text + "'");
        }
    }
    if (out.empty()) throw CommandError("usage", what + " is empty");
    return out;
}

std::array<double, 3> parse_ratios(const std::string& text) {
    std::array<double, 3> out{};
    std::stringstream ss(text);
    std::size_t i = 0;
    for (std::string item; std::getline(ss, item, ','); ++i) {
        if (i == 3) throw CommandError("usage", "--split expects three ratios");
        try {
            out[i] = std::stod(item);
        } catch (const std::logic_error&) {
            throw CommandError("usage", "--split: cannot parse '" + text + "'");
        }
    }
    if (i != 3) throw CommandError("usage", "--split expects three ratios");
    return out;
}

BoundingBox parse_bbox(const std::string& text) {
    std::vector<int> v;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        try {
            std::size_t used = 0;
            v.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::logic_error&) {
            throw CommandError("usage", "--bbox: cannot parse '" + text + "'");
        }
    }
    if (v.size() != 4) throw CommandError("usage", "--bbox expects x1,y1,x2,y2");
    return {v[0], v[1], v[2], v[3]};
}

/// Labels per code id: a manifest (.jsonl) or lines of "id label[,label...]".
std::map<std::uint64_t, std::vector<std::size_t>> read_labels(const std::filesystem::path& path) {
    std::map<std::uint64_t, std::vector<std::size_t>> out;
    if (path.extension() == ".jsonl") {
        for (const auto& e : read_manifest(path).entries) out[e.id] = {static_cast<std::size_t>(e.label)};
        return out;
    }
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open labels " + path.string());
    std::string line;
    for (int number = 1; std::getline(in, line); ++number) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::stringstream ss(line);
        std::uint64_t id = 0;
        std::string labels;
        if (!(ss >> id >> labels))
            throw FormatError(path.string() + ":" + std::to_string(number) + ": expected 'id label[,label...]'");
        try {
            out[id] = parse_list(labels, "labels");
        } catch (const CommandError& e) {
            throw FormatError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

std::vector<std::vector<double>> multi_hot(const PackedCodeSet& codes,
                                           const std::map<std::uint64_t, std::vector<std::size_t>>& labels,
                                           std::size_t width, const std::string& what) {
    std::vector<std::vector<double>> rows;
    for (std::uint64_t id : codes.ids()) {
        const auto it = labels.find(id);
        if (it == labels.end()) throw FormatError(what + ": no label for id " + std::to_string(id));
        std::vector<double> row(width, 0.0);
        for (std::size_t l : it->second) row[l] = 1.0;
        rows.push_back(std::move(row));
    }
    return rows;
}

std::size_t label_width(const std::map<std::uint64_t, std::vector<std::size_t>>& labels) {
    std::size_t width = 0;
    for (const auto& [id, ls] : labels)
        for (std::size_t l : ls) width = std::max(width, l + 1);
    return width;
}

ModelParams require_checkpoint(const Settings& s) {
    if (s.service.checkpoint.empty()) throw CommandError("usage", "a checkpoint is required (--checkpoint)");
    return load_checkpoint(s.service.checkpoint);
}

Manifest require_manifest(const Settings& s) {
    if (s.service.manifest.empty()) throw CommandError("usage", "a manifest is required (--manifest)");
    return read_manifest(s.service.manifest);
}

/// Model shape for training: config keys win, otherwise the data decides.
ModelConfig training_model(const Settings& s, const ImageSet& train, const Manifest& manifest) {
    ModelConfig m = s.model;
    if (!s.assigned.count("input_size")) m.backbone.input_size = train.images.dim(3);
    if (!s.assigned.count("in_channels")) m.backbone.in_channels = train.images.dim(1);
    if (!s.assigned.count("num_classes")) m.backbone.num_classes = manifest.num_classes();
    m.validate();
    return m;
}

int reply_to(const HttpReply& reply, std::ostream& out, std::ostream& err) {
    if (reply.status != 200) {
        const auto j = nlohmann::json::parse(reply.body);
        print_error(err, "http_" + std::to_string(reply.status), j.value("error", reply.body));
        return 1;
    }
    out << reply.body << "\n";
    return 0;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Hierarchical hashing retrieval: data, training, indexing, queries and serving.", "hmar"};
    app.require_subcommand(1);
    SettingFlags flags;
    Settings settings;
    std::string config_path;
    auto add_config = [&](CLI::App* cmd) { cmd->add_option("--config", config_path, "key=value config file"); };
    auto add_service_paths = [&](CLI::App* cmd) {
        flags.add(cmd, "--checkpoint", "checkpoint", "model checkpoint");
        flags.add(cmd, "--manifest", "manifest", "image manifest (.jsonl)");
        flags.add(cmd, "--code-db", "code_db", "code database file");
        flags.add(cmd, "--cache-dir", "cache_dir", "feature-map cache directory");
    };

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Render a synthetic labelled dataset with motif boxes");
    SyntheticSpec spec;
    std::uint64_t gen_seed = 0;
    std::string gen_out, gen_split = "0.7,0.2,0.1";
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--seed", gen_seed, "random seed");
    gen->add_option("--num-classes", spec.num_classes, "number of classes");
    gen->add_option("--images-per-class", spec.images_per_class, "images per class");
    gen->add_option("--image-size", spec.image_size, "square image size in pixels");
    gen->add_option("--noise-sigma", spec.noise_sigma, "background noise level");
    gen->add_option("--motif-contrast", spec.motif_contrast, "motif intensity over the background");
    gen->add_option("--min-motif", spec.min_motif, "smallest motif size in pixels");
    gen->add_option("--max-motif", spec.max_motif, "largest motif size in pixels");
    gen->add_option("--split", gen_split, "train,val,test ratios");

    // train
    auto* train = app.add_subcommand("train", "Train Stage 1, Stage 2 or both");
    std::string stage = "all", bits_list, train_manifest, val_manifest, init_ckpt, train_out, log_path;
    train->add_option("--stage", stage, "1, 2 or all")->check(CLI::IsMember({"1", "2", "all"}));
    train->add_option("--bits", bits_list, "code length, or a comma list for a progressive run");
    add_config(train);
    train->add_option("--train", train_manifest, "training manifest")->required();
    train->add_option("--val", val_manifest, "validation manifest");
    train->add_option("--init", init_ckpt, "starting checkpoint (required for --stage 2)");
    train->add_option("--out", train_out, "output checkpoint, or directory for a progressive run")->required();
    train->add_option("--log", log_path, "per-epoch TSV log");
    flags.add(train, "--epochs", "epochs_per_stage", "epochs per stage");
    flags.add(train, "--batch-size", "batch_size", "mini-batch size");
    flags.add(train, "--lr", "lr", "initial learning rate");
    flags.add(train, "--seed", "seed", "random seed");

    // encode
    auto* encode = app.add_subcommand("encode", "Write global codes of a manifest to a code database");
    add_config(encode);
    add_service_paths(encode);
    std::string encode_out;
    encode->add_option("--out", encode_out, "code database to write");

    // index
    auto* index = app.add_subcommand("index", "Build the code database and the feature-map cache");
    add_config(index);
    add_service_paths(index);
    flags.add(index, "--alpha", "alpha", "Expert0 weight of the local path");

    // query-global / query-local
    std::string image_path, bbox_text;
    std::optional<std::uint64_t> image_id;
    std::optional<std::size_t> k_override, n_override;
    auto add_query = [&](CLI::App* cmd) {
        add_config(cmd);
        add_service_paths(cmd);
        cmd->add_option("--image", image_path, "query image file (PNG)");
        cmd->add_option("--id", image_id, "query by indexed image id");
        cmd->add_option("--k", k_override, "global candidates");
    };
    auto* qglobal = app.add_subcommand("query-global", "Rank the index by global code distance");
    add_query(qglobal);
    auto* qlocal = app.add_subcommand("query-local", "Global candidates reranked by the best window match");
    add_query(qlocal);
    qlocal->add_option("--bbox", bbox_text, "region of interest x1,y1,x2,y2 in pixels")->required();
    qlocal->add_option("--n", n_override, "results after reranking");
    flags.add(qlocal, "--alpha", "alpha", "Expert0 weight of the local path");

    // eval-map
    auto* evalmap = app.add_subcommand("eval-map", "Mean average precision of a code database");
    std::string codes_path, labels_path, queries_path, query_labels_path;
    std::size_t map_k = 0;
    evalmap->add_option("--codes", codes_path, "database codes")->required();
    evalmap->add_option("--labels", labels_path, "database labels: manifest .jsonl or 'id label' lines")->required();
    evalmap->add_option("--queries", queries_path, "query codes; default is leave-one-out over the database");
    evalmap->add_option("--query-labels", query_labels_path, "query labels; default --labels");
    evalmap->add_option("--k", map_k, "ranking depth, 0 for the whole database");

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable component");
    std::size_t gc_seeds = 20;
    gradcheck->add_option("--seeds", gc_seeds, "random draws per component");

    // serve
    auto* serve = app.add_subcommand("serve", "Serve the HTTP API");
    add_config(serve);
    add_service_paths(serve);
    flags.add(serve, "--host", "host", "listen address");
    flags.add(serve, "--port", "port", "listen port, 0 for any");

    std::vector<std::string> argv_store{"hmar"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        print_error(err, "usage", e.what());
        return 2;
    }

    CLI::App* cmd = app.get_subcommands().front();
    try {
        if (!config_path.empty()) apply_config_file(settings, config_path);
        flags.apply(cmd, settings);

        if (cmd == gen) {
            const std::array<double, 3> ratios = parse_ratios(gen_split);
            const Manifest m = generate(spec, gen_seed, gen_out);
            const Splits sp = split(m, ratios, gen_seed);
            write_manifest(sp.train, std::filesystem::path(gen_out) / "train.jsonl");
            write_manifest(sp.val, std::filesystem::path(gen_out) / "val.jsonl");
            write_manifest(sp.test, std::filesystem::path(gen_out) / "test.jsonl");
            out << Json{{"count", m.entries.size()},
                        {"manifest", (std::filesystem::path(gen_out) / "manifest.jsonl").string()},
                        {"train", sp.train.entries.size()},
                        {"val", sp.val.entries.size()},
                        {"test", sp.test.entries.size()}}
                       .dump()
                << "\n";
            return 0;
        }

        if (cmd == train) {
            const Manifest train_m = read_manifest(train_manifest);
            const ImageSet train_set = load_image_set(train_m);
            std::optional<ImageSet> val_set;
            if (!val_manifest.empty()) val_set = load_image_set(read_manifest(val_manifest));
            std::vector<std::size_t> bits = bits_list.empty() ? std::vector<std::size_t>{settings.train.bits}
                                                               : parse_list(bits_list, "--bits");
            TrainLog log;
            auto on_epoch = [&](const EpochMetrics& m) {
                TrainLog one;
                one.epochs.push_back(m);
                out << one.tsv() << std::flush;
            };
            if (bits.size() > 1) {
                if (stage != "all") throw CommandError("usage", "a progressive run needs --stage all");
                const ModelConfig model = training_model(settings, train_set, train_m);
                const auto ckpts = progressive_bit_run(bits, settings.train, model, train_set,
                                                       val_set ? &*val_set : nullptr, train_out, on_epoch);
                Json j = Json::object();
                for (const auto& [b, path] : ckpts) j[std::to_string(b)] = path.string();
                out << Json{{"checkpoints", j}}.dump() << "\n";
                return 0;
            }
            settings.train.bits = bits.front();
            settings.model.bits = bits.front();
            ModelParams params;
            if (!init_ckpt.empty()) {
                params = load_checkpoint(init_ckpt);
                if (params.config.bits != settings.train.bits)
                    throw CommandError("usage", "--init has " + std::to_string(params.config.bits) + " bits, training asks for " +
                                                    std::to_string(settings.train.bits));
            } else if (stage == "2") {
                throw CommandError("usage", "--stage 2 needs --init with a Stage-1 checkpoint");
            } else {
                params = ModelParams::init(training_model(settings, train_set, train_m), settings.train.seed);
            }
            const ImageSet* val = val_set ? &*val_set : nullptr;
            if (stage == "1") {
                params = stage1_train(settings.train, train_set, val, std::move(params), &log, on_epoch);
            } else if (stage == "2") {
                params = calibrate_local_head(clone_expert0_to_expert1(std::move(params)), train_set);
                params = stage2_train(settings.train, train_set, std::move(params), &log, on_epoch);
            } else {
                params = train_both_stages(settings.train, train_set, val, std::move(params), &log, on_epoch);
            }
            save_checkpoint(train_out, round_to_fp32(params));
            if (!log_path.empty()) {
                const std::string tsv = log.tsv();
                write_file(log_path, std::vector<std::uint8_t>(tsv.begin(), tsv.end()));
            }
            out << Json{{"checkpoint", train_out}, {"initial_loss", log.initial_loss}}.dump() << "\n";
            return 0;
        }

        if (cmd == encode) {
            const ModelParams params = require_checkpoint(settings);
            const Manifest m = require_manifest(settings);
            const ImageSet set = load_image_set(m);
            const PackedCodeSet codes =
                PackedCodeSet::from_continuous(encode_global_batched(params, set.images), set.ids);
            const std::filesystem::path target = encode_out.empty() ? settings.service.code_db : std::filesystem::path(encode_out);
            write_code_db(target, codes);
            out << Json{{"count", codes.size()}, {"bits", codes.bits()}, {"code_db", target.string()}}.dump() << "\n";
            return 0;
        }

        if (cmd == index) {
            const ModelParams params = require_checkpoint(settings);
            const auto built = build_index(require_manifest(settings), params, settings.service.alpha,
                                           settings.service.code_db, settings.service.cache_dir);
            out << Json{{"count", built->size()}, {"code_db", settings.service.code_db.string()}}.dump() << "\n";
            return 0;
        }

        if (cmd == qglobal || cmd == qlocal) {
            if (image_path.empty() == !image_id.has_value())
                throw CommandError("usage", "give exactly one of --image and --id");
            settings.service.validate();
            Service service(settings.service, require_checkpoint(settings));
            service.set_index(load_index(require_manifest(settings), settings.service.code_db, settings.service.cache_dir));
            Json body = Json::object();
            if (image_id) body["image_id"] = *image_id;
            else body["image_b64"] = base64_encode(read_file(image_path));
            if (k_override) body["k"] = *k_override;
            if (cmd == qlocal) {
                const BoundingBox b = parse_bbox(bbox_text);
                body["bbox"] = {b.x1, b.y1, b.x2, b.y2};
                if (n_override) body["n"] = *n_override;
            }
            return reply_to(service.handle("POST", cmd == qlocal ? "/query/local" : "/query/global", body.dump()), out,
                            err);
        }

        if (cmd == evalmap) {
            const PackedCodeSet db = read_code_db(codes_path);
            const auto db_labels = read_labels(labels_path);
            double map = 0.0;
            std::size_t queries = 0;
            if (!queries_path.empty()) {
                const PackedCodeSet q = read_code_db(queries_path);
                const auto q_labels = query_labels_path.empty() ? db_labels : read_labels(query_labels_path);
                const std::size_t width = std::max(label_width(db_labels), label_width(q_labels));
                map = compute_map(q, multi_hot(q, q_labels, width, "query labels"), db,
                                  multi_hot(db, db_labels, width, "labels"), map_k);
                queries = q.size();
            } else {
                if (db.size() < 2) throw CommandError("usage", "leave-one-out needs at least two codes");
                const std::size_t width = label_width(db_labels);
                const auto rows = multi_hot(db, db_labels, width, "labels");
                for (std::size_t i = 0; i < db.size(); ++i) {
                    PackedCodeSet q(db.bits()), rest(db.bits());
                    std::vector<std::vector<double>> rest_labels;
                    q.add_packed(db.code(i), db.id(i));
                    for (std::size_t j = 0; j < db.size(); ++j) {
                        if (j == i) continue;
                        rest.add_packed(db.code(j), db.id(j));
                        rest_labels.push_back(rows[j]);
                    }
                    map += compute_map(q, {rows[i]}, rest, rest_labels, map_k);
                }
                map /= static_cast<double>(db.size());
                queries = db.size();
            }
            out << Json{{"map", map}, {"queries", queries}, {"k", map_k}}.dump() << "\n";
            return 0;
        }

        if (cmd == gradcheck) {
            bool ok = true;
            for (const auto& r : gradient_suite(gc_seeds)) {
                out << r.component << "\t" << r.max_error << "\t" << r.trials << "\t" << (r.passed() ? "PASS" : "FAIL")
                    << "\n";
                ok = ok && r.passed();
            }
            if (!ok) throw CommandError("gradcheck", "a component exceeds the relative error tolerance");
            return 0;
        }

        if (cmd == serve) {
            settings.service.validate();
            Service service(settings.service, require_checkpoint(settings));
            if (!settings.service.manifest.empty()) {
                const Manifest m = read_manifest(settings.service.manifest);
                if (std::filesystem::exists(settings.service.code_db))
                    service.set_index(load_index(m, settings.service.code_db, settings.service.cache_dir));
                else
                    service.build(settings.service.manifest);
            }
            sigset_t signals;
            sigemptyset(&signals);
            sigaddset(&signals, SIGINT);
            sigaddset(&signals, SIGTERM);
            pthread_sigmask(SIG_BLOCK, &signals, nullptr);
            HttpServer server(service);
            const int port = server.bind(settings.service.host, settings.service.port);
            std::thread waiter([&] {
                int sig = 0;
                sigwait(&signals, &sig);
                server.stop();
            });
            out << Json{{"listening", settings.service.host + ":" + std::to_string(port)}}.dump() << "\n" << std::flush;
            server.listen();
            pthread_kill(waiter.native_handle(), SIGTERM);
            waiter.join();
            return 0;
        }
    } catch (const CommandError& e) {
        print_error(err, e.kind, e.what());
        return e.kind == "usage" ? 2 : 1;
    } catch (const FormatError& e) {
        print_error(err, "format", e.what());
        return 1;
    } catch (const DomainError& e) {
        print_error(err, "domain", e.what());
        return 1;
    } catch (const ShapeError& e) {
        print_error(err, "shape", e.what());
        return 1;
    } catch (const NumericError& e) {
        print_error(err, "numeric", e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error(err, "runtime", e.what());
        return 1;
    }
    return 0;
}

} // namespace hmar::cli
