// Command-line harness: train, infer, eval, paramcount, gradcheck,
// routing-report, gen-data. Configuration is a flat key = value file; every
// key can be overridden with --key value flags. Exit codes: 0 success,
// 1 usage error, 2 validation/threshold failure, 3 I/O error.

#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "dpnet/config.hpp"
#include "dpnet/train.hpp"

namespace {

using namespace dpnet;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;

void print_usage() {
    std::cerr <<
        "usage: dpnet <command> [--config file] [--key value ...]\n"
        "\n"
        "commands:\n"
        "  gen-data        --out DIR [--count N] [--hw N] [--mix a,b,c] [--data-seed S]\n"
        "  train           --train_root DIR [--val_root DIR] [--out_dir DIR] [keys...]\n"
        "  infer           --checkpoint FILE --image FILE --out FILE\n"
        "  eval            --checkpoint FILE --data DIR [--out FILE]\n"
        "  paramcount      [model keys...] [--out FILE]\n"
        "  gradcheck       --scope ops|block|model\n"
        "  routing-report  --checkpoint FILE --data DIR [--scales a,b,c] [--out FILE]\n";
}

struct Args {
    std::string command;
    KeyValues kv;          // train/model config keys
    KeyValues extra;       // command-local options
};

const std::set<std::string> kCommandKeys{
    "out", "count", "hw", "mix", "data-seed", "checkpoint", "image", "data", "scope", "scales",
    "config",
};

Args parse_args(int argc, char** argv) {
    if (argc < 2) throw ConfigError("missing command");
    Args args;
    args.command = argv[1];
    std::vector<std::pair<std::string, std::string>> pairs;
    for (int i = 2; i < argc; ++i) {
        std::string key = argv[i];
        if (key.rfind("--", 0) != 0 || key.size() <= 2) {
            throw ConfigError("expected --key, got '" + key + "'");
        }
        key = key.substr(2);
        if (i + 1 >= argc) throw ConfigError("missing value for --" + key);
        pairs.emplace_back(key, argv[++i]);
    }
    // The config file loads first so flags override it.
    for (const auto& [key, value] : pairs) {
        if (key == "config") {
            KeyValues file = KeyValues::from_file(value);
            for (const auto& [k, v] : file.entries()) args.kv.set(k, v);
        }
    }
    for (const auto& [key, value] : pairs) {
        if (key == "config") continue;
        if (kCommandKeys.count(key)) {
            args.extra.set(key, value);
        } else {
            args.kv.set(key, value);
        }
    }
    return args;
}

std::vector<double> parse_doubles(const std::string& text) {
    std::vector<double> out;
    std::istringstream is(text);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        if (!tok.empty()) out.push_back(std::stod(tok));
    }
    return out;
}

// Writes to --out when given, stdout otherwise.
class ReportSink {
public:
    explicit ReportSink(const std::string& path) : path_(path) {
        if (!path.empty()) {
            file_.open(path, std::ios::trunc);
            if (!file_) throw IoError("cannot open '" + path + "' for writing");
        }
    }
    std::ostream& os() { return path_.empty() ? std::cout : file_; }

private:
    std::string path_;
    std::ofstream file_;
};

int cmd_gen_data(const Args& args) {
    const std::string out = args.extra.get("out", "");
    if (out.empty()) throw ConfigError("gen-data requires --out");
    DatasetSpec spec;
    spec.count = args.extra.get_int("count", 512);
    spec.image_hw = args.extra.get_int("hw", 64);
    spec.master_seed = args.extra.get_u64("data-seed", 1);
    const std::string mix = args.extra.get("mix", "");
    if (!mix.empty()) {
        auto parts = parse_doubles(mix);
        if (parts.size() != 3) throw ConfigError("--mix needs 3 comma-separated fractions");
        std::copy(parts.begin(), parts.end(), spec.size_mix.begin());
    }
    write_dataset(out, generate_synthetic(spec));
    std::cerr << "wrote " << spec.count << " samples to " << out << "\n";
    return kExitOk;
}

int cmd_train(const Args& args) {
    TrainConfig config = train_config_from(args.kv);
    TrainResult result = train(config);
    std::cerr << "best val_mae " << result.best_val_mae << " at epoch " << result.best_epoch
              << "\ncheckpoints: " << result.best_path << ", " << result.last_path << "\n";
    return kExitOk;
}

int cmd_infer(const Args& args) {
    const std::string ckpt = args.extra.get("checkpoint", "");
    const std::string image = args.extra.get("image", "");
    const std::string out = args.extra.get("out", "");
    if (ckpt.empty() || image.empty() || out.empty()) {
        throw ConfigError("infer requires --checkpoint, --image and --out");
    }
    LoadedModel lm = load_model(ckpt);
    infer_image(*lm.model.net, image, out);
    return kExitOk;
}

int cmd_eval(const Args& args) {
    const std::string ckpt = args.extra.get("checkpoint", "");
    const std::string data = args.extra.get("data", "");
    if (ckpt.empty() || data.empty()) throw ConfigError("eval requires --checkpoint and --data");
    LoadedModel lm = load_model(ckpt);
    EvalResult result = evaluate_dataset(*lm.model.net, data, args.kv.get_int("threads", 0));
    for (const std::string& miss : result.missing) std::cerr << "skipped: " << miss << "\n";

    ReportSink sink(args.extra.get("out", ""));
    sink.os() << "# scope=overall images=" << result.overall.images_total << "\n";
    write_metric_csv(sink.os(), result.overall);
    const char* names[3] = {"small", "middle", "large"};
    for (int c = 0; c < 3; ++c) {
        sink.os() << "# scope=" << names[c]
                  << " images=" << result.class_counts[static_cast<std::size_t>(c)] << "\n";
        write_metric_csv(sink.os(), result.by_class[static_cast<std::size_t>(c)]);
    }
    return kExitOk;
}

int cmd_paramcount(const Args& args) {
    TrainConfig config = train_config_from(args.kv);
    ParamCountReport report = paramcount_report(config.model);
    ReportSink sink(args.extra.get("out", ""));
    sink.os() << "layer,body_analytic,body_enumerated,mlp,shortcut,eq7,margin_min\n";
    char line[256];
    for (const auto& row : report.blocks) {
        std::snprintf(line, sizeof(line), "%s,%lld,%lld,%lld,%lld,%s,%.6f\n", row.name.c_str(),
                      row.body_analytic, row.body_enumerated, row.mlp, row.shortcut,
                      row.lightweight ? "true" : "false", row.margin_min);
        sink.os() << line;
    }
    std::snprintf(line, sizeof(line), "total_encoder_dpconv,%lld\ntotal_encoder_static,%lld\n",
                  report.dpconv_encoder_total, report.static_encoder_total);
    sink.os() << line;
    std::snprintf(line, sizeof(line), "total_model_dpconv,%lld\ntotal_model_static,%lld\n",
                  report.dpconv_model_total, report.static_model_total);
    sink.os() << line;
    for (const auto& row : report.blocks) {
        if (row.body_analytic != row.body_enumerated) {
            std::cerr << "parameter accounting mismatch at " << row.name << "\n";
            return kExitValidation;
        }
    }
    return kExitOk;
}

int cmd_gradcheck(const Args& args) {
    const std::string scope = args.extra.get("scope", "ops");
    std::vector<GradCheckRow> rows;
    if (scope == "ops") {
        rows = gradcheck_ops();
    } else if (scope == "block") {
        rows = gradcheck_blocks();
    } else if (scope == "model") {
        rows = gradcheck_model();
    } else {
        throw ConfigError("gradcheck --scope must be ops, block or model");
    }
    bool ok = true;
    char line[160];
    for (const auto& row : rows) {
        std::snprintf(line, sizeof(line), "%s,%.3e,%.0e,%s\n", row.name.c_str(), row.max_err,
                      row.threshold, row.pass() ? "pass" : "FAIL");
        std::cout << line;
        ok = ok && row.pass();
    }
    return ok ? kExitOk : kExitValidation;
}

int cmd_routing_report(const Args& args) {
    const std::string ckpt = args.extra.get("checkpoint", "");
    const std::string data = args.extra.get("data", "");
    if (ckpt.empty() || data.empty()) {
        throw ConfigError("routing-report requires --checkpoint and --data");
    }
    std::vector<double> scales{1.0, 1.5, 2.0};
    const std::string scale_text = args.extra.get("scales", "");
    if (!scale_text.empty()) scales = parse_doubles(scale_text);
    LoadedModel lm = load_model(ckpt);
    auto rows = routing_report(*lm.model.net, data, scales, args.kv.get_int("threads", 0));
    ReportSink sink(args.extra.get("out", ""));
    sink.os() << "stage,kernel,scale,mean_weight\n";
    char line[96];
    for (const auto& row : rows) {
        std::snprintf(line, sizeof(line), "%d,%d,%.3f,%.9f\n", row.stage, row.kernel, row.scale,
                      row.mean_weight);
        sink.os() << line;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        Args args = parse_args(argc, argv);
        if (args.command == "gen-data") return cmd_gen_data(args);
        if (args.command == "train") return cmd_train(args);
        if (args.command == "infer") return cmd_infer(args);
        if (args.command == "eval") return cmd_eval(args);
        if (args.command == "paramcount") return cmd_paramcount(args);
        if (args.command == "gradcheck") return cmd_gradcheck(args);
        if (args.command == "routing-report") return cmd_routing_report(args);
        std::cerr << "unknown command '" << args.command << "'\n";
        print_usage();
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        print_usage();
        return kExitUsage;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
}
