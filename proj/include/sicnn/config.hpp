#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sicnn {

/// Scale-list notation: either an explicit comma list ("0.5,1.0,2.7") or a
/// geometric family "BASE^[LO:HI]" expanding to BASE^j for j in [LO, HI].
inline std::vector<double> parse_scales(const std::string& text) {
    std::vector<double> scales;
    const auto caret = text.find("^[");
    if (caret != std::string::npos && text.back() == ']') {
        const double base = std::stod(text.substr(0, caret));
        const std::string range = text.substr(caret + 2, text.size() - caret - 3);
        const auto colon = range.find(':');
        if (colon == std::string::npos) {
            throw std::invalid_argument("scales: malformed range in '" + text + "'");
        }
        const int lo = std::stoi(range.substr(0, colon));
        const int hi = std::stoi(range.substr(colon + 1));
        if (lo > hi) throw std::invalid_argument("scales: empty range in '" + text + "'");
        for (int j = lo; j <= hi; ++j) scales.push_back(std::pow(base, j));
        return scales;
    }
    std::istringstream is(text);
    std::string item;
    while (std::getline(is, item, ',')) {
        if (!item.empty()) scales.push_back(std::stod(item));
    }
    if (scales.empty()) throw std::invalid_argument("scales: nothing parsed from '" + text + "'");
    return scales;
}

struct ExperimentConfig {
    std::string arch = "conv";  // conv | siconv
    int canvas = 28;
    int maps1 = 36, maps2 = 64;
    int kernel1 = 7, kernel2 = 5;
    int fc_hidden = 150;
    std::string scales = "1.26^[-2:3]";

    int epochs = 700;
    int batch_size = 128;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0001;
    std::uint64_t seed = 1;

    std::string variant = "mnist-scale-28";
    std::string dist = "uniform:0.3,1";
    std::uint64_t data_seed = 99;
    int folds = 6;
    int train_size = 10000;
    int test_size = 50000;
    int threads = 1;

    std::vector<double> scale_list() const { return parse_scales(scales); }
};

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
    ExperimentConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream ls(line);
        std::string key, eq, value;
        if (!(ls >> key)) continue;
        if (!(ls >> eq) || eq != "=" || !(ls >> value)) {
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                        ": expected 'key = value'");
        }
        if (key == "arch") {
            if (value != "conv" && value != "siconv") {
                throw std::invalid_argument(origin + ": arch must be conv or siconv");
            }
            cfg.arch = value;
        } else if (key == "canvas") {
            cfg.canvas = std::stoi(value);
            if (cfg.canvas != 28 && cfg.canvas != 40) {
                throw std::invalid_argument(origin + ": canvas must be 28 or 40");
            }
        } else if (key == "maps1") {
            cfg.maps1 = std::stoi(value);
        } else if (key == "maps2") {
            cfg.maps2 = std::stoi(value);
        } else if (key == "kernel1") {
            cfg.kernel1 = std::stoi(value);
        } else if (key == "kernel2") {
            cfg.kernel2 = std::stoi(value);
        } else if (key == "fc_hidden") {
            cfg.fc_hidden = std::stoi(value);
        } else if (key == "scales") {
            parse_scales(value);  // validate eagerly
            cfg.scales = value;
        } else if (key == "epochs") {
            cfg.epochs = std::stoi(value);
        } else if (key == "batch_size") {
            cfg.batch_size = std::stoi(value);
        } else if (key == "learning_rate") {
            cfg.learning_rate = std::stod(value);
        } else if (key == "momentum") {
            cfg.momentum = std::stod(value);
        } else if (key == "weight_decay") {
            cfg.weight_decay = std::stod(value);
        } else if (key == "seed") {
            cfg.seed = std::stoull(value);
        } else if (key == "variant") {
            cfg.variant = value;
        } else if (key == "dist") {
            cfg.dist = value;
        } else if (key == "data_seed") {
            cfg.data_seed = std::stoull(value);
        } else if (key == "folds") {
            cfg.folds = std::stoi(value);
        } else if (key == "train_size") {
            cfg.train_size = std::stoi(value);
        } else if (key == "test_size") {
            cfg.test_size = std::stoi(value);
        } else if (key == "threads") {
            cfg.threads = std::stoi(value);
        } else {
            throw std::invalid_argument(origin + ": unknown key '" + key + "'");
        }
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

inline std::string config_to_text(const ExperimentConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "arch = " << c.arch << "\n"
       << "canvas = " << c.canvas << "\n"
       << "maps1 = " << c.maps1 << "\n"
       << "maps2 = " << c.maps2 << "\n"
       << "kernel1 = " << c.kernel1 << "\n"
       << "kernel2 = " << c.kernel2 << "\n"
       << "fc_hidden = " << c.fc_hidden << "\n"
       << "scales = " << c.scales << "\n"
       << "epochs = " << c.epochs << "\n"
       << "batch_size = " << c.batch_size << "\n"
       << "learning_rate = " << c.learning_rate << "\n"
       << "momentum = " << c.momentum << "\n"
       << "weight_decay = " << c.weight_decay << "\n"
       << "seed = " << c.seed << "\n"
       << "variant = " << c.variant << "\n"
       << "dist = " << c.dist << "\n"
       << "data_seed = " << c.data_seed << "\n"
       << "folds = " << c.folds << "\n"
       << "train_size = " << c.train_size << "\n"
       << "test_size = " << c.test_size << "\n"
       << "threads = " << c.threads << "\n";
    return os.str();
}

}  // namespace sicnn
