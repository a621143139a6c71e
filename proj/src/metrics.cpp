#include "kdx/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "kdx/losses.hpp"

namespace kdx {

using nlohmann::json;

std::optional<double> auc_one_vs_rest(const std::vector<double>& scores,
                                      const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("auc: scores/labels length mismatch");
    long pos = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw std::invalid_argument("auc: labels must be 0/1");
        pos += y;
    }
    const long neg = static_cast<long>(labels.size()) - pos;
    if (pos == 0 || neg == 0) return std::nullopt;

    // Average ranks over tie groups; the rank-sum form equals pairwise
    // counting with half credit for ties.
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[idx[k]] == 1) pos_rank_sum += avg_rank;
        }
        i = j + 1;
    }
    const double p = static_cast<double>(pos);
    return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

double f1_from_counts(long tp, long fp, long fn) {
    const double denom = static_cast<double>(2 * tp + fp + fn);
    if (denom == 0.0) return 0.0;
    return 2.0 * static_cast<double>(tp) / denom;
}

namespace {

json optional_to_json(const std::optional<double>& v) {
    if (v.has_value()) return *v;
    return nullptr;
}

std::optional<double> optional_from_json(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

json report_to_json(const MetricReport& r) {
    json j;
    j["class_names"] = r.class_names;
    j["confusion"] = r.confusion;
    j["sample_count"] = r.sample_count;
    j["accuracy"] = r.accuracy;
    j["f1_per_class"] = r.f1;
    j["macro_f1"] = r.macro_f1;
    json aucs = json::array();
    for (const auto& a : r.auc) aucs.push_back(optional_to_json(a));
    j["auc_per_class"] = std::move(aucs);
    j["macro_auc"] = optional_to_json(r.macro_auc);
    j["warnings"] = r.warnings;
    j["config_hash"] = r.config_hash;
    j["checkpoint_hash"] = r.checkpoint_hash;
    j["averaging"] = r.averaging;
    return j;
}

}  // namespace

std::string MetricReport::content_hash() const {
    return hash_hex(fnv1a64(report_to_json(*this).dump()));
}

void MetricReport::save(const std::filesystem::path& json_path) const {
    std::ofstream out(json_path);
    if (!out) throw std::runtime_error("cannot write report: " + json_path.string());
    out << report_to_json(*this).dump(2) << "\n";
}

MetricReport MetricReport::load(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in) throw std::runtime_error("cannot open report: " + json_path.string());
    json j = json::parse(in);
    MetricReport r;
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.confusion = j.at("confusion").get<std::vector<std::vector<long>>>();
    r.sample_count = j.at("sample_count").get<long>();
    r.accuracy = j.at("accuracy").get<double>();
    r.f1 = j.at("f1_per_class").get<std::vector<double>>();
    r.macro_f1 = j.at("macro_f1").get<double>();
    for (const auto& a : j.at("auc_per_class")) r.auc.push_back(optional_from_json(a));
    r.macro_auc = optional_from_json(j.at("macro_auc"));
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
    r.averaging = j.at("averaging").get<std::string>();
    return r;
}

std::string MetricReport::render_text() const {
    std::ostringstream os;
    char buf[160];
    os << "metrics (" << averaging << " averaging), n=" << sample_count << "\n";
    os << "  accuracy: ";
    std::snprintf(buf, sizeof(buf), "%.4f", accuracy);
    os << buf << "\n";
    os << "  class                 AUC        F1\n";
    for (std::size_t c = 0; c < class_names.size(); ++c) {
        std::string auc_s = "   --  ";
        if (auc[c].has_value()) {
            std::snprintf(buf, sizeof(buf), "%.4f", *auc[c]);
            auc_s = buf;
        }
        std::snprintf(buf, sizeof(buf), "  %-18s %7s   %.4f\n", class_names[c].c_str(),
                      auc_s.c_str(), f1[c]);
        os << buf;
    }
    std::string macro_auc_s = "--";
    if (macro_auc.has_value()) {
        std::snprintf(buf, sizeof(buf), "%.4f", *macro_auc);
        macro_auc_s = buf;
    }
    std::snprintf(buf, sizeof(buf), "  macro                %7s   %.4f\n", macro_auc_s.c_str(),
                  macro_f1);
    os << buf;
    if (!config_hash.empty()) os << "  config_hash: " << config_hash << "\n";
    if (!checkpoint_hash.empty()) os << "  checkpoint_hash: " << checkpoint_hash << "\n";
    for (const auto& w : warnings) os << "  warning: " << w << "\n";
    return os.str();
}

MetricReport evaluate(const Model& model, const LoadedSplit& split, int batch_size,
                      const std::string& config_hash, const std::string& checkpoint_hash) {
    if (split.size() == 0) throw ConfigError("evaluate: empty split");
    const int C = split.num_classes();
    if (model.num_classes() != C) {
        throw ShapeError("evaluate: model has " + std::to_string(model.num_classes()) +
                         " classes, split has " + std::to_string(C));
    }
    MetricReport r;
    r.config_hash = config_hash;
    r.checkpoint_hash = checkpoint_hash;
    for (int c = 0; c < C; ++c) r.class_names.push_back("class_" + std::to_string(c));
    r.confusion.assign(static_cast<std::size_t>(C), std::vector<long>(static_cast<std::size_t>(C), 0));
    r.sample_count = split.size();

    // Sequential batches; shuffling is irrelevant for evaluation.
    std::vector<std::vector<double>> scores(static_cast<std::size_t>(C));
    std::vector<std::vector<int>> bin_labels(static_cast<std::size_t>(C));
    std::vector<int> order(static_cast<std::size_t>(split.size()));
    std::iota(order.begin(), order.end(), 0);
    for (int start = 0; start < split.size(); start += batch_size) {
        const int end = std::min(split.size(), start + batch_size);
        const std::vector<int> idx(order.begin() + start, order.begin() + end);
        const Matrix logits = model.forward(split.batch_images(idx));
        for (int b = 0; b < logits.rows; ++b) {
            int pred = 0;
            double best = -1.0;
            for (int c = 0; c < C; ++c) {
                const double s = stable_sigmoid(logits.at(b, c));
                scores[static_cast<std::size_t>(c)].push_back(s);
                bin_labels[static_cast<std::size_t>(c)].push_back(
                    split.label_of(idx[static_cast<std::size_t>(b)]) == c ? 1 : 0);
                if (s > best) {
                    best = s;
                    pred = c;
                }
            }
            const int truth = split.label_of(idx[static_cast<std::size_t>(b)]);
            r.confusion[static_cast<std::size_t>(truth)][static_cast<std::size_t>(pred)] += 1;
        }
    }

    long correct = 0;
    for (int c = 0; c < C; ++c) correct += r.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.sample_count);

    double f1_sum = 0.0;
    for (int c = 0; c < C; ++c) {
        long tp = r.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
        long fp = 0, fn = 0;
        for (int o = 0; o < C; ++o) {
            if (o == c) continue;
            fp += r.confusion[static_cast<std::size_t>(o)][static_cast<std::size_t>(c)];
            fn += r.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(o)];
        }
        r.f1.push_back(f1_from_counts(tp, fp, fn));
        f1_sum += r.f1.back();
    }
    r.macro_f1 = f1_sum / C;

    double auc_sum = 0.0;
    int auc_defined = 0;
    for (int c = 0; c < C; ++c) {
        auto a = auc_one_vs_rest(scores[static_cast<std::size_t>(c)], bin_labels[static_cast<std::size_t>(c)]);
        if (a.has_value()) {
            auc_sum += *a;
            ++auc_defined;
        } else {
            r.warnings.push_back("AUC undefined for class " + std::to_string(c) +
                                 " (single-class labels); omitted from macro average");
        }
        r.auc.push_back(a);
    }
    if (auc_defined > 0) r.macro_auc = auc_sum / auc_defined;
    return r;
}

std::string render_comparison(const std::vector<std::pair<std::string, MetricReport>>& reports) {
    std::ostringstream os;
    char buf[160];
    os << "  run                        AUC       Acc        F1\n";
    for (const auto& [name, r] : reports) {
        std::string auc_s = "--";
        if (r.macro_auc.has_value()) {
            std::snprintf(buf, sizeof(buf), "%.4f", *r.macro_auc);
            auc_s = buf;
        }
        std::snprintf(buf, sizeof(buf), "  %-24s %6s   %.4f    %.4f\n", name.c_str(), auc_s.c_str(),
                      r.accuracy, r.macro_f1);
        os << buf;
    }
    return os.str();
}

}  // namespace kdx
