#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "eksft/csv.hpp"
#include "eksft/errors.hpp"
#include "eksft/eval.hpp"
#include "eksft/model.hpp"
#include "eksft/selection.hpp"
#include "eksft/train_sft.hpp"

namespace eksft {

// ---- parameter drift ------------------------------------------------------

struct DriftEntry {
    std::string name;
    std::size_t count = 0;
    double mean_relative_change = 0.0;
    std::vector<double> fraction_exceeding;  // one per threshold
};

struct DriftReport {
    std::vector<double> thresholds;
    std::vector<DriftEntry> tensors;
    DriftEntry global;
};

inline const std::vector<double>& default_drift_thresholds() {
    static const std::vector<double> t = {1e-3, 1e-2, 1e-1};
    return t;
}

inline double relative_change(double before, double after) {
    return std::abs(after - before) / (std::abs(before) + 1e-8);
}

// Relative change |a − b| / (|b| + 1e-8) per scalar, aggregated per tensor
// and globally.
inline DriftReport parameter_drift(const ParameterSet& before, const ParameterSet& after,
                                   std::vector<double> thresholds = default_drift_thresholds()) {
    if (before.config_hash() != after.config_hash() || before.size() != after.size()) {
        throw InputError("parameter_drift: checkpoints have different architectures");
    }
    std::sort(thresholds.begin(), thresholds.end());
    DriftReport rep;
    rep.thresholds = thresholds;
    rep.global.name = "global";
    std::vector<std::size_t> global_hits(thresholds.size(), 0);
    double global_sum = 0.0;
    const auto b = before.values();
    const auto a = after.values();
    for (const auto& s : before.slots()) {
        DriftEntry e;
        e.name = s.name;
        e.count = s.size;
        std::vector<std::size_t> hits(thresholds.size(), 0);
        double sum = 0.0;
        for (std::size_t i = s.offset; i < s.offset + s.size; ++i) {
            const double rc = relative_change(b[i], a[i]);
            sum += rc;
            for (std::size_t t = 0; t < thresholds.size(); ++t) {
                hits[t] += rc > thresholds[t] ? 1 : 0;
            }
        }
        global_sum += sum;
        e.mean_relative_change = s.size ? sum / static_cast<double>(s.size) : 0.0;
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            e.fraction_exceeding.push_back(s.size ? static_cast<double>(hits[t]) /
                                                        static_cast<double>(s.size)
                                                  : 0.0);
            global_hits[t] += hits[t];
        }
        rep.tensors.push_back(std::move(e));
    }
    rep.global.count = before.size();
    const double n = static_cast<double>(before.size());
    rep.global.mean_relative_change = global_sum / n;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        rep.global.fraction_exceeding.push_back(static_cast<double>(global_hits[t]) / n);
    }
    return rep;
}

// Global fraction above `threshold`, which must be one of the report's.
inline double drift_fraction(const DriftReport& r, double threshold) {
    for (std::size_t t = 0; t < r.thresholds.size(); ++t) {
        if (r.thresholds[t] == threshold) {
            return r.global.fraction_exceeding[t];
        }
    }
    throw InputError("drift report has no threshold " + format_double(threshold));
}

inline std::string to_csv(const DriftReport& r) {
    std::string out = "tensor,count,mean_relative_change";
    for (double t : r.thresholds) {
        out += ",frac_gt_" + format_double(t);
    }
    out += "\n";
    auto row = [&](const DriftEntry& e) {
        out += e.name + "," + std::to_string(e.count) + "," + format_double(e.mean_relative_change);
        for (double f : e.fraction_exceeding) {
            out += "," + format_double(f);
        }
        out += "\n";
    };
    for (const auto& e : r.tensors) {
        row(e);
    }
    row(r.global);
    return out;
}

// ---- mask IoU series ------------------------------------------------------

struct IouPoint {
    std::size_t step = 0;
    std::size_t n_entropy = 0;
    std::size_t n_kl = 0;
    double iou = 0.0;
};

struct IouSeries {
    std::vector<IouPoint> points;
    double min = 0.0;
    double max = 0.0;
    double mean = 0.0;
    std::size_t malformed_lines = 0;
};

// Reference statistics of the published run (min / max / mean), reported
// next to ours for comparison only.
inline constexpr double kReferenceIouMin = 0.09;
inline constexpr double kReferenceIouMax = 0.59;
inline constexpr double kReferenceIouMean = 0.50;

inline IouSeries iou_series(std::string_view dump) {
    std::map<std::size_t, std::pair<std::vector<TokenRef>, std::vector<TokenRef>>> by_step;
    IouSeries out;
    std::istringstream in{std::string(dump)};
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            const auto step = j.at("step").get<std::size_t>();
            const TokenRef ref{j.at("seq").get<std::uint32_t>(), j.at("pos").get<std::uint32_t>()};
            auto& sets = by_step[step];
            if (j.at("in_mH").get<bool>()) {
                sets.first.push_back(ref);
            }
            if (j.at("in_mKL").get<bool>()) {
                sets.second.push_back(ref);
            }
        } catch (const nlohmann::json::exception&) {
            ++out.malformed_lines;
        }
    }
    double sum = 0.0;
    out.min = std::numeric_limits<double>::infinity();
    out.max = -std::numeric_limits<double>::infinity();
    for (auto& [step, sets] : by_step) {
        IouPoint p{step, sets.first.size(), sets.second.size(), iou(sets.first, sets.second)};
        out.min = std::min(out.min, p.iou);
        out.max = std::max(out.max, p.iou);
        sum += p.iou;
        out.points.push_back(p);
    }
    if (out.points.empty()) {
        out.min = out.max = out.mean = std::numeric_limits<double>::quiet_NaN();
    } else {
        out.mean = sum / static_cast<double>(out.points.size());
    }
    return out;
}

inline std::string to_csv(const IouSeries& s) {
    std::string out = "step,n_mH,n_mKL,iou\n";
    for (const auto& p : s.points) {
        out += std::to_string(p.step) + "," + std::to_string(p.n_entropy) + "," +
               std::to_string(p.n_kl) + "," + format_double(p.iou) + "\n";
    }
    return out;
}

inline std::string iou_summary_csv(const IouSeries& s) {
    return "source,min,max,mean\nthis_run," + format_double(s.min) + "," + format_double(s.max) +
           "," + format_double(s.mean) + "\nreference," + format_double(kReferenceIouMin) + "," +
           format_double(kReferenceIouMax) + "," + format_double(kReferenceIouMean) + "\n";
}

// ---- ratio sweep ----------------------------------------------------------

inline const std::vector<double>& default_sweep_ratios() {
    static const std::vector<double> r = {0.0, 0.1, 0.2, 0.3, 0.4};
    return r;
}

struct SweepRow {
    double rho = 0.0;
    double pass_at_1 = 0.0;
    double pass_at_max = 0.0;  // largest requested k
    double drift = 0.0;        // global fraction above 1e-3
    double entropy = 0.0;      // mean response entropy at evaluation
    bool mask_sizes_ok = true;
};

inline std::string sweep_header(std::size_t kmax) {
    return "rho,pass_at_1,pass_at_" + std::to_string(kmax) + ",drift_frac_1e-3,entropy,mask_sizes_ok\n";
}

inline std::string to_csv_row(const SweepRow& r) {
    return format_double(r.rho) + "," + format_double(r.pass_at_1) + "," +
           format_double(r.pass_at_max) + "," + format_double(r.drift) + "," +
           format_double(r.entropy) + "," + (r.mask_sizes_ok ? "1" : "0") + "\n";
}

struct SweepInputs {
    const ParameterSet* base = nullptr;
    std::span<const Sample> train;
    std::span<const Sample> eval;
    EvalOptions eval_options;
};

// EKSFT at each ratio from the same base, seeds and data. Rows are passed to
// `on_row` as they finish, so a failure part-way keeps the earlier ones.
inline std::vector<SweepRow> ratio_sweep(const SftConfig& base_cfg, std::span<const double> rhos,
                                         const SweepInputs& in,
                                         const std::function<void(const SweepRow&)>& on_row = {}) {
    if (in.base == nullptr) {
        throw InputError("ratio_sweep: no base parameters");
    }
    for (double r : rhos) {
        require_ratio(r);
    }
    const auto reference = snapshot_reference(*in.base);
    const std::size_t kmax = *std::max_element(in.eval_options.ks.begin(),
                                               in.eval_options.ks.end());
    std::vector<SweepRow> rows;
    for (double rho : rhos) {
        SftConfig cfg = base_cfg;
        cfg.method = SftMethod::eksft;
        cfg.rho = rho;
        SweepRow row;
        row.rho = rho;
        SftHooks hooks;
        hooks.on_micro_batch = [&](const MicroBatchInfo& mb) {
            const auto& m = mb.result->mask;
            const std::size_t k = topk_count(rho, m.total_valid);
            if (m.k != k || m.m_entropy.size() != k || m.m_kl.size() != k) {
                row.mask_sizes_ok = false;
            }
        };
        const auto trained = train_sft(*in.base, reference, in.train, cfg, hooks);
        const auto rep = evaluate(trained.params, in.eval, in.eval_options);
        row.pass_at_1 = rep.pass_at.count(1) ? rep.pass_at.at(1) : rep.avg_at_n;
        row.pass_at_max = rep.pass_at.at(kmax);
        row.drift = drift_fraction(parameter_drift(*in.base, trained.params), 1e-3);
        row.entropy = rep.mean_response_entropy;
        rows.push_back(row);
        if (on_row) {
            on_row(row);
        }
    }
    return rows;
}

// ---- SVG export -----------------------------------------------------------

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

namespace detail {

inline std::string svg_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

inline const char* palette(std::size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                   "#8c564b", "#e377c2", "#7f7f7f"};
    return colors[i % 8];
}

}  // namespace detail

// Standalone SVG 1.1 line chart. Every finite point is drawn as one
// <circle class="pt">.
inline std::string line_chart_svg(const std::string& title, const std::string& xlabel,
                                  std::span<const Series> series) {
    constexpr double W = 640, H = 400, left = 60, right = 20, top = 40, bottom = 50;
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) {
                x0 = std::min(x0, s.x[i]);
                x1 = std::max(x1, s.x[i]);
                y0 = std::min(y0, s.y[i]);
                y1 = std::max(y1, s.y[i]);
            }
        }
    }
    if (!std::isfinite(x0)) {
        x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    }
    if (x1 == x0) {
        x1 = x0 + 1;
    }
    if (y1 == y0) {
        y1 = y0 + 1;
    }
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (W - left - right); };
    auto py = [&](double y) { return H - bottom - (y - y0) / (y1 - y0) * (H - top - bottom); };

    std::string out;
    out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"640\" "
           "height=\"400\" viewBox=\"0 0 640 400\">\n";
    out += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
    out += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"16\">" + detail::xml_escape(title) + "</text>\n";
    out += "<line x1=\"" + detail::svg_num(left) + "\" y1=\"" + detail::svg_num(H - bottom) +
           "\" x2=\"" + detail::svg_num(W - right) + "\" y2=\"" + detail::svg_num(H - bottom) +
           "\" stroke=\"black\"/>\n";
    out += "<line x1=\"" + detail::svg_num(left) + "\" y1=\"" + detail::svg_num(top) +
           "\" x2=\"" + detail::svg_num(left) + "\" y2=\"" + detail::svg_num(H - bottom) +
           "\" stroke=\"black\"/>\n";
    auto label = [&](double x, double y, const std::string& text, const char* anchor) {
        out += "<text x=\"" + detail::svg_num(x) + "\" y=\"" + detail::svg_num(y) +
               "\" text-anchor=\"" + anchor + "\" font-family=\"sans-serif\" font-size=\"11\">" +
               detail::xml_escape(text) + "</text>\n";
    };
    label(left, H - bottom + 16, format_double(x0), "start");
    label(W - right, H - bottom + 16, format_double(x1), "end");
    label(left - 4, H - bottom, format_double(y0), "end");
    label(left - 4, top + 4, format_double(y1), "end");
    label((W + left - right) / 2, H - 12, xlabel, "middle");

    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* color = detail::palette(k);
        std::string pts;
        std::string circles;
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
                continue;
            }
            const std::string cx = detail::svg_num(px(s.x[i]));
            const std::string cy = detail::svg_num(py(s.y[i]));
            pts += (pts.empty() ? "" : " ") + cx + "," + cy;
            circles += "<circle class=\"pt\" cx=\"" + cx + "\" cy=\"" + cy +
                       "\" r=\"2\" fill=\"" + color + "\"/>\n";
        }
        if (!pts.empty()) {
            out += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
                   "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
        }
        out += circles;
        label(W - right - 4, top + 14 + 14 * static_cast<double>(k), s.name, "end");
        out += "<rect x=\"" + detail::svg_num(W - right - 2) + "\" y=\"" +
               detail::svg_num(top + 5 + 14 * static_cast<double>(k)) +
               "\" width=\"8\" height=\"8\" fill=\"" + color + "\"/>\n";
    }
    out += "</svg>\n";
    return out;
}

// Bar chart; one <rect class="bar"> per value.
inline std::string bar_chart_svg(const std::string& title, std::span<const std::string> labels,
                                 std::span<const double> values) {
    constexpr double W = 640, H = 400, left = 60, bottom = 50, top = 40, right = 20;
    double vmax = 0.0;
    for (double v : values) {
        if (std::isfinite(v)) {
            vmax = std::max(vmax, v);
        }
    }
    if (vmax == 0.0) {
        vmax = 1.0;
    }
    std::string out;
    out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"640\" "
           "height=\"400\" viewBox=\"0 0 640 400\">\n";
    out += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
    out += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"16\">" + detail::xml_escape(title) + "</text>\n";
    const double slot = values.empty() ? 0.0 : (W - left - right) / static_cast<double>(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = std::isfinite(values[i]) ? values[i] : 0.0;
        const double h = v / vmax * (H - top - bottom);
        const double x = left + slot * static_cast<double>(i) + slot * 0.1;
        out += "<rect class=\"bar\" x=\"" + detail::svg_num(x) + "\" y=\"" +
               detail::svg_num(H - bottom - h) + "\" width=\"" + detail::svg_num(slot * 0.8) +
               "\" height=\"" + detail::svg_num(h) + "\" fill=\"" + detail::palette(0) + "\"/>\n";
        out += "<text x=\"" + detail::svg_num(x + slot * 0.4) + "\" y=\"" +
               detail::svg_num(H - bottom + 14) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"9\">" +
               detail::xml_escape(i < labels.size() ? labels[i] : "") + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

inline std::vector<double> require_column(const CsvTable& t, const std::string& name,
                                          const std::string& source) {
    if (t.column(name) < 0) {
        throw ExportError(source + ": missing column '" + name + "'");
    }
    return t.numeric(name);
}

// One chart of `y_columns` against `x_column`, one series per input table.
inline std::string plot_columns(std::span<const std::pair<std::string, CsvTable>> tables,
                                const std::string& x_column, const std::string& y_column,
                                const std::string& title) {
    std::vector<Series> series;
    for (const auto& [name, table] : tables) {
        series.push_back({name, require_column(table, x_column, name),
                          require_column(table, y_column, name)});
    }
    return line_chart_svg(title, x_column, series);
}

struct PlotFile {
    std::string file;
    std::string svg;
};

// Charts for whichever known columns the inputs carry: SFT metrics
// (loss, mean_entropy, mean_kl, mask_iou), RL metrics (mean_reward),
// eval CSVs (pass_at_k vs k) and drift CSVs (bars of the last threshold
// column per tensor). A table of an unrecognized kind is an export error.
inline std::vector<PlotFile> export_plots(
    std::span<const std::pair<std::string, CsvTable>> tables) {
    std::vector<std::pair<std::string, CsvTable>> sft, rl, evals;
    std::vector<PlotFile> out;
    for (const auto& t : tables) {
        const auto& tab = t.second;
        if (tab.column("mean_reward") >= 0) {
            rl.push_back(t);
        } else if (tab.column("pass_at_k") >= 0) {
            evals.push_back(t);
        } else if (tab.column("tensor") >= 0) {
            const int c = static_cast<int>(tab.header.size()) - 1;
            if (c < 3) {
                throw ExportError(t.first + ": missing column 'frac_gt_<threshold>'");
            }
            std::vector<std::string> labels;
            std::vector<double> values;
            for (const auto& row : tab.rows) {
                labels.push_back(row.at(0));
                values.push_back(std::strtod(row.at(static_cast<std::size_t>(c)).c_str(), nullptr));
            }
            out.push_back({"drift_" + t.first + ".svg",
                           bar_chart_svg("drift " + tab.header.back() + " (" + t.first + ")",
                                         labels, values)});
        } else if (tab.column("step") >= 0) {
            sft.push_back(t);
        } else {
            throw ExportError(t.first + ": missing column 'step'");
        }
    }
    if (!sft.empty()) {
        out.push_back({"loss.svg", plot_columns(sft, "step", "loss", "training loss")});
        out.push_back({"entropy.svg", plot_columns(sft, "step", "mean_entropy", "mean token entropy (nats)")});
        out.push_back({"kl.svg", plot_columns(sft, "step", "mean_kl", "mean KL to reference (nats)")});
        out.push_back({"iou.svg", plot_columns(sft, "step", "mask_iou", "mask IoU")});
    }
    if (!rl.empty()) {
        out.push_back({"reward.svg", plot_columns(rl, "step", "mean_reward", "mean RL reward")});
    }
    if (!evals.empty()) {
        out.push_back({"pass_at_k.svg", plot_columns(evals, "k", "pass_at_k", "pass@k vs k")});
    }
    return out;
}

}  // namespace eksft
