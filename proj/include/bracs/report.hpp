#pragma once

// File outputs: versioned CSV tables, JSON summaries, and small hand-rolled
// SVG plots. All numeric text uses shortest round-trip formatting so a run
// with a fixed (seed, config) produces byte-identical files, timing columns
// aside.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "bracs/experiment.hpp"

namespace bracs {

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr int kSchemaVersion = 1;

inline std::ofstream open_for_write(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot open for writing: " + path);
    return out;
}

// ---------------------------------------------------------------------------
// CSV

inline void write_traces_csv(const std::vector<DecodeTrace>& traces, const std::string& path) {
    auto out = open_for_write(path);
    out << "# traces schema_version=" << kSchemaVersion << "\n";
    out << "prompt,step,layer,h,fired,theta_norm,violation,token,label,wall_ms\n";
    for (std::size_t p = 0; p < traces.size(); ++p) {
        for (const auto& s : traces[p].steps) {
            for (const auto& l : s.layers) {
                out << p << ',' << s.step << ',' << l.layer << ',' << format_double(l.h) << ','
                    << (l.fired ? 1 : 0) << ',' << format_double(l.theta_norm) << ','
                    << format_double(l.violation) << ',' << s.token << ',' << s.label << ','
                    << format_double(s.wall_ms) << "\n";
            }
        }
    }
    if (!out) throw io_error("write failed: " + path);
}

// Rebuilds per-prompt step records from traces.csv (the analyze entry point).
inline std::vector<DecodeTrace> read_traces_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open for reading: " + path);
    std::vector<DecodeTrace> traces;
    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            if (line.rfind("prompt,", 0) != 0)
                throw io_error("unexpected traces.csv header: " + line);
            header_seen = true;
            continue;
        }
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 10) throw io_error("malformed traces.csv row: " + line);
        const std::size_t prompt = std::stoul(fields[0]);
        const int step = std::stoi(fields[1]);
        if (prompt >= traces.size()) traces.resize(prompt + 1);
        auto& steps = traces[prompt].steps;
        if (steps.empty() || steps.back().step != step) {
            StepRecord rec;
            rec.step = step;
            rec.token = std::stoi(fields[7]);
            rec.label = std::stoi(fields[8]);
            rec.is_object = rec.label >= 0;
            rec.wall_ms = std::stod(fields[9]);
            steps.push_back(std::move(rec));
        }
        StepLayerRecord l;
        l.layer = std::stoi(fields[2]);
        l.h = std::stod(fields[3]);
        l.fired = fields[4] == "1";
        l.theta_norm = std::stod(fields[5]);
        l.violation = std::stod(fields[6]);
        steps.back().layers.push_back(std::move(l));
    }
    return traces;
}

inline void write_bins_csv(const BinReport& report, const std::string& path) {
    auto out = open_for_write(path);
    out << "# bins schema_version=" << kSchemaVersion << "\n";
    out << "bin,count,rate,lo,hi\n";
    for (std::size_t b = 0; b < report.bins.size(); ++b) {
        const auto& bin = report.bins[b];
        out << (b + 1) << ',' << bin.count << ',' << format_double(bin.rate) << ','
            << format_double(bin.lo) << ',' << format_double(bin.hi) << "\n";
    }
    if (!out) throw io_error("write failed: " + path);
}

inline void write_ablation_csv(const AblationTable& table, const std::string& path) {
    auto out = open_for_write(path);
    out << "# ablation schema_version=" << kSchemaVersion << "\n";
    out << "parameter,value,hallucination_rate,object_recall,fired_fraction,object_tokens\n";
    for (const auto& row : table.rows) {
        out << row.parameter << ',' << row.value << ',' << format_double(row.hallucination_rate)
            << ',' << format_double(row.object_recall) << ',' << format_double(row.fired_fraction)
            << ',' << row.object_tokens << "\n";
    }
    if (!out) throw io_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// JSON summary

inline nlohmann::json summary_to_json(const Summary& s, const SteeringConfig& steering) {
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["steering"] = {{"mode", to_string(steering.mode)},
                     {"tau", steering.tau},
                     {"alpha", steering.alpha},
                     {"epsilon", steering.epsilon},
                     {"steered_layers", steering.steered_layers}};
    j["n_prompts"] = s.n_prompts;
    j["steps"] = s.steps;
    j["object_tokens"] = s.object_tokens;
    j["hallucinated_tokens"] = s.hallucinated_tokens;
    if (s.hallucination_rate)
        j["hallucination_rate"] = *s.hallucination_rate;
    else
        j["hallucination_rate"] = nullptr;  // undefined (no object tokens), not zero
    j["object_recall"] = s.object_recall;
    j["mean_fired_fraction"] = s.mean_fired_fraction;
    j["mean_fired_layers_per_step"] = s.mean_fired_layers_per_step;
    nlohmann::json per_layer = nlohmann::json::object();
    for (const auto& [layer, rate] : s.per_layer_firing)
        per_layer[std::to_string(layer)] = rate;
    j["per_layer_firing"] = per_layer;
    j["timing"] = {{"total_wall_ms", s.total_wall_ms}};
    return j;
}

inline void write_summary_json(const Summary& s, const SteeringConfig& steering,
                               const std::string& path) {
    auto out = open_for_write(path);
    out << summary_to_json(s, steering).dump(2) << "\n";
    if (!out) throw io_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// SVG plots. Plain SVG 1.1: well-formed XML, one root element with a viewBox.

namespace detail_svg {

inline double map_x(double v, double lo, double hi, double x0, double x1) {
    return x0 + (v - lo) / (hi - lo) * (x1 - x0);
}

inline std::string rect(double x, double y, double w, double h, const std::string& fill) {
    std::ostringstream s;
    s << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h
      << "\" fill=\"" << fill << "\"/>";
    return s.str();
}

inline std::string line(double x1, double y1, double x2, double y2, const std::string& stroke,
                        double width = 1.0) {
    std::ostringstream s;
    s << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2
      << "\" stroke=\"" << stroke << "\" stroke-width=\"" << width << "\"/>";
    return s.str();
}

inline std::string text(double x, double y, const std::string& body, int size = 12,
                        const std::string& anchor = "middle") {
    std::ostringstream s;
    s << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size
      << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\">" << body << "</text>";
    return s.str();
}

}  // namespace detail_svg

// Hallucination rate per barrier bin, bars plus Wilson-interval whiskers.
inline void write_bins_svg(const BinReport& report, const std::string& path) {
    using namespace detail_svg;
    const double W = 640, H = 400, left = 60, right = 20, top = 30, bottom = 50;
    const double x0 = left, x1 = W - right, y0 = H - bottom, y1 = top;
    std::ostringstream body;
    body << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    body << rect(0, 0, W, H, "#ffffff") << "\n";
    body << text(W / 2, 18, "Hallucination rate by barrier bin (95% Wilson interval)", 14) << "\n";
    for (int g = 0; g <= 5; ++g) {
        const double frac = g / 5.0;
        const double y = y0 + (y1 - y0) * frac;
        body << line(x0, y, x1, y, "#dddddd") << "\n";
        body << text(x0 - 8, y + 4, format_double(frac), 11, "end") << "\n";
    }
    const std::size_t n = report.bins.size();
    const double slot = (x1 - x0) / static_cast<double>(n);
    for (std::size_t b = 0; b < n; ++b) {
        const auto& bin = report.bins[b];
        const double cx = x0 + slot * (static_cast<double>(b) + 0.5);
        const double bw = slot * 0.6;
        const double y_rate = y0 + (y1 - y0) * bin.rate;
        body << rect(cx - bw / 2, y_rate, bw, y0 - y_rate, "#4878a8") << "\n";
        const double y_lo = y0 + (y1 - y0) * bin.lo;
        const double y_hi = y0 + (y1 - y0) * bin.hi;
        body << line(cx, y_lo, cx, y_hi, "#222222", 1.5) << "\n";
        body << line(cx - 5, y_lo, cx + 5, y_lo, "#222222", 1.5) << "\n";
        body << line(cx - 5, y_hi, cx + 5, y_hi, "#222222", 1.5) << "\n";
        body << text(cx, y0 + 16, std::to_string(b + 1)) << "\n";
    }
    body << text((x0 + x1) / 2, H - 12, "barrier bin (low to high)") << "\n";
    body << line(x0, y0, x1, y0, "#000000") << "\n";
    body << line(x0, y0, x0, y1, "#000000") << "\n";
    body << "</svg>\n";
    auto out = open_for_write(path);
    out << body.str();
    if (!out) throw io_error("write failed: " + path);
}

// Simple labeled horizontal bars, used for the throughput report.
inline void write_bars_svg(const std::vector<std::pair<std::string, double>>& bars,
                           const std::string& title, const std::string& unit,
                           const std::string& path) {
    using namespace detail_svg;
    const double W = 640, H = 80.0 + 40.0 * static_cast<double>(bars.size());
    double max_v = 1e-12;
    for (const auto& [_, v] : bars) max_v = std::max(max_v, v);
    std::ostringstream body;
    body << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    body << rect(0, 0, W, H, "#ffffff") << "\n";
    body << text(W / 2, 22, title, 14) << "\n";
    const double x0 = 150, x1 = W - 90;
    for (std::size_t i = 0; i < bars.size(); ++i) {
        const double y = 50 + 40 * static_cast<double>(i);
        const double w = (x1 - x0) * bars[i].second / max_v;
        body << text(x0 - 10, y + 14, bars[i].first, 12, "end") << "\n";
        body << rect(x0, y, w, 20, i == 0 ? "#4878a8" : "#a0b860") << "\n";
        body << text(x0 + w + 8, y + 14, format_double(bars[i].second) + " " + unit, 11, "start")
             << "\n";
    }
    body << "</svg>\n";
    auto out = open_for_write(path);
    out << body.str();
    if (!out) throw io_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Bundled emission for one experiment run.

enum class ReportStatus { written, empty_input };

inline ReportStatus emit_reports(const ExperimentResult& result, const std::string& out_dir,
                                 int n_bins = 9) {
    if (result.traces.empty()) return ReportStatus::empty_input;
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw io_error("cannot create output directory " + out_dir + ": " + ec.message());

    write_summary_json(result.summary, result.steering, out_dir + "/summary.json");
    write_traces_csv(result.traces, out_dir + "/traces.csv");
    long labeled = 0;
    for (const auto& t : result.traces)
        for (const auto& s : t.steps)
            if (s.is_object && !s.layers.empty()) ++labeled;
    if (labeled >= n_bins) {
        const BinReport bins = bin_analysis(result.traces, n_bins);
        write_bins_csv(bins, out_dir + "/bins.csv");
        write_bins_svg(bins, out_dir + "/bins.svg");
    }
    return ReportStatus::written;
}

}  // namespace bracs
