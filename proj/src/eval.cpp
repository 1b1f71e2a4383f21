#include "desklm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace desklm::eval {

void PplReport::validate() const {
    std::map<std::string, size_t> last_len;
    for (const auto& row : rows) {
        if (!(row.ppl > 0.0) || !std::isfinite(row.ppl))
            throw IntegrityError("ppl report: non-positive perplexity for '" + row.label + "'");
        auto it = last_len.find(row.label);
        if (it != last_len.end() && row.length <= it->second)
            throw IntegrityError("ppl report: lengths not strictly increasing within '" +
                                 row.label + "'");
        last_len[row.label] = row.length;
    }
}

double PplReport::at(const std::string& label, size_t length) const {
    for (const auto& row : rows)
        if (row.label == label && row.length == length) return row.ppl;
    throw DomainError("ppl report: no row for '" + label + "' at length " +
                      std::to_string(length));
}

std::string to_csv(const PplReport& report) {
    std::ostringstream out;
    if (!report.model_id.empty()) out << "# model=" << report.model_id << "\n";
    if (!report.corpus_id.empty()) out << "# corpus=" << report.corpus_id << "\n";
    out << "technique,length,ppl\n";
    out.setf(std::ios::fmtflags(0), std::ios::floatfield);
    out.precision(6);
    for (const auto& row : report.rows)
        out << row.label << "," << row.length << "," << row.ppl << "\n";
    return out.str();
}

void write_svg_plot(const PplReport& report, const std::string& path) {
    const int width = 640, height = 420, margin = 56;
    double min_len = 1e300, max_len = 0, min_ppl = 1e300, max_ppl = 0;
    for (const auto& r : report.rows) {
        min_len = std::min(min_len, double(r.length));
        max_len = std::max(max_len, double(r.length));
        min_ppl = std::min(min_ppl, r.ppl);
        max_ppl = std::max(max_ppl, r.ppl);
    }
    if (report.rows.empty()) throw DomainError("plot: empty report");
    if (max_ppl <= min_ppl) max_ppl = min_ppl * 1.1 + 1.0;
    const double ly0 = std::log10(min_ppl), ly1 = std::log10(max_ppl);
    auto x_of = [&](double len) {
        return margin + (len - min_len) / std::max(1.0, max_len - min_len) *
                            (width - 2 * margin);
    };
    auto y_of = [&](double ppl) {
        return height - margin -
               (std::log10(ppl) - ly0) / (ly1 - ly0) * (height - 2 * margin);
    };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b"};
    std::ostringstream svg;
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
        << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
    svg << "<line x1='" << margin << "' y1='" << height - margin << "' x2='" << width - margin
        << "' y2='" << height - margin << "' stroke='black'/>\n";
    svg << "<line x1='" << margin << "' y1='" << margin << "' x2='" << margin << "' y2='"
        << height - margin << "' stroke='black'/>\n";
    svg << "<text x='" << width / 2 << "' y='" << height - 12
        << "' text-anchor='middle' font-size='13'>sequence length</text>\n";
    svg << "<text x='16' y='" << height / 2 << "' font-size='13' transform='rotate(-90 16 "
        << height / 2 << ")' text-anchor='middle'>perplexity (log scale)</text>\n";

    // One polyline per technique label, legend stacked top-left.
    std::vector<std::string> labels;
    for (const auto& r : report.rows)
        if (std::find(labels.begin(), labels.end(), r.label) == labels.end())
            labels.push_back(r.label);
    for (size_t li = 0; li < labels.size(); ++li) {
        const char* color = colors[li % 6];
        svg << "<polyline fill='none' stroke='" << color << "' stroke-width='2' points='";
        for (const auto& r : report.rows)
            if (r.label == labels[li]) svg << x_of(double(r.length)) << "," << y_of(r.ppl) << " ";
        svg << "'/>\n";
        for (const auto& r : report.rows)
            if (r.label == labels[li])
                svg << "<circle cx='" << x_of(double(r.length)) << "' cy='" << y_of(r.ppl)
                    << "' r='3' fill='" << color << "'/>\n";
        svg << "<text x='" << margin + 10 << "' y='" << margin + 16 + 16 * double(li)
            << "' font-size='12' fill='" << color << "'>" << labels[li] << "</text>\n";
    }
    for (const auto& r : report.rows) {
        svg << "<text x='" << x_of(double(r.length)) << "' y='" << height - margin + 16
            << "' text-anchor='middle' font-size='11'>" << r.length << "</text>\n";
    }
    svg << "</svg>\n";

    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write plot file " + path);
    f << svg.str();
    if (!f) throw IoError("short write to plot file " + path);
}

} // namespace desklm::eval
