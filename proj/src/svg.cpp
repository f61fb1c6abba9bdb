#include "popql/svg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "popql/util.hpp"

namespace popql {

namespace {

constexpr double kW = 640, kH = 420;
constexpr double kLeft = 70, kRight = 20, kTop = 40, kBottom = 50;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

}  // namespace

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<SvgSeries>& series,
                           bool log_y) {
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool first = true;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            double yv = s.y[i];
            if (log_y) yv = std::log10(std::max(yv, 1e-300));
            if (!std::isfinite(yv) || !std::isfinite(s.x[i])) continue;
            if (first) {
                xmin = xmax = s.x[i];
                ymin = ymax = yv;
                first = false;
            } else {
                xmin = std::min(xmin, s.x[i]);
                xmax = std::max(xmax, s.x[i]);
                ymin = std::min(ymin, yv);
                ymax = std::max(ymax, yv);
            }
        }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    const double plot_w = kW - kLeft - kRight, plot_h = kH - kTop - kBottom;
    auto px = [&](double x) { return kLeft + (x - xmin) / (xmax - xmin) * plot_w; };
    auto py = [&](double y) {
        if (log_y) y = std::log10(std::max(y, 1e-300));
        return kTop + plot_h - (y - ymin) / (ymax - ymin) * plot_h;
    };

    std::ostringstream out;
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << kW << "' height='" << kH << "'>\n";
    out << "<rect width='100%' height='100%' fill='white'/>\n";
    out << "<text x='" << kW / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title
        << "</text>\n";
    out << "<line x1='" << kLeft << "' y1='" << kTop + plot_h << "' x2='" << kLeft + plot_w
        << "' y2='" << kTop + plot_h << "' stroke='black'/>\n";
    out << "<line x1='" << kLeft << "' y1='" << kTop << "' x2='" << kLeft << "' y2='"
        << kTop + plot_h << "' stroke='black'/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fx = xmin + (xmax - xmin) * i / 4.0;
        const double fy_raw = ymin + (ymax - ymin) * i / 4.0;
        out << "<text x='" << px(fx) << "' y='" << kTop + plot_h + 18
            << "' text-anchor='middle' font-size='11'>" << format_double(fx) << "</text>\n";
        const std::string ylab =
            log_y ? ("1e" + format_double(fy_raw)) : format_double(fy_raw);
        out << "<text x='" << kLeft - 8 << "' y='" << kTop + plot_h - plot_h * i / 4.0 + 4
            << "' text-anchor='end' font-size='11'>" << ylab << "</text>\n";
    }
    out << "<text x='" << kLeft + plot_w / 2 << "' y='" << kH - 10
        << "' text-anchor='middle' font-size='12'>" << x_label << "</text>\n";
    out << "<text x='16' y='" << kTop + plot_h / 2
        << "' text-anchor='middle' font-size='12' transform='rotate(-90 16 " << kTop + plot_h / 2
        << ")'>" << y_label << "</text>\n";

    int color_idx = 0;
    double legend_y = kTop + 6;
    for (const auto& s : series) {
        const std::string color = s.color.empty()
                                      ? kPalette[color_idx % 6]
                                      : (s.color == "#1f77b4" && color_idx > 0
                                             ? kPalette[color_idx % 6]
                                             : s.color);
        out << "<polyline fill='none' stroke='" << color << "' stroke-width='1.8' points='";
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            out << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
        }
        out << "'/>\n";
        out << "<text x='" << kLeft + plot_w - 4 << "' y='" << legend_y
            << "' text-anchor='end' font-size='11' fill='" << color << "'>" << s.label
            << "</text>\n";
        legend_y += 14;
        ++color_idx;
    }
    out << "</svg>\n";
    return out.str();
}

std::string svg_heatmap(const std::string& title, const Eigen::MatrixXd& grid) {
    const int rows = static_cast<int>(grid.rows()), cols = static_cast<int>(grid.cols());
    const double cell = 70, left = 40, top = 50;
    const double w = left * 2 + cell * cols, h = top + cell * rows + 30;
    const double vmax = std::max(grid.maxCoeff(), 1e-12);

    std::ostringstream out;
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    out << "<rect width='100%' height='100%' fill='white'/>\n";
    out << "<text x='" << w / 2 << "' y='24' text-anchor='middle' font-size='15'>" << title
        << "</text>\n";
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const double v = grid(r, c) / vmax;
            const int red = 255;
            const int other = static_cast<int>(std::lround(255 * (1.0 - std::sqrt(v))));
            out << "<rect x='" << left + c * cell << "' y='" << top + r * cell << "' width='"
                << cell << "' height='" << cell << "' fill='rgb(" << red << ',' << other << ','
                << other << ")' stroke='black'/>\n";
            out << "<text x='" << left + c * cell + cell / 2 << "' y='"
                << top + r * cell + cell / 2 + 4 << "' text-anchor='middle' font-size='11'>"
                << format_double(grid(r, c)) << "</text>\n";
        }
    out << "</svg>\n";
    return out.str();
}

}  // namespace popql
