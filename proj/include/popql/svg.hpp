#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace popql {

/// Minimal SVG renderers for sweep outputs. CSV files are the contract;
/// these charts are a convenience view of the same numbers.
struct SvgSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
    std::string color = "#1f77b4";
    bool log_y = false;
};

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<SvgSeries>& series,
                           bool log_y = false);

std::string svg_heatmap(const std::string& title, const Eigen::MatrixXd& grid);

}  // namespace popql
