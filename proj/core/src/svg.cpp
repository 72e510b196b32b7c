#include <algorithm>
#include <fstream>
#include <sstream>

#include "pelab/ablate.hpp"
#include "pelab/experiment.hpp"

namespace pelab {

namespace {

constexpr double kGlyphWidth = 90.0;
constexpr double kMarginLeft = 70.0;
constexpr double kMarginTop = 30.0;
constexpr double kPlotHeight = 360.0;

double y_of(double acc) { return kMarginTop + (1.0 - acc) * kPlotHeight; }

}  // namespace

void emit_svg_violin(const std::string& ablation_csv, const std::string& svg_path) {
    AblationReport rep = AblationReport::read_csv(ablation_csv);
    const auto summary = rep.per_layer_summary();
    const double width = kMarginLeft + kGlyphWidth * static_cast<double>(summary.size()) + 30.0;
    const double height = kMarginTop + kPlotHeight + 50.0;

    std::ofstream f(svg_path);
    if (!f) throw IoError("emit_svg_violin: cannot open " + svg_path);
    f.precision(6);
    f << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    f << "  <rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    // y axis with a few accuracy ticks
    f << "  <line x1=\"" << kMarginLeft - 10 << "\" y1=\"" << y_of(1.0) << "\" x2=\""
      << kMarginLeft - 10 << "\" y2=\"" << y_of(0.0) << "\" stroke=\"black\"/>\n";
    for (double tick : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        f << "  <text x=\"8\" y=\"" << y_of(tick) + 4 << "\" font-size=\"12\">" << tick
          << "</text>\n";
        f << "  <line x1=\"" << kMarginLeft - 14 << "\" y1=\"" << y_of(tick) << "\" x2=\""
          << kMarginLeft - 10 << "\" y2=\"" << y_of(tick) << "\" stroke=\"black\"/>\n";
    }
    // baseline accuracy
    f << "  <line x1=\"" << kMarginLeft - 10 << "\" y1=\"" << y_of(rep.baseline_acc)
      << "\" x2=\"" << width - 20 << "\" y2=\"" << y_of(rep.baseline_acc)
      << "\" stroke=\"#888\" stroke-dasharray=\"6 4\"/>\n";
    f << "  <text x=\"" << width - 110 << "\" y=\"" << y_of(rep.baseline_acc) - 5
      << "\" font-size=\"11\" fill=\"#555\">baseline</text>\n";

    for (std::size_t l = 0; l < summary.size(); ++l) {
        const LayerSummary& s = summary[l];
        const double cx = kMarginLeft + kGlyphWidth * (static_cast<double>(l) + 0.5);
        const double half = 18.0;
        f << "  <g class=\"layer-glyph\" id=\"layer-" << s.layer << "\">\n";
        // whiskers
        f << "    <line x1=\"" << cx << "\" y1=\"" << y_of(s.min) << "\" x2=\"" << cx
          << "\" y2=\"" << y_of(s.max) << "\" stroke=\"black\"/>\n";
        f << "    <line x1=\"" << cx - 8 << "\" y1=\"" << y_of(s.min) << "\" x2=\"" << cx + 8
          << "\" y2=\"" << y_of(s.min) << "\" stroke=\"black\"/>\n";
        f << "    <line x1=\"" << cx - 8 << "\" y1=\"" << y_of(s.max) << "\" x2=\"" << cx + 8
          << "\" y2=\"" << y_of(s.max) << "\" stroke=\"black\"/>\n";
        // interquartile box and median
        f << "    <rect x=\"" << cx - half << "\" y=\"" << y_of(s.q3) << "\" width=\""
          << 2 * half << "\" height=\"" << std::max(1.0, y_of(s.q1) - y_of(s.q3))
          << "\" fill=\"#9ecae1\" stroke=\"black\"/>\n";
        f << "    <line x1=\"" << cx - half << "\" y1=\"" << y_of(s.median) << "\" x2=\""
          << cx + half << "\" y2=\"" << y_of(s.median)
          << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
        f << "    <text x=\"" << cx - 22 << "\" y=\"" << kMarginTop + kPlotHeight + 25
          << "\" font-size=\"12\">layer " << s.layer + 1 << "</text>\n";
        f << "  </g>\n";
    }
    f << "</svg>\n";
}

}  // namespace pelab
