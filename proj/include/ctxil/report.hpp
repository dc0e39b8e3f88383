#pragma once

// metrics.csv (frozen column order) and a small SVG of the training curves.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "ctxil/data.hpp"
#include "ctxil/train.hpp"

namespace ctxil {

inline constexpr const char* kMetricsHeader =
    "iteration,mean_return,normalized_score,z_expert_distance,policy_z_distance,loss_self_consistency,"
    "loss_decoder,loss_vq,loss_z_inference,loss_jd,loss_reg_offline,loss_cross_domain,code_entropy";

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os << kMetricsHeader << '\n';
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const MetricsRow& r : rows) {
    os << r.iteration << ',' << format_double(r.mean_return) << ',' << format_double(r.normalized_score) << ','
       << format_double(r.z_expert_distance) << ',' << format_double(r.policy_z_distance) << ','
       << opt(r.loss_self_consistency) << ',' << opt(r.loss_decoder) << ',' << opt(r.loss_vq) << ','
       << opt(r.loss_z_inference) << ',' << opt(r.loss_jd) << ',' << opt(r.loss_reg_offline) << ','
       << opt(r.loss_cross_domain) << ',' << opt(r.code_entropy) << '\n';
  }
}

namespace detail {

struct Series {
  std::string label;
  std::string color;
  std::vector<double> y;
};

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// One panel: polylines scaled into [x0, x0+w] x [y0, y0+h].
inline void svg_panel(std::ostream& os, double x0, double y0, double w, double h, const std::string& title,
                      const std::vector<double>& x, const std::vector<Series>& series) {
  double lo = INFINITY, hi = -INFINITY;
  for (const Series& s : series)
    for (double v : s.y) lo = std::min(lo, v), hi = std::max(hi, v);
  if (!(hi > lo)) lo -= 1, hi += 1;
  const double xmax = x.empty() || x.back() <= 0 ? 1.0 : x.back();
  os << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << w << "\" height=\"" << h
     << "\" fill=\"none\" stroke=\"#888\"/>\n";
  os << "<text x=\"" << x0 << "\" y=\"" << y0 - 8 << "\" font-size=\"13\">" << title << "</text>\n";
  os << "<text x=\"" << x0 - 6 << "\" y=\"" << y0 + 10 << "\" font-size=\"10\" text-anchor=\"end\">" << svg_num(hi)
     << "</text>\n";
  os << "<text x=\"" << x0 - 6 << "\" y=\"" << y0 + h << "\" font-size=\"10\" text-anchor=\"end\">" << svg_num(lo)
     << "</text>\n";
  os << "<text x=\"" << x0 + w << "\" y=\"" << y0 + h + 14 << "\" font-size=\"10\" text-anchor=\"end\">"
     << svg_num(xmax) << "</text>\n";
  double ly = y0 + 14;
  for (const Series& s : series) {
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.y.size(); ++i)
      os << svg_num(x0 + w * x[i] / xmax) << ',' << svg_num(y0 + h * (hi - s.y[i]) / (hi - lo)) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << x0 + w - 4 << "\" y=\"" << ly << "\" font-size=\"10\" text-anchor=\"end\" fill=\""
       << s.color << "\">" << s.label << "</text>\n";
    ly += 12;
  }
}

}  // namespace detail

inline void write_curves_svg(std::ostream& os, const std::vector<MetricsRow>& rows, const std::string& title) {
  std::vector<double> x;
  detail::Series score{"normalized score", "#1f77b4", {}};
  detail::Series ze{"|z* - f(expert)|", "#2ca02c", {}}, zp{"|f(policy) - z*|", "#d62728", {}};
  for (const MetricsRow& r : rows) {
    x.push_back(r.iteration);
    score.y.push_back(r.normalized_score);
    ze.y.push_back(r.z_expert_distance);
    zp.y.push_back(r.policy_z_distance);
  }
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"760\" height=\"300\" font-family=\"sans-serif\">\n";
  os << "<text x=\"20\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  detail::svg_panel(os, 60, 50, 300, 210, "score", x, {score});
  detail::svg_panel(os, 430, 50, 300, 210, "embedding distance", x, {ze, zp});
  os << "</svg>\n";
}

inline void save_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  f << text;
  if (!f) throw FormatError("write failed: " + path);
}

}  // namespace ctxil
