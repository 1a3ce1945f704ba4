#include "factcal/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <sstream>

namespace factcal {

using nlohmann::json;

json eval_table_json(const std::vector<ModelEval>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"model", r.model},
                   {"false_rate", r.false_rate},
                   {"ori_ppl", r.ori_ppl},
                   {"adv_ppl", r.adv_ppl},
                   {"lm_ppl", r.lm_ppl},
                   {"em", r.em},
                   {"f1", r.f1},
                   {"calibration_params", r.calibration_params}});
  }
  return out;
}

std::string eval_table_csv(const std::vector<ModelEval>& rows) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "model,false_rate,ori_ppl,adv_ppl,lm_ppl,em,f1,calibration_params\n";
  for (const auto& r : rows) {
    out << r.model << ',' << r.false_rate << ',' << r.ori_ppl << ',' << r.adv_ppl << ',' << r.lm_ppl << ',' << r.em
        << ',' << r.f1 << ',' << r.calibration_params << '\n';
  }
  return out.str();
}

namespace {

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string param_count(std::size_t n) {
  if (n == 0) return "-";
  if (n >= 1000000) return fixed(static_cast<double>(n) / 1e6, 2) + "M";
  if (n >= 1000) return fixed(static_cast<double>(n) / 1e3, 1) + "K";
  return std::to_string(n);
}

}  // namespace

std::string eval_table_text(const std::vector<ModelEval>& rows) {
  const std::vector<std::string> header{"Model", "False Rate", "Ori", "Adv", "LM", "EM", "F1", "# Calib. Params"};
  std::vector<std::vector<std::string>> cells{header};
  for (const auto& r : rows) {
    cells.push_back({r.model, fixed(100 * r.false_rate, 2) + "%", fixed(r.ori_ppl, 2), fixed(r.adv_ppl, 2),
                     fixed(r.lm_ppl, 2), fixed(100 * r.em, 2), fixed(100 * r.f1, 2), param_count(r.calibration_params)});
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t c = 0; c < cells[i].size(); ++c) {
      if (c) out << "  ";
      if (c == 0) {
        out << std::left << std::setw(static_cast<int>(width[c])) << cells[i][c];
      } else {
        out << std::right << std::setw(static_cast<int>(width[c])) << cells[i][c];
      }
    }
    out << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    }
  }
  return out.str();
}

std::string sweep_csv(const std::string& axis, const std::vector<SweepPoint>& points) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << axis << ",facts,slots,attach_layer,em,f1,false_rate\n";
  for (const auto& p : points) {
    out << p.value << ',' << p.facts << ',' << p.slots << ',' << p.attach_layer << ',' << p.em << ',' << p.f1 << ','
        << p.false_rate << '\n';
  }
  return out.str();
}

std::string sweep_svg(const std::string& axis, const std::vector<SweepPoint>& points) {
  constexpr double W = 480, H = 320, left = 56, right = 120, top = 24, bottom = 48;
  const double pw = W - left - right, ph = H - top - bottom;
  const std::size_t n = points.size();
  auto x_at = [&](std::size_t i) { return left + (n <= 1 ? pw / 2 : pw * static_cast<double>(i) / static_cast<double>(n - 1)); };
  auto y_at = [&](double v) { return top + ph * (1.0 - std::clamp(v, 0.0, 1.0)); };
  auto num = [](double v) { return fixed(v, 1); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = k / 4.0;
    s << "<line x1=\"" << num(left) << "\" y1=\"" << num(y_at(v)) << "\" x2=\"" << num(left + pw) << "\" y2=\""
      << num(y_at(v)) << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << num(left - 6) << "\" y=\"" << num(y_at(v) + 4) << "\" text-anchor=\"end\">" << fixed(v, 2)
      << "</text>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    s << "<text x=\"" << num(x_at(i)) << "\" y=\"" << num(top + ph + 16) << "\" text-anchor=\"middle\">"
      << points[i].value << "</text>\n";
  }
  s << "<text x=\"" << num(left + pw / 2) << "\" y=\"" << num(H - 10) << "\" text-anchor=\"middle\">" << axis
    << "</text>\n";
  struct Series {
    const char* name;
    const char* color;
    double SweepPoint::*field;
  };
  const Series series[] = {{"EM", "#1f77b4", &SweepPoint::em},
                           {"F1", "#2ca02c", &SweepPoint::f1},
                           {"false rate", "#d62728", &SweepPoint::false_rate}};
  int legend = 0;
  for (const auto& ser : series) {
    s << "<polyline fill=\"none\" stroke=\"" << ser.color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < n; ++i) s << (i ? " " : "") << num(x_at(i)) << ',' << num(y_at(points[i].*ser.field));
    s << "\"/>\n";
    for (std::size_t i = 0; i < n; ++i) {
      s << "<circle cx=\"" << num(x_at(i)) << "\" cy=\"" << num(y_at(points[i].*ser.field)) << "\" r=\"3\" fill=\""
        << ser.color << "\"/>\n";
    }
    const double ly = top + 12 + 18 * legend++;
    s << "<line x1=\"" << num(left + pw + 12) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(left + pw + 32) << "\" y2=\""
      << num(ly) << "\" stroke=\"" << ser.color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << num(left + pw + 38) << "\" y=\"" << num(ly + 4) << "\">" << ser.name << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace factcal
