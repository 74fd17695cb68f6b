#pragma once

// Minimal SVG line and bar charts for the analysis reports.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace ctrlr::svg {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct Bar {
  std::string label;
  double value = 0.0;
};

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  return colors[i % 6];
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

class Canvas {
 public:
  Canvas(double width, double height, double x0, double x1, double y0, double y1)
      : w_(width), h_(height), x0_(x0), x1_(x1 > x0 ? x1 : x0 + 1), y0_(y0), y1_(y1 > y0 ? y1 : y0 + 1) {}

  double px(double x) const { return left_ + (x - x0_) / (x1_ - x0_) * (w_ - left_ - right_); }
  double py(double y) const { return h_ - bottom_ - (y - y0_) / (y1_ - y0_) * (h_ - top_ - bottom_); }

  void title(const std::string& t) { text(w_ / 2, 20, t, "middle", 14); }

  void axes(const std::string& xlabel, const std::string& ylabel, int ticks = 5) {
    line(px(x0_), py(y0_), px(x1_), py(y0_), "#000");
    line(px(x0_), py(y0_), px(x0_), py(y1_), "#000");
    for (int i = 0; i <= ticks; ++i) {
      const double xv = x0_ + (x1_ - x0_) * i / ticks, yv = y0_ + (y1_ - y0_) * i / ticks;
      text(px(xv), py(y0_) + 16, number(xv), "middle", 10);
      text(px(x0_) - 6, py(yv) + 4, number(yv), "end", 10);
    }
    text(w_ / 2, h_ - 8, xlabel, "middle", 12);
    body_ << "<text x=\"14\" y=\"" << h_ / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
          << h_ / 2 << ")\">" << escape(ylabel) << "</text>\n";
  }

  void line(double xa, double ya, double xb, double yb, const std::string& color, bool dashed = false) {
    body_ << "<line x1=\"" << xa << "\" y1=\"" << ya << "\" x2=\"" << xb << "\" y2=\"" << yb << "\" stroke=\""
          << color << "\"" << (dashed ? " stroke-dasharray=\"4 3\"" : "") << "/>\n";
  }

  void vline(double x, const std::string& color, const std::string& label) {
    line(px(x), py(y0_), px(x), py(y1_), color, true);
    text(px(x) + 3, py(y1_) + 12, label, "start", 10);
  }

  void polyline(const Series& s, const std::string& color) {
    body_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i])) body_ << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    body_ << "\"/>\n";
  }

  void rect(double xa, double xb, double ya, double yb, const std::string& color) {
    body_ << "<rect x=\"" << px(xa) << "\" y=\"" << py(yb) << "\" width=\"" << std::max(0.0, px(xb) - px(xa))
          << "\" height=\"" << std::max(0.0, py(ya) - py(yb)) << "\" fill=\"" << color << "\"/>\n";
  }

  void text(double x, double y, const std::string& t, const char* anchor = "start", int size = 11) {
    body_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size << "\" text-anchor=\"" << anchor
          << "\">" << escape(t) << "</text>\n";
  }

  void legend(const std::vector<std::string>& names) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      const double y = top_ + 14 * static_cast<double>(i);
      line(w_ - right_ - 120, y, w_ - right_ - 100, y, palette(i));
      text(w_ - right_ - 95, y + 4, names[i], "start", 10);
    }
  }

  std::string str() const {
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_
        << "\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n"
        << body_.str() << "</svg>\n";
    return out.str();
  }

 private:
  static std::string number(double v) {
    std::ostringstream s;
    s.precision(3);
    s << v;
    return s.str();
  }

  double w_, h_, x0_, x1_, y0_, y1_;
  double left_ = 60, right_ = 20, top_ = 36, bottom_ = 44;
  std::ostringstream body_;
};

inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series, double y0 = 0.0, double y1 = 1.0) {
  double x0 = 0.0, x1 = 1.0;
  bool first = true;
  for (const auto& s : series)
    for (double x : s.x) {
      x0 = first ? x : std::min(x0, x);
      x1 = first ? x : std::max(x1, x);
      first = false;
    }
  Canvas c(640, 400, x0, x1, y0, y1);
  c.title(title);
  c.axes(xlabel, ylabel);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < series.size(); ++i) {
    c.polyline(series[i], palette(i));
    names.push_back(series[i].name);
  }
  c.legend(names);
  return c.str();
}

// Bars on a numeric x axis: bar i spans [edges[i], edges[i + 1]].
inline std::string histogram(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                             const std::vector<double>& edges, const std::vector<double>& heights,
                             const std::vector<std::pair<double, std::string>>& markers = {}) {
  double top = 1.0;
  for (double h : heights) top = std::max(top, h);
  Canvas c(640, 400, edges.front(), edges.back(), 0.0, top * 1.1);
  c.title(title);
  c.axes(xlabel, ylabel);
  for (std::size_t i = 0; i < heights.size(); ++i) c.rect(edges[i] + 0.05, edges[i + 1] - 0.05, 0.0, heights[i], palette(0));
  for (const auto& [x, label] : markers) c.vline(x, "#d62728", label);
  return c.str();
}

inline std::string bar_chart(const std::string& title, const std::string& ylabel, const std::vector<Bar>& bars,
                             double y1 = 1.0) {
  Canvas c(640, 400, 0.0, static_cast<double>(std::max<std::size_t>(bars.size(), 1)), 0.0, y1);
  c.title(title);
  c.axes("", ylabel, 4);
  for (std::size_t i = 0; i < bars.size(); ++i) {
    c.rect(i + 0.15, i + 0.85, 0.0, std::isfinite(bars[i].value) ? bars[i].value : 0.0, palette(i));
    c.text(c.px(i + 0.5), c.py(0.0) + 30, bars[i].label, "middle", 10);
  }
  return c.str();
}

}  // namespace ctrlr::svg
