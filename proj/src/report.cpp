#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cowlab/eval.hpp"

namespace cowlab {

namespace {

std::string num(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
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

std::string svg_open(int w, int h) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         std::to_string(w) + "\" height=\"" + std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " +
         std::to_string(h) + "\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

std::string text(double x, double y, const std::string& s, int size = 11, const std::string& anchor = "middle") {
  return "<text x=\"" + num(x, 1) + "\" y=\"" + num(y, 1) + "\" font-size=\"" + std::to_string(size) +
         "\" text-anchor=\"" + anchor + "\">" + xml_escape(s) + "</text>\n";
}

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  os << content;
  if (!os) throw DataError("failed writing " + p.string());
}

}  // namespace

std::string summary_csv(const std::vector<CvReport>& reports) {
  std::string out = "algorithm,dr_method,n_components,mean_accuracy,mean_macro_f1,std_accuracy,std_macro_f1,seed\n";
  for (const auto& r : reports) {
    out += to_string(r.config.algorithm) + "," + r.config.dr_label() + "," + std::to_string(r.config.n_components) + "," +
           num(r.mean_accuracy) + "," + num(r.mean_macro_f1) + "," + num(r.std_accuracy) + "," + num(r.std_macro_f1) +
           "," + std::to_string(r.config.seed) + "\n";
  }
  return out;
}

std::string confusion_csv(const ConfusionMatrix& cm) {
  std::string out = "true\\predicted";
  for (auto n : kClassNames) out += "," + std::string(n);
  out += "\n";
  for (int i = 0; i < kNumClasses; ++i) {
    out += std::string(kClassNames[i]);
    for (int j = 0; j < kNumClasses; ++j) out += "," + std::to_string(cm.counts[i][j]);
    out += "\n";
  }
  return out;
}

std::string confusion_svg(const CvReport& r) {
  constexpr int cell = 34, left = 60, top = 60;
  const int size = left + cell * kNumClasses + 20;
  std::string s = svg_open(size, size + 20);
  s += text(size / 2.0, 24, "Confusion matrix " + r.config.label() + " (rows: true, columns: predicted)", 13);
  for (int i = 0; i < kNumClasses; ++i) {
    s += text(left + cell * (i + 0.5), top - 8, std::string(kClassNames[i]));
    s += text(left - 8, top + cell * (i + 0.65), std::string(kClassNames[i]), 11, "end");
    const long long sup = r.confusion.support(i);
    for (int j = 0; j < kNumClasses; ++j) {
      const long long v = r.confusion.counts[i][j];
      const double frac = sup > 0 ? static_cast<double>(v) / static_cast<double>(sup) : 0.0;
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - frac)));
      s += "<rect x=\"" + std::to_string(left + cell * j) + "\" y=\"" + std::to_string(top + cell * i) + "\" width=\"" +
           std::to_string(cell) + "\" height=\"" + std::to_string(cell) + "\" fill=\"rgb(" + std::to_string(shade) + "," +
           std::to_string(shade) + ",255)\" stroke=\"#999\"/>\n";
      if (v > 0) s += text(left + cell * (j + 0.5), top + cell * (i + 0.62), std::to_string(v), 10);
    }
  }
  s += "</svg>\n";
  return s;
}

std::string bar_chart_svg(const std::vector<CvReport>& reports) {
  constexpr int group = 56, left = 50, top = 40, plot_h = 240;
  const int width = left + group * static_cast<int>(reports.size()) + 120;
  const int height = top + plot_h + 110;
  std::string s = svg_open(width, height);
  s += text(width / 2.0, 22, "Mean accuracy and macro-F1 per configuration", 13);
  for (int t = 0; t <= 10; t += 2) {
    const double y = top + plot_h * (1.0 - t / 10.0);
    s += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + num(y, 1) + "\" x2=\"" +
         std::to_string(left + group * static_cast<int>(reports.size())) + "\" y2=\"" + num(y, 1) +
         "\" stroke=\"#ddd\"/>\n";
    s += text(left - 6, y + 4, num(t / 10.0, 1), 10, "end");
  }
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const double x0 = left + group * static_cast<double>(i) + 8;
    const double vals[2] = {reports[i].mean_accuracy, reports[i].mean_macro_f1};
    const char* colors[2] = {"#3b6fb6", "#e08a2c"};
    for (int b = 0; b < 2; ++b) {
      const double h = plot_h * std::clamp(vals[b], 0.0, 1.0);
      s += "<rect x=\"" + num(x0 + b * 20, 1) + "\" y=\"" + num(top + plot_h - h, 1) + "\" width=\"18\" height=\"" +
           num(h, 1) + "\" fill=\"" + colors[b] + "\"/>\n";
    }
    const double lx = x0 + 20, ly = top + plot_h + 12;
    s += "<text x=\"" + num(lx, 1) + "\" y=\"" + num(ly, 1) + "\" font-size=\"10\" text-anchor=\"end\" transform=\"rotate(-60 " +
         num(lx, 1) + " " + num(ly, 1) + ")\">" + xml_escape(reports[i].config.label()) + "</text>\n";
  }
  const double lx = left + group * static_cast<double>(reports.size()) + 12;
  s += "<rect x=\"" + num(lx, 1) + "\" y=\"" + std::to_string(top) + "\" width=\"12\" height=\"12\" fill=\"#3b6fb6\"/>\n";
  s += text(lx + 16, top + 10, "accuracy", 11, "start");
  s += "<rect x=\"" + num(lx, 1) + "\" y=\"" + std::to_string(top + 20) + "\" width=\"12\" height=\"12\" fill=\"#e08a2c\"/>\n";
  s += text(lx + 16, top + 30, "macro-F1", 11, "start");
  s += "</svg>\n";
  return s;
}

std::string radar_svg(const std::vector<CvReport>& reports, const std::string& dr) {
  std::vector<const CvReport*> rs;
  for (const auto& r : reports)
    if (r.config.dr_label() == dr) rs.push_back(&r);
  constexpr double cx = 200, cy = 210, radius = 140;
  std::string s = svg_open(400, 420);
  s += text(cx, 24, "Accuracy and macro-F1 by classifier, " + dr, 13);
  const auto n = rs.size();
  auto point = [&](std::size_t i, double v) {
    const double a = -M_PI / 2 + 2 * M_PI * static_cast<double>(i) / static_cast<double>(n);
    return std::pair<double, double>{cx + radius * v * std::cos(a), cy + radius * v * std::sin(a)};
  };
  for (int ring = 1; ring <= 5; ++ring) {
    std::string pts;
    for (std::size_t i = 0; i < n; ++i) {
      const auto [x, y] = point(i, ring / 5.0);
      pts += num(x, 1) + "," + num(y, 1) + " ";
    }
    s += "<polygon points=\"" + pts + "\" fill=\"none\" stroke=\"#ddd\"/>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto [x, y] = point(i, 1.0);
    s += "<line x1=\"" + num(cx, 1) + "\" y1=\"" + num(cy, 1) + "\" x2=\"" + num(x, 1) + "\" y2=\"" + num(y, 1) +
         "\" stroke=\"#ccc\"/>\n";
    const auto [tx, ty] = point(i, 1.12);
    s += text(tx, ty + 4, to_string(rs[i]->config.algorithm));
  }
  const char* colors[2] = {"#3b6fb6", "#e08a2c"};
  for (int m = 0; m < 2; ++m) {
    std::string pts;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = m == 0 ? rs[i]->mean_accuracy : rs[i]->mean_macro_f1;
      const auto [x, y] = point(i, std::clamp(v, 0.0, 1.0));
      pts += num(x, 1) + "," + num(y, 1) + " ";
    }
    s += "<polygon points=\"" + pts + "\" fill=\"" + colors[m] + "\" fill-opacity=\"0.2\" stroke=\"" + colors[m] +
         "\" stroke-width=\"2\"/>\n";
  }
  s += text(20, 400, "blue: accuracy, orange: macro-F1", 11, "start");
  s += "</svg>\n";
  return s;
}

std::vector<std::filesystem::path> emit_report(const std::vector<CvReport>& reports, const std::filesystem::path& out_dir) {
  if (reports.empty()) throw DataError("no reports to emit");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create report directory " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& name, const std::string& content) {
    write_file(out_dir / name, content);
    written.push_back(out_dir / name);
  };
  emit("summary.csv", summary_csv(reports));
  nlohmann::json all = nlohmann::json::array();
  for (const auto& r : reports) all.push_back(r.to_json());
  emit("report.json", nlohmann::json{{"format_version", 1}, {"reports", all}}.dump(2) + "\n");
  for (const auto& r : reports) {
    emit("confusion_" + r.config.label() + ".csv", confusion_csv(r.confusion));
    emit("confusion_" + r.config.label() + ".svg", confusion_svg(r));
  }
  if (reports.size() >= 2) emit("comparison_bars.svg", bar_chart_svg(reports));
  std::map<std::string, std::vector<Algorithm>> per_dr;
  for (const auto& r : reports) per_dr[r.config.dr_label()].push_back(r.config.algorithm);
  for (const auto& [dr, algs] : per_dr)
    if (algs.size() >= 3) emit("radar_" + dr + ".svg", radar_svg(reports, dr));
  return written;
}

}  // namespace cowlab
