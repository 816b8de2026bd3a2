#include "pcda/evalreport.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace pcda {

namespace fs = std::filesystem;

Eigen::MatrixXd ConfusionMatrix::row_normalized() const {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(counts.rows(), counts.cols());
  for (Eigen::Index i = 0; i < counts.rows(); ++i) {
    const int row = counts.row(i).sum();
    if (row > 0) out.row(i) = counts.row(i).cast<double>() / static_cast<double>(row);
  }
  return out;
}

double ConfusionMatrix::accuracy() const {
  const int t = total();
  if (t == 0) return 0.0;
  return static_cast<double>(counts.trace()) / static_cast<double>(t);
}

int predict_class(const Eigen::VectorXd& probs) {
  int best = 0;
  for (Eigen::Index i = 1; i < probs.size(); ++i) {
    if (probs(i) > probs(best)) best = static_cast<int>(i);
  }
  return best;
}

std::string confusion_csv(const ConfusionMatrix& m, const std::vector<std::string>& classes) {
  std::ostringstream out;
  out << "true\\pred";
  for (const auto& c : classes) out << "," << c;
  out << "\n";
  const Eigen::MatrixXd norm = m.row_normalized();
  for (Eigen::Index i = 0; i < m.counts.rows(); ++i) {
    out << classes[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < m.counts.cols(); ++j) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.4f", norm(i, j));
      out << "," << buf;
    }
    out << "\n";
  }
  return out.str();
}

namespace {

std::string fmt1(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  return buf;
}

struct Row {
  std::string label;
  std::vector<std::optional<double>> cells;
};

bool is_decimal_midpoint(double v) {
  const double scaled = v * 10.0;
  return std::abs(scaled - std::floor(scaled) - 0.5) < 1e-9;
}

}  // namespace

std::string compare_scenarios(const std::vector<ScenarioReport>& reports) {
  if (reports.empty()) throw ValidationError("compare_scenarios: need at least one report");

  std::vector<std::string> scenarios;
  for (const auto& r : reports) scenarios.push_back(r.scenario);

  // Ablation rows appear only for keys that exist somewhere, in fixed order.
  const std::vector<std::pair<std::string, std::string>> ablation_labels = {
      {"only-ae", "Ours (only-AE)"}, {"ae-l", "Ours (AE+L)"}};
  std::vector<Row> rows;

  auto collect = [&](const std::string& label, auto getter) {
    Row row;
    row.label = label;
    bool any = false;
    for (const auto& r : reports) {
      std::optional<double> v = getter(r);
      any = any || v.has_value();
      row.cells.push_back(v);
    }
    if (any) rows.push_back(std::move(row));
  };

  collect("w/o Adapt", [](const ScenarioReport& r) { return r.wo_adapt; });
  for (const auto& [key, label] : ablation_labels) {
    collect(label, [&key](const ScenarioReport& r) -> std::optional<double> {
      auto it = r.adapted.find(key);
      if (it == r.adapted.end()) return std::nullopt;
      return it->second;
    });
  }
  collect("Ours", [](const ScenarioReport& r) -> std::optional<double> {
    auto it = r.adapted.find("full");
    if (it == r.adapted.end()) return std::nullopt;
    return it->second;
  });
  collect("Supervised", [](const ScenarioReport& r) { return r.supervised; });

  // Column widths.
  std::size_t label_w = std::string("Scenario").size();
  for (const auto& r : rows) label_w = std::max(label_w, r.label.size());
  std::vector<std::size_t> col_w;
  for (const auto& s : scenarios) col_w.push_back(std::max<std::size_t>(s.size(), 5));
  col_w.push_back(5);  // Avg

  std::ostringstream out;
  auto pad = [&](const std::string& s, std::size_t w) {
    std::string p = s;
    while (p.size() < w) p.push_back(' ');
    return p;
  };

  out << pad("Scenario", label_w);
  for (std::size_t c = 0; c < scenarios.size(); ++c) out << "  " << pad(scenarios[c], col_w[c]);
  out << "  " << pad("Avg", col_w.back()) << "\n";

  std::vector<std::string> notes;
  for (const auto& r : rows) {
    out << pad(r.label, label_w);
    double sum = 0;
    int n = 0;
    for (std::size_t c = 0; c < r.cells.size(); ++c) {
      if (r.cells[c].has_value()) {
        sum += *r.cells[c];
        ++n;
        out << "  " << pad(fmt1(*r.cells[c]), col_w[c]);
      } else {
        out << "  " << pad("-", col_w[c]);
      }
    }
    if (n > 0) {
      const double avg = sum / n;
      out << "  " << pad(fmt1(avg), col_w.back());
      if (is_decimal_midpoint(avg)) {
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "row '%s': Avg %.2f is a one-decimal midpoint; printed %s by rounding the "
                      "stored double",
                      r.label.c_str(), avg, fmt1(avg).c_str());
        notes.push_back(buf);
      }
    } else {
      out << "  " << pad("-", col_w.back());
    }
    out << "\n";
  }
  for (const auto& n : notes) out << "note: " << n << "\n";
  return out.str();
}

std::vector<ScenarioReport> reference_results() {
  const std::vector<std::string> names = {"M->S", "M->S*", "S->M", "S->S*", "S*->M", "S*->S"};
  const double wo[] = {42.5, 22.3, 39.9, 23.5, 34.2, 46.9};
  const double ours[] = {62.8, 36.5, 41.9, 31.6, 50.4, 65.7};
  const double sup[] = {90.5, 53.2, 86.2, 53.2, 86.2, 90.5};
  std::vector<ScenarioReport> out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    ScenarioReport r;
    r.scenario = names[i];
    r.wo_adapt = wo[i];
    r.adapted["full"] = ours[i];
    r.supervised = sup[i];
    out.push_back(std::move(r));
  }
  return out;
}

// ---- cloud export --------------------------------------------------------------

void export_cloud_ply(const PointCloud& cloud, const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot write " + path.string());
  f << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
    << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  for (int i = 0; i < cloud.size(); ++i) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g\n", cloud.points(i, 0), cloud.points(i, 1),
                  cloud.points(i, 2));
    f << buf;
  }
}

PointCloud import_cloud_ply(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot read " + path.string());
  std::string line;
  int n = -1;
  while (std::getline(f, line)) {
    if (line.rfind("element vertex", 0) == 0) {
      n = std::stoi(line.substr(std::string("element vertex").size()));
    }
    if (line == "end_header") break;
  }
  if (n < 0) throw ValidationError("malformed PLY header in " + path.string());
  PointCloud cloud;
  cloud.points.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    if (!std::getline(f, line)) throw ValidationError("truncated PLY " + path.string());
    std::istringstream ss(line);
    ss >> cloud.points(i, 0) >> cloud.points(i, 1) >> cloud.points(i, 2);
  }
  return cloud;
}

std::vector<fs::path> export_clouds(const std::vector<PointCloud>& clouds, const fs::path& out_dir,
                                    const std::string& prefix) {
  fs::create_directories(out_dir);
  std::vector<fs::path> paths;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s%04zu.ply", prefix.c_str(), i);
    const fs::path p = out_dir / name;
    export_cloud_ply(clouds[i], p);
    paths.push_back(p);
  }
  return paths;
}

namespace {

void svg_panel(std::ostringstream& out, const PointCloud& cloud, double x0,
               const std::string& title, const std::string& color) {
  const double panel = 220, margin = 10;
  out << "<text x=\"" << x0 + panel / 2 << "\" y=\"16\" text-anchor=\"middle\" "
      << "font-family=\"monospace\" font-size=\"12\">" << title << "</text>\n";
  double lo = cloud.points.minCoeff(), hi = cloud.points.maxCoeff();
  if (hi <= lo) hi = lo + 1;
  const double s = (panel - 2 * margin) / (hi - lo);
  for (int i = 0; i < cloud.size(); ++i) {
    const double px = x0 + margin + (cloud.points(i, 0) - lo) * s;
    const double py = 24 + margin + (hi - cloud.points(i, 2)) * s;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"1\" fill=\"%s\"/>\n", px, py,
                  color.c_str());
    out << buf;
  }
}

}  // namespace

void export_triple_svg(const PointCloud& source, const PointCloud& synthetic,
                       const PointCloud& target, const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"680\" height=\"260\">\n";
  svg_panel(out, source, 0, "source", "#1f77b4");
  svg_panel(out, synthetic, 230, "synthetic", "#2ca02c");
  svg_panel(out, target, 460, "target", "#d62728");
  out << "</svg>\n";
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot write " + path.string());
  f << out.str();
}

}  // namespace pcda
