#pragma once

#include "discover/core.hpp"
#include "discover/engine.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace discover {

// ---------------------------------------------------------------------------
// CSV

inline constexpr const char* kCsvHeader =
    "step,lr,train_loss,msd,in_var,between_var,noise_mean_norm,gbar_drift";

namespace detail {

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

/// Fixed column order, one row per recorded step, reals at 17 significant
/// digits so a read round-trips exactly.
inline void write_run_csv(const std::string& path, const RunRecord& record) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "write_run_csv: cannot open " + path);
  out << kCsvHeader << "\n";
  for (const RunRow& r : record.rows) {
    out << r.step << ',' << detail::fmt17(r.lr) << ',' << detail::fmt17(r.train_loss) << ','
        << detail::fmt17(r.msd) << ',' << detail::fmt17(r.in_var) << ','
        << detail::fmt17(r.between_var) << ',' << detail::fmt17(r.noise_mean_norm) << ','
        << detail::fmt17(r.gbar_drift) << "\n";
  }
}

inline std::vector<RunRow> read_run_csv(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "read_run_csv: cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "read_run_csv: empty file");
  require(line == kCsvHeader, "read_run_csv: unexpected header in " + path);
  std::vector<RunRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    require(cells.size() == 8, "read_run_csv: malformed row in " + path);
    RunRow r;
    r.step = std::strtoll(cells[0].c_str(), nullptr, 10);
    r.lr = std::strtod(cells[1].c_str(), nullptr);
    r.train_loss = std::strtod(cells[2].c_str(), nullptr);
    r.msd = std::strtod(cells[3].c_str(), nullptr);
    r.in_var = std::strtod(cells[4].c_str(), nullptr);
    r.between_var = std::strtod(cells[5].c_str(), nullptr);
    r.noise_mean_norm = std::strtod(cells[6].c_str(), nullptr);
    r.gbar_drift = std::strtod(cells[7].c_str(), nullptr);
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// JSON

inline void write_json(const std::string& path, const nlohmann::json& doc) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "write_json: cannot open " + path);
  out << doc.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// SVG line plots
//
// Self-contained deterministic renderer: fixed viewport, axes from the data
// extents, optional min-max band per series, no timestamps.

struct PlotSeries {
  std::string name;
  std::vector<double> xs;
  std::vector<double> ys;
  std::vector<double> band_lo;  // optional, same length as xs
  std::vector<double> band_hi;
};

struct PlotSpec {
  std::string title;
  std::string xlabel;
  std::string ylabel;
  bool log_y = false;
};

namespace detail {

inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline const char* plot_color(std::size_t i) {
  static constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                             "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  return kPalette[i % 8];
}

}  // namespace detail

inline void write_line_plot(const std::string& path, const PlotSpec& spec,
                            const std::vector<PlotSeries>& series) {
  require(!series.empty(), "write_line_plot: no series");
  constexpr double W = 800, H = 500, L = 70, R = 20, T = 40, B = 55;
  const auto usable = [&](double v) {
    return std::isfinite(v) && (!spec.log_y || v > 0.0);
  };
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const PlotSeries& s : series) {
    require(s.xs.size() == s.ys.size(), "write_line_plot: xs/ys length mismatch");
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !usable(s.ys[i])) continue;
      xmin = std::min(xmin, s.xs[i]);
      xmax = std::max(xmax, s.xs[i]);
      ymin = std::min(ymin, s.ys[i]);
      ymax = std::max(ymax, s.ys[i]);
      if (s.band_lo.size() == s.xs.size() && usable(s.band_lo[i]) && usable(s.band_hi[i])) {
        ymin = std::min(ymin, s.band_lo[i]);
        ymax = std::max(ymax, s.band_hi[i]);
      }
    }
  }
  require(std::isfinite(xmin) && std::isfinite(ymin), "write_line_plot: no plottable points");
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) ymax = ymin == 0.0 ? 1.0 : ymin * (1.0 + 1e-6) + 1e-12;
  const double ylo = spec.log_y ? std::log10(ymin) : ymin;
  const double yhi = spec.log_y ? std::log10(ymax) : ymax;
  const auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  const auto sy = [&](double y) {
    const double v = spec.log_y ? std::log10(y) : y;
    return H - B - (v - ylo) / (yhi - ylo) * (H - T - B);
  };

  std::ofstream out(path);
  require(static_cast<bool>(out), "write_line_plot: cannot open " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  out << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"16\" "
         "font-family=\"sans-serif\">"
      << spec.title << "</text>\n";

  // axes and ticks
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double fx = xmin + (xmax - xmin) * i / 5.0;
    out << "<line x1=\"" << sx(fx) << "\" y1=\"" << H - B << "\" x2=\"" << sx(fx) << "\" y2=\""
        << H - B + 5 << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << sx(fx) << "\" y=\"" << H - B + 20
        << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">"
        << detail::fmt6(fx) << "</text>\n";
    const double fv = ylo + (yhi - ylo) * i / 5.0;
    const double fy = spec.log_y ? std::pow(10.0, fv) : fv;
    const double py = H - B - (H - T - B) * i / 5.0;
    out << "<line x1=\"" << L - 5 << "\" y1=\"" << py << "\" x2=\"" << L << "\" y2=\"" << py
        << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << L - 8 << "\" y=\"" << py + 4
        << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">"
        << detail::fmt6(fy) << "</text>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12
      << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\">" << spec.xlabel
      << "</text>\n";
  out << "<text x=\"18\" y=\"" << (T + H - B) / 2
      << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\" "
         "transform=\"rotate(-90 18 "
      << (T + H - B) / 2 << ")\">" << spec.ylabel << "</text>\n";

  // bands first, then lines
  for (std::size_t si = 0; si < series.size(); ++si) {
    const PlotSeries& s = series[si];
    if (s.band_lo.size() != s.xs.size()) continue;
    std::string pts;
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (!usable(s.band_hi[i])) continue;
      pts += detail::fmt6(sx(s.xs[i])) + "," + detail::fmt6(sy(s.band_hi[i])) + " ";
    }
    for (std::size_t i = s.xs.size(); i-- > 0;) {
      if (!usable(s.band_lo[i])) continue;
      pts += detail::fmt6(sx(s.xs[i])) + "," + detail::fmt6(sy(s.band_lo[i])) + " ";
    }
    if (!pts.empty())
      out << "<polygon points=\"" << pts << "\" fill=\"" << detail::plot_color(si)
          << "\" fill-opacity=\"0.18\" stroke=\"none\"/>\n";
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    const PlotSeries& s = series[si];
    std::string pts;
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (!usable(s.ys[i])) continue;
      pts += detail::fmt6(sx(s.xs[i])) + "," + detail::fmt6(sy(s.ys[i])) + " ";
    }
    if (!pts.empty())
      out << "<polyline points=\"" << pts << "\" fill=\"none\" stroke=\""
          << detail::plot_color(si) << "\" stroke-width=\"1.6\"/>\n";
    out << "<text x=\"" << W - R - 8 << "\" y=\"" << T + 16 + 16 * static_cast<double>(si)
        << "\" text-anchor=\"end\" font-size=\"12\" font-family=\"sans-serif\" fill=\""
        << detail::plot_color(si) << "\">" << s.name << "</text>\n";
  }
  out << "</svg>\n";
}

/// Mean plus min-max band across per-seed curves sharing the same xs.
inline PlotSeries band_series(const std::string& name, const std::vector<double>& xs,
                              const std::vector<std::vector<double>>& per_seed) {
  require(!per_seed.empty(), "band_series: no curves");
  PlotSeries s;
  s.name = name;
  s.xs = xs;
  const std::size_t len = xs.size();
  for (const auto& c : per_seed) require(c.size() == len, "band_series: ragged curves");
  s.ys.resize(len);
  if (per_seed.size() > 1) {
    s.band_lo.resize(len);
    s.band_hi.resize(len);
  }
  for (std::size_t i = 0; i < len; ++i) {
    double sum = 0.0, lo = per_seed[0][i], hi = per_seed[0][i];
    for (const auto& c : per_seed) {
      sum += c[i];
      lo = std::min(lo, c[i]);
      hi = std::max(hi, c[i]);
    }
    s.ys[i] = sum / static_cast<double>(per_seed.size());
    if (per_seed.size() > 1) {
      s.band_lo[i] = lo;
      s.band_hi[i] = hi;
    }
  }
  return s;
}

}  // namespace discover
