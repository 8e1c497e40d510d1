#pragma once

// Minimal SVG output for heatmaps and Gantt charts. CSV files remain the
// authoritative results; these are for looking at.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "comet/pipeline_sim.hpp"

namespace comet::svg {

inline std::string gray(double v) {
  const int g = int(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", g, g, g);
  return buf;
}

inline std::string hsl(std::size_t i, std::size_t n) {
  return "hsl(" + std::to_string(n ? (i * 360) / n : 0) + ",60%,60%)";
}

/// Grid of cells values[row][col] in [0,1], drawn as gray levels.
inline void heatmap(std::ostream& os, const std::vector<std::vector<double>>& values,
                    const std::vector<std::string>& row_labels, const std::vector<std::string>& col_labels,
                    const std::string& title, const std::string& x_label, const std::string& y_label) {
  const std::size_t rows = values.size();
  const std::size_t cols = rows ? values.front().size() : 0;
  const int cell = cols > 64 ? 6 : 28, left = 70, top = 40;
  const int w = left + int(cols) * cell + 20, h = top + int(rows) * cell + 50;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-size=\"13\">" << title << "</text>\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c)
      os << "<rect x=\"" << left + int(c) * cell << "\" y=\"" << top + int(r) * cell << "\" width=\"" << cell
         << "\" height=\"" << cell << "\" fill=\"" << gray(values[r][c]) << "\"/>\n";
    if (r < row_labels.size())
      os << "<text x=\"" << left - 4 << "\" y=\"" << top + int(r) * cell + cell / 2 + 3
         << "\" text-anchor=\"end\">" << row_labels[r] << "</text>\n";
  }
  const std::size_t stride = cell < 12 ? std::max<std::size_t>(1, cols / 16) : 1;
  for (std::size_t c = 0; c < cols && c < col_labels.size(); c += stride)
    os << "<text x=\"" << left + int(c) * cell + cell / 2 << "\" y=\"" << top + int(rows) * cell + 14
       << "\" text-anchor=\"middle\">" << col_labels[c] << "</text>\n";
  os << "<text x=\"" << left + int(cols) * cell / 2 << "\" y=\"" << h - 8 << "\" text-anchor=\"middle\">"
     << x_label << "</text>\n";
  os << "<text x=\"12\" y=\"" << top + int(rows) * cell / 2 << "\" transform=\"rotate(-90 12 "
     << top + int(rows) * cell / 2 << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
  os << "</svg>\n";
}

/// One lane per worker, one bar per (chunk, layer), colored by chunk.
inline void gantt(std::ostream& os, const sim::ScheduleResult& r, double px_per_unit = 0.0) {
  const double span = std::max(r.makespan, 1e-9);
  if (px_per_unit <= 0.0) px_per_unit = std::clamp(900.0 / span, 1.0, 60.0);
  const int lane = 22, left = 60, top = 30;
  const int w = left + int(span * px_per_unit) + 20;
  const int h = top + int(r.cfg.n_workers) * lane + 30;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  os << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << r.scheduler << ": makespan " << r.makespan
     << ", bubble " << r.bubble_fraction << "</text>\n";
  for (std::size_t wk = 0; wk < r.cfg.n_workers; ++wk)
    os << "<text x=\"" << left - 4 << "\" y=\"" << top + int(wk) * lane + 14 << "\" text-anchor=\"end\">w" << wk
       << "</text>\n";
  for (const auto& t : r.tasks) {
    const double x = left + t.start * px_per_unit, bw = (t.finish - t.start) * px_per_unit;
    os << "<rect x=\"" << x << "\" y=\"" << top + int(t.worker) * lane + 2 << "\" width=\"" << bw
       << "\" height=\"" << lane - 4 << "\" fill=\"" << hsl(t.chunk, r.cfg.n_chunks)
       << "\" stroke=\"#333\" stroke-width=\"0.5\"><title>chunk " << t.chunk << " layer " << t.layer
       << "</title></rect>\n";
  }
  os << "<text x=\"" << left << "\" y=\"" << h - 8 << "\">time</text>\n";
  os << "</svg>\n";
}

}  // namespace comet::svg
