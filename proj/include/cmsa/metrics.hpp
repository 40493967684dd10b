#pragma once

#include <array>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cmsa/error.hpp"

namespace cmsa {

/// Intersection and union pixel counts of one prediction.
struct IouCounts {
  std::uint64_t intersection = 0, uni = 0;

  /// Empty union means both masks are empty, scored as a perfect match.
  double iou() const { return uni == 0 ? 1.0 : double(intersection) / double(uni); }
};

/// Masks hold 0 / nonzero per pixel.
inline IouCounts iou_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size())
    throw DimensionError("iou: mask sizes differ (" + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()) + ")");
  IouCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    c.intersection += p && g;
    c.uni += p || g;
  }
  return c;
}

inline double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  return iou_counts(pred, gt).iou();
}

inline double overall_iou(std::span<const IouCounts> samples) {
  if (samples.empty()) throw UsageError("overall_iou: empty sample set");
  std::uint64_t i = 0, u = 0;
  for (const auto& s : samples) {
    i += s.intersection;
    u += s.uni;
  }
  return u == 0 ? 1.0 : double(i) / double(u);
}

inline double mean_iou(std::span<const double> ious) {
  if (ious.empty()) throw UsageError("mean_iou: empty sample set");
  double s = 0;
  for (double v : ious) s += v;
  return s / double(ious.size());
}

inline double mean_iou(std::span<const IouCounts> samples) {
  std::vector<double> v;
  v.reserve(samples.size());
  for (const auto& s : samples) v.push_back(s.iou());
  return mean_iou(std::span<const double>(v));
}

/// Fraction of samples with IoU strictly above x.
inline double prec_at(std::span<const double> ious, double x) {
  if (ious.empty()) throw UsageError("prec_at: empty sample set");
  if (!(x > 0 && x < 1)) throw UsageError("prec_at: threshold must lie in (0, 1)");
  std::size_t n = 0;
  for (double v : ious) n += v > x;
  return double(n) / double(ious.size());
}

inline constexpr std::array<double, 5> kPrecThresholds{0.5, 0.6, 0.7, 0.8, 0.9};

struct EvalReport {
  double overall_iou = 0, mean_iou = 0;
  std::array<double, 5> prec{};  // at kPrecThresholds
  std::vector<std::string> ids;
  std::vector<IouCounts> samples;

  std::vector<double> ious() const {
    std::vector<double> v;
    for (const auto& s : samples) v.push_back(s.iou());
    return v;
  }
};

inline EvalReport make_report(std::vector<IouCounts> samples, std::vector<std::string> ids = {}) {
  if (samples.empty()) throw UsageError("evaluation report needs at least one sample");
  if (!ids.empty() && ids.size() != samples.size()) throw DimensionError("report ids do not match samples");
  EvalReport r;
  r.samples = std::move(samples);
  r.ids = std::move(ids);
  r.overall_iou = overall_iou(r.samples);
  const auto v = r.ious();
  r.mean_iou = mean_iou(std::span<const double>(v));
  for (std::size_t i = 0; i < kPrecThresholds.size(); ++i) r.prec[i] = prec_at(v, kPrecThresholds[i]);
  return r;
}

/// Flat key=value text.
inline void write_report(std::ostream& out, const EvalReport& r) {
  out << std::setprecision(10);
  out << "samples=" << r.samples.size() << '\n';
  out << "overall_iou=" << r.overall_iou << '\n';
  out << "mean_iou=" << r.mean_iou << '\n';
  for (std::size_t i = 0; i < kPrecThresholds.size(); ++i)
    out << "prec@" << std::setprecision(1) << std::fixed << kPrecThresholds[i] << std::defaultfloat
        << std::setprecision(10) << '=' << r.prec[i] << '\n';
}

/// Per-sample CSV: id,intersection,union,iou.
inline void write_per_sample_csv(std::ostream& out, const EvalReport& r) {
  out << "id,intersection,union,iou\n" << std::setprecision(10);
  for (std::size_t i = 0; i < r.samples.size(); ++i)
    out << (r.ids.empty() ? std::to_string(i) : r.ids[i]) << ',' << r.samples[i].intersection << ','
        << r.samples[i].uni << ',' << r.samples[i].iou() << '\n';
}

}  // namespace cmsa
