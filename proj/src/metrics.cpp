#include "susan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace susan {

namespace {

void require_same_size(const BinaryMask& s, const BinaryMask& r, const char* op) {
  if (s.height != r.height || s.width != r.width) {
    throw std::invalid_argument(std::string(op) + ": mask sizes differ (" + std::to_string(s.height) + "x" +
                                std::to_string(s.width) + " vs " + std::to_string(r.height) + "x" +
                                std::to_string(r.width) + ")");
  }
}

struct Overlap {
  std::size_t s = 0;
  std::size_t r = 0;
  std::size_t both = 0;
};

Overlap overlap(const BinaryMask& s, const BinaryMask& r) {
  Overlap o;
  for (std::size_t i = 0; i < s.bits.size(); ++i) {
    const bool a = s.bits[i] != 0;
    const bool b = r.bits[i] != 0;
    o.s += a;
    o.r += b;
    o.both += a && b;
  }
  return o;
}

double dice_from(const Overlap& o) {
  if (o.s + o.r == 0) return 1.0;
  return 2.0 * static_cast<double>(o.both) / static_cast<double>(o.s + o.r);
}

double voe_from(const Overlap& o) {
  const std::size_t uni = o.s + o.r - o.both;
  if (uni == 0) return 0.0;
  return 1.0 - static_cast<double>(o.both) / static_cast<double>(uni);
}

// One-dimensional squared distance transform (lower envelope of parabolas).
void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  const double inf = std::numeric_limits<double>::infinity();
  auto meet = [&](int q, int p) {
    return ((f[q] + q * static_cast<double>(q)) - (f[p] + p * static_cast<double>(p))) / (2.0 * (q - p));
  };
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;  // never a minimizer
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s = meet(q, v[k]);
    while (s <= z[k]) {  // z[0] is -inf, so k stays >= 0
      --k;
      s = meet(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), inf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double dq = q - v[j];
    d[q] = dq * dq + f[v[j]];
  }
}

// Exact squared Euclidean distance (in pixels) from every pixel to the nearest feature pixel.
std::vector<double> squared_distance_map(const std::vector<std::array<std::size_t, 2>>& features, std::size_t h,
                                         std::size_t w) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(h * w, inf);
  for (const auto& p : features) grid[p[0] * w + p[1]] = 0.0;
  const std::size_t m = std::max(h, w);
  std::vector<double> f(m), d(m), z(m + 1);
  std::vector<int> v(m);
  f.resize(h);
  d.resize(h);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) f[y] = grid[y * w + x];
    edt_1d(f, d, v, z);
    for (std::size_t y = 0; y < h; ++y) grid[y * w + x] = d[y];
  }
  f.resize(w);
  d.resize(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) f[x] = grid[y * w + x];
    edt_1d(f, d, v, z);
    for (std::size_t x = 0; x < w; ++x) grid[y * w + x] = d[x];
  }
  return grid;
}

double directed_sum(const std::vector<std::array<std::size_t, 2>>& from, const std::vector<double>& to_map,
                    std::size_t w) {
  double total = 0.0;
  for (const auto& p : from) total += std::sqrt(to_map[p[0] * w + p[1]]);
  return total;
}

}  // namespace

BinaryMask BinaryMask::from_labels(const LabelMask& mask, std::uint8_t cls, double spacing_mm) {
  BinaryMask m(mask.height, mask.width, spacing_mm);
  for (std::size_t i = 0; i < mask.labels.size(); ++i) m.bits[i] = mask.labels[i] == cls ? 1 : 0;
  return m;
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

double dice(const BinaryMask& s, const BinaryMask& r) {
  require_same_size(s, r, "dice");
  return dice_from(overlap(s, r));
}

double voe(const BinaryMask& s, const BinaryMask& r) {
  require_same_size(s, r, "voe");
  return voe_from(overlap(s, r));
}

std::vector<std::array<std::size_t, 2>> boundary_pixels(const BinaryMask& m) {
  std::vector<std::array<std::size_t, 2>> out;
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == m.height || x + 1 == m.width || !m.at(y - 1, x) ||
                        !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1);
      if (edge) out.push_back({y, x});
    }
  }
  return out;
}

SurfaceSums surface_distance_sums(const BinaryMask& s, const BinaryMask& r) {
  require_same_size(s, r, "assd");
  if (s.spacing != r.spacing || !(s.spacing > 0.0)) {
    throw std::invalid_argument("assd: masks need the same positive spacing");
  }
  const auto bs = boundary_pixels(s);
  const auto br = boundary_pixels(r);
  if (bs.empty() || br.empty()) throw MetricError("undefined surface distance: empty mask");
  const auto map_s = squared_distance_map(bs, s.height, s.width);
  const auto map_r = squared_distance_map(br, r.height, r.width);
  SurfaceSums out;
  out.distance_mm = (directed_sum(bs, map_r, s.width) + directed_sum(br, map_s, s.width)) * s.spacing;
  out.boundary_count = bs.size() + br.size();
  return out;
}

double assd(const BinaryMask& s, const BinaryMask& r) {
  const SurfaceSums sums = surface_distance_sums(s, r);
  return sums.distance_mm / static_cast<double>(sums.boundary_count);
}

void ConfusionCounts::add(const ConfusionCounts& other) {
  if (other.correct.size() != correct.size()) throw std::invalid_argument("ConfusionCounts: class count differs");
  for (std::size_t i = 0; i < correct.size(); ++i) {
    correct[i] += other.correct[i];
    total[i] += other.total[i];
  }
}

double ConfusionCounts::accuracy(const std::vector<bool>& excluded) const {
  std::uint64_t hit = 0;
  std::uint64_t all = 0;
  for (std::size_t i = 0; i < correct.size(); ++i) {
    if (total[i] == 0) continue;
    if (i < excluded.size() && excluded[i]) continue;
    hit += correct[i];
    all += total[i];
  }
  if (all == 0) throw MetricError("per-pixel accuracy: no pixels of any counted class");
  return static_cast<double>(hit) / static_cast<double>(all);
}

AccuracyResult per_pixel_accuracy(const LabelMask& pred, const LabelMask& truth, std::size_t classes) {
  if (pred.height != truth.height || pred.width != truth.width) {
    throw std::invalid_argument("per_pixel_accuracy: mask sizes differ");
  }
  AccuracyResult r{0.0, ConfusionCounts(classes)};
  for (std::size_t i = 0; i < truth.labels.size(); ++i) {
    const std::uint8_t t = truth.labels[i];
    if (t >= classes) throw std::out_of_range("per_pixel_accuracy: truth label out of range");
    ++r.counts.total[t];
    if (pred.labels[i] == t) ++r.counts.correct[t];
  }
  r.accuracy = r.counts.accuracy();
  return r;
}

template <typename T>
AccuracyResult fcn_score(RNet<T>& classifier, const Tensor4<T>& images, const std::vector<LabelMask>& truths,
                         const std::vector<bool>& absent_in_training) {
  const Shape s = images.shape();
  if (truths.size() != s.n) throw std::invalid_argument("fcn_score: image and mask counts differ");
  const std::size_t classes = classifier.config().classes;
  AccuracyResult out{0.0, ConfusionCounts(classes)};
  const std::size_t chunk = 16;
  for (std::size_t first = 0; first < s.n; first += chunk) {
    const std::size_t count = std::min(chunk, s.n - first);
    Tensor4<T> probs;
    classifier.forward(images.slice_batch(first, count), Mode::eval, nullptr, &probs);
    const auto labels = argmax_labels(probs);
    for (std::size_t k = 0; k < count; ++k) {
      LabelMask pred(s.h, s.w);
      std::copy_n(labels.begin() + static_cast<std::ptrdiff_t>(k * s.plane()), s.plane(), pred.labels.begin());
      out.counts.add(per_pixel_accuracy(pred, truths[first + k], classes).counts);
    }
  }
  out.accuracy = out.counts.accuracy(absent_in_training);
  return out;
}

template AccuracyResult fcn_score<float>(RNet<float>&, const Tensor4<float>&, const std::vector<LabelMask>&,
                                         const std::vector<bool>&);
template AccuracyResult fcn_score<double>(RNet<double>&, const Tensor4<double>&, const std::vector<LabelMask>&,
                                          const std::vector<bool>&);

SubjectScores score_subject(const std::vector<LabelMask>& pred, const std::vector<LabelMask>& truth, double spacing) {
  if (pred.size() != truth.size() || pred.empty()) {
    throw std::invalid_argument("score_subject: need equal, non-zero slice counts");
  }
  SubjectScores out;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    Overlap pooled;
    double dist = 0.0;
    std::size_t bcount = 0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
      const auto s = BinaryMask::from_labels(pred[k], static_cast<std::uint8_t>(c), spacing);
      const auto r = BinaryMask::from_labels(truth[k], static_cast<std::uint8_t>(c), spacing);
      require_same_size(s, r, "score_subject");
      const Overlap o = overlap(s, r);
      pooled.s += o.s;
      pooled.r += o.r;
      pooled.both += o.both;
      if (o.s > 0 && o.r > 0) {
        const SurfaceSums sums = surface_distance_sums(s, r);
        dist += sums.distance_mm;
        bcount += sums.boundary_count;
      } else if (o.s + o.r > 0) {
        ++out.assd_skipped_slices[c];
      }
    }
    out.dice[c] = dice_from(pooled);
    out.voe[c] = voe_from(pooled);
    out.assd_defined[c] = bcount > 0;
    out.assd_mm[c] = bcount > 0 ? dist / static_cast<double>(bcount) : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                    std::size_t exact_max) {
  if (a.size() != b.size()) throw std::invalid_argument("wilcoxon: samples differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double v = a[i] - b[i];
    if (!std::isfinite(v)) throw std::invalid_argument("wilcoxon: non-finite difference");
    if (v != 0.0) d.push_back(v);
  }
  WilcoxonResult res;
  if (d.empty() && !a.empty()) {
    res.degenerate = true;
    return res;
  }
  const std::size_t n = d.size();
  if (n < 5) throw std::invalid_argument("wilcoxon: need at least 5 non-zero differences, got " + std::to_string(n));
  res.n = n;

  // Mid ranks of |d|, doubled so they stay integral.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return std::fabs(d[i]) < std::fabs(d[j]); });
  std::vector<std::size_t> rank2(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::fabs(d[order[j + 1]]) == std::fabs(d[order[i]])) ++j;
    const std::size_t r2 = (i + 1) + (j + 1);  // twice the mean of ranks i+1..j+1
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = r2;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  std::size_t w2 = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (d[i] > 0) w2 += rank2[i];
  res.w_plus = static_cast<double>(w2) / 2.0;

  if (n <= exact_max) {
    res.exact = true;
    const std::size_t max_sum = n * (n + 1);
    std::vector<double> ways(max_sum + 1, 0.0);
    ways[0] = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t s = max_sum + 1; s-- > rank2[i];) ways[s] += ways[s - rank2[i]];
    }
    double below = 0.0;
    double above = 0.0;
    double all = 0.0;
    for (std::size_t s = 0; s <= max_sum; ++s) {
      all += ways[s];
      if (s <= w2) below += ways[s];
      if (s >= w2) above += ways[s];
    }
    res.p_value = std::min(1.0, 2.0 * std::min(below, above) / all);
  } else {
    const double nn = static_cast<double>(n);
    const double mu = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    const double z = std::max(0.0, std::fabs(res.w_plus - mu) - 0.5) / std::sqrt(var);
    res.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  }
  return res;
}

std::string class_name(std::size_t cls) {
  switch (cls) {
    case kBackground: return "background";
    case kFemur: return "femur";
    case kFemoralCartilage: return "femoral_cartilage";
    case kTibia: return "tibia";
    case kTibialCartilage: return "tibial_cartilage";
    default: return "class" + std::to_string(cls);
  }
}

bool is_cartilage(std::size_t cls) { return cls == kFemoralCartilage || cls == kTibialCartilage; }

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd r;
  r.n = values.size();
  if (values.empty()) {
    r.mean = r.std = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  double s = 0.0;
  for (double v : values) s += v;
  r.mean = s / static_cast<double>(r.n);
  if (r.n > 1) {
    double q = 0.0;
    for (double v : values) q += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(q / static_cast<double>(r.n - 1));
  }
  return r;
}

std::vector<MetricsRow> summarize(const std::string& dataset, const std::string& method,
                                  const std::vector<SubjectScores>& subjects) {
  std::vector<MetricsRow> rows;
  for (std::size_t c = 1; c < kNumClasses; ++c) {
    std::vector<double> dc, vo, as;
    for (const auto& s : subjects) {
      dc.push_back(s.dice[c]);
      vo.push_back(s.voe[c]);
      if (s.assd_defined[c]) as.push_back(s.assd_mm[c]);
    }
    MetricsRow row;
    row.dataset = dataset;
    row.method = method;
    row.cls = c;
    row.dc = mean_std(dc);
    row.voe = is_cartilage(c) ? mean_std(vo) : mean_std({});
    row.assd_mm = mean_std(as);
    rows.push_back(row);
  }
  return rows;
}

std::string format_number(double v) {
  if (!std::isfinite(v)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12f", v);
  std::string s(buf);
  if (s.find_first_not_of("-0.") == std::string::npos && s.front() == '-') s.erase(0, 1);
  return s;
}

void write_metrics_csv(std::ostream& out, const MetricsReport& report) {
  for (const auto& note : report.header_notes) out << "# " << note << '\n';
  out << "dataset,method,class,DC_mean,DC_std,VOE_mean,VOE_std,ASSD_mean_mm,ASSD_std_mm\n";
  for (const auto& r : report.rows) {
    out << r.dataset << ',' << r.method << ',' << class_name(r.cls) << ',' << format_number(r.dc.mean) << ','
        << format_number(r.dc.std) << ',' << format_number(r.voe.mean) << ',' << format_number(r.voe.std) << ','
        << format_number(r.assd_mm.mean) << ',' << format_number(r.assd_mm.std) << '\n';
  }
}

void write_pvalue_matrix_csv(std::ostream& out, const std::string& dataset, const std::vector<MethodDice>& methods) {
  out << "dataset,class,method";
  for (const auto& m : methods) out << ',' << m.method;
  out << '\n';
  for (std::size_t c = 1; c < kNumClasses; ++c) {
    for (const auto& a : methods) {
      out << dataset << ',' << class_name(c) << ',' << a.method;
      for (const auto& b : methods) {
        out << ',';
        if (&a == &b) {
          out << "NA";
          continue;
        }
        try {
          const WilcoxonResult w = wilcoxon_signed_rank(a.per_class[c], b.per_class[c]);
          out << format_number(w.p_value);
        } catch (const std::invalid_argument&) {
          out << "NA";  // too few non-zero differences
        }
      }
      out << '\n';
    }
  }
}

}  // namespace susan
