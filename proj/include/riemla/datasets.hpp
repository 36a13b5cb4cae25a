#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "riemla/loss.hpp"
#include "riemla/rng.hpp"

namespace riemla {

enum class DatasetKind { banana_like, pinwheel, gapped_sine, csv };
enum class TaskKind { classification, regression };

/// Seeded synthetic generators at desk scale plus a CSV escape hatch.
/// Generation is bit-reproducible from the seed and splits are disjoint by
/// construction (one draw, split before returning).
struct DatasetSpec {
  DatasetKind kind = DatasetKind::banana_like;
  int n_train = 0;
  int n_test = 0;
  std::uint64_t seed = 0;
  double noise = 0.2;          // banana: point noise std; gapped_sine: target noise std
  double pinwheel_rate = 4.0;  // radians of swirl per unit radius
  double pinwheel_radial_std = 0.3;
  double pinwheel_angle_std = 0.05;
  int pinwheel_arms = 5;
  std::string train_path, test_path;  // csv kind only

  static DatasetSpec banana_like_default(std::uint64_t seed) {
    DatasetSpec s;
    s.kind = DatasetKind::banana_like;
    s.n_train = 300;
    s.n_test = 200;
    s.seed = seed;
    return s;
  }
  /// 200 examples per arm; 350 train / 650 test.
  static DatasetSpec pinwheel_default(std::uint64_t seed) {
    DatasetSpec s;
    s.kind = DatasetKind::pinwheel;
    s.n_train = 350;
    s.n_test = 650;
    s.seed = seed;
    return s;
  }
  static DatasetSpec gapped_sine_default(std::uint64_t seed) {
    DatasetSpec s;
    s.kind = DatasetKind::gapped_sine;
    s.n_train = 150;
    s.n_test = 50;
    s.seed = seed;
    return s;
  }

  TaskKind task() const {
    return kind == DatasetKind::gapped_sine ? TaskKind::regression : TaskKind::classification;
  }
  int input_dim() const { return kind == DatasetKind::gapped_sine ? 1 : 2; }
  int num_classes() const {
    switch (kind) {
      case DatasetKind::banana_like: return 2;
      case DatasetKind::pinwheel: return pinwheel_arms;
      default: return 0;
    }
  }
};

namespace detail {

/// Stratified split: per-class proportional allocation (largest remainder)
/// of a shuffled class pool, so train/test label proportions match the full
/// set within one count per class.
inline std::pair<BatchInput, BatchInput> stratified_split(const Matrix& x,
                                                          const std::vector<int>& labels,
                                                          int n_train, int n_classes, Rng& rng) {
  const long n = x.rows();
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(n_classes));
  for (long i = 0; i < n; ++i)
    by_class[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])].push_back(
        static_cast<int>(i));

  std::vector<int> take(static_cast<std::size_t>(n_classes), 0);
  std::vector<std::pair<double, int>> rem;
  int assigned = 0;
  for (int c = 0; c < n_classes; ++c) {
    double exact = static_cast<double>(n_train) * by_class[static_cast<std::size_t>(c)].size() /
                   static_cast<double>(n);
    take[static_cast<std::size_t>(c)] = static_cast<int>(std::floor(exact));
    assigned += take[static_cast<std::size_t>(c)];
    rem.push_back({exact - std::floor(exact), c});
  }
  std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (std::size_t i = 0; assigned < n_train; i = (i + 1) % rem.size()) {
    int c = rem[i].second;
    if (take[static_cast<std::size_t>(c)] <
        static_cast<int>(by_class[static_cast<std::size_t>(c)].size())) {
      ++take[static_cast<std::size_t>(c)];
      ++assigned;
    }
  }

  std::vector<int> train_idx, test_idx;
  for (int c = 0; c < n_classes; ++c) {
    auto& pool = by_class[static_cast<std::size_t>(c)];
    rng.shuffle(pool);
    for (std::size_t i = 0; i < pool.size(); ++i)
      (static_cast<int>(i) < take[static_cast<std::size_t>(c)] ? train_idx : test_idx)
          .push_back(pool[i]);
  }

  auto gather = [&](const std::vector<int>& idx) {
    BatchInput out;
    out.inputs.resize(static_cast<long>(idx.size()), x.cols());
    out.labels.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.inputs.row(static_cast<long>(i)) = x.row(idx[i]);
      out.labels.push_back(labels[static_cast<std::size_t>(idx[i])]);
    }
    return out;
  };
  return {gather(train_idx), gather(test_idx)};
}

}  // namespace detail

/// Generates (train, test). banana_like: two interleaved crescents of radius
/// 1 centered at (0,0) and (1,0.5), class 1 vertically flipped, isotropic
/// noise. pinwheel: `arms` spiral arms with radius |N(1, radial_std)| and
/// angle arm * 2 pi / arms + rate * r + N(0, angle_std). gapped_sine:
/// y = 0.8 sin(3x) + 0.1 x + noise with training x uniform on
/// [0, 1.5] u [3, 6] and test x inside the (1.5, 3) gap.
inline std::pair<BatchInput, BatchInput> generate(const DatasetSpec& spec) {
  if (spec.kind == DatasetKind::csv)
    throw std::invalid_argument("generate: csv datasets are loaded, not generated");
  if (spec.n_train < 1 || spec.n_test < 1)
    throw std::invalid_argument("generate: n_train and n_test must be positive");

  Rng rng = Rng::stream(spec.seed, 0xDA7A, static_cast<std::uint64_t>(spec.kind));
  const int n_total = spec.n_train + spec.n_test;

  if (spec.kind == DatasetKind::banana_like) {
    Matrix x(n_total, 2);
    std::vector<int> labels(static_cast<std::size_t>(n_total));
    for (int i = 0; i < n_total; ++i) {
      int cls = i % 2;  // balanced
      double phi = 3.14159265358979323846 * rng.uniform();
      double px, py;
      if (cls == 0) {
        px = std::cos(phi);
        py = std::sin(phi);
      } else {
        px = 1.0 + std::cos(phi);
        py = 0.5 - std::sin(phi);
      }
      x(i, 0) = px + spec.noise * rng.normal();
      x(i, 1) = py + spec.noise * rng.normal();
      labels[static_cast<std::size_t>(i)] = cls;
    }
    return detail::stratified_split(x, labels, spec.n_train, 2, rng);
  }

  if (spec.kind == DatasetKind::pinwheel) {
    const int arms = spec.pinwheel_arms;
    if (arms < 2) throw std::invalid_argument("generate: pinwheel needs at least 2 arms");
    Matrix x(n_total, 2);
    std::vector<int> labels(static_cast<std::size_t>(n_total));
    for (int i = 0; i < n_total; ++i) {
      int arm = i % arms;
      double r = std::abs(1.0 + spec.pinwheel_radial_std * rng.normal());
      double angle = arm * 2.0 * 3.14159265358979323846 / arms + spec.pinwheel_rate * r +
                     spec.pinwheel_angle_std * rng.normal();
      x(i, 0) = r * std::cos(angle);
      x(i, 1) = r * std::sin(angle);
      labels[static_cast<std::size_t>(i)] = arm;
    }
    return detail::stratified_split(x, labels, spec.n_train, arms, rng);
  }

  // gapped_sine
  auto target = [&](double xv) { return 0.8 * std::sin(3.0 * xv) + 0.1 * xv; };
  BatchInput train, test;
  train.inputs.resize(spec.n_train, 1);
  train.targets.resize(spec.n_train, 1);
  for (int i = 0; i < spec.n_train; ++i) {
    // uniform over [0, 1.5] u [3, 6] via a measure-preserving shift
    double u = 4.5 * rng.uniform();
    double xv = u < 1.5 ? u : u + 1.5;
    train.inputs(i, 0) = xv;
    train.targets(i, 0) = target(xv) + spec.noise * rng.normal();
  }
  test.inputs.resize(spec.n_test, 1);
  test.targets.resize(spec.n_test, 1);
  for (int i = 0; i < spec.n_test; ++i) {
    double xv = 1.5 + 1.5 * rng.uniform();
    test.inputs(i, 0) = xv;
    test.targets(i, 0) = target(xv) + spec.noise * rng.normal();
  }
  return {std::move(train), std::move(test)};
}

/// CSV layout: header `x1,...,xD,y`, one numeric row per point.
/// Classification labels must be integral.
inline void write_csv(const std::string& path, const BatchInput& data, TaskKind task) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_csv: cannot open " + path);
  const long d = data.inputs.cols();
  for (long j = 0; j < d; ++j) out << "x" << (j + 1) << ",";
  out << "y\n";
  char buf[64];
  for (long i = 0; i < data.inputs.rows(); ++i) {
    for (long j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", data.inputs(i, j));
      out << buf << ",";
    }
    if (task == TaskKind::classification) {
      out << data.labels[static_cast<std::size_t>(i)];
    } else {
      std::snprintf(buf, sizeof(buf), "%.17g", data.targets(i, 0));
      out << buf;
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("write_csv: write failed for " + path);
}

inline BatchInput load_csv(const std::string& path, TaskKind task) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open " + path);

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_csv: " + path + " is empty");
  long n_cols = 1 + static_cast<long>(std::count(line.begin(), line.end(), ','));
  if (n_cols < 2)
    throw std::runtime_error("load_csv: " + path + " header needs at least x1 and y columns");
  const long d = n_cols - 1;

  std::vector<std::vector<double>> rows;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> cells;
    std::stringstream ss(line);
    std::string cell;
    long col = 0;
    while (std::getline(ss, cell, ',')) {
      ++col;
      std::size_t pos = 0;
      double value = 0.0;
      bool ok = true;
      try {
        value = std::stod(cell, &pos);
      } catch (const std::exception&) {
        ok = false;
      }
      while (ok && pos < cell.size()) {
        if (!std::isspace(static_cast<unsigned char>(cell[pos]))) ok = false;
        ++pos;
      }
      if (!ok || !std::isfinite(value)) {
        std::ostringstream msg;
        msg << "load_csv: " << path << ": non-numeric cell '" << cell << "' at line " << line_no
            << ", column " << col;
        throw std::runtime_error(msg.str());
      }
      cells.push_back(value);
    }
    if (static_cast<long>(cells.size()) != n_cols) {
      std::ostringstream msg;
      msg << "load_csv: " << path << ": line " << line_no << " has " << cells.size()
          << " cells, expected " << n_cols;
      throw std::runtime_error(msg.str());
    }
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw std::runtime_error("load_csv: " + path + " has no data rows");

  BatchInput data;
  data.inputs.resize(static_cast<long>(rows.size()), d);
  if (task == TaskKind::regression) data.targets.resize(static_cast<long>(rows.size()), 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (long j = 0; j < d; ++j) data.inputs(static_cast<long>(i), j) = rows[i][static_cast<std::size_t>(j)];
    double y = rows[i][static_cast<std::size_t>(d)];
    if (task == TaskKind::classification) {
      double rounded = std::round(y);
      if (y != rounded || rounded < 0) {
        std::ostringstream msg;
        msg << "load_csv: " << path << ": class label " << y << " at line " << (i + 2)
            << " is not a non-negative integer";
        throw std::runtime_error(msg.str());
      }
      data.labels.push_back(static_cast<int>(rounded));
    } else {
      data.targets(static_cast<long>(i), 0) = y;
    }
  }
  return data;
}

}  // namespace riemla
