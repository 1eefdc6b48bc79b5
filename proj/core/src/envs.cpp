#include "mars/envs.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "mars/errors.hpp"

namespace mars::envs {

namespace {
constexpr double kZeroRangeEpsilon = 1e-6;  // per-side widening of flat dims
constexpr double kStdFloorThreshold = 1e-8;
}  // namespace

void Dataset::validate() const {
  if (inputs.rows() < 1) throw std::invalid_argument("Dataset: needs at least one row");
  if (inputs.rows() != targets.size())
    throw std::invalid_argument("Dataset: input row count does not match target length");
  if (!inputs.allFinite() || !targets.allFinite())
    throw std::invalid_argument("Dataset: non-finite entries");
}

void TaskCollection::validate() const {
  if (tasks.empty()) throw std::invalid_argument("TaskCollection: no tasks");
  for (const auto& t : tasks) {
    t.validate();
    if (t.dim() != input_dim)
      throw std::invalid_argument("TaskCollection: inconsistent input dimension");
  }
}

SinusoidParams sinusoid_sample_params(RandomStream& rng) {
  SinusoidParams p;
  p.a = rng.uniform(0.7, 1.3);
  p.b = rng.normal(0.0, 0.1);
  p.c = rng.normal(5.0, 0.1);
  p.beta = rng.normal(0.5, 0.2);
  return p;
}

double sinusoid_eval(const SinusoidParams& p, double x) {
  return p.beta * x + p.a * std::sin(1.5 * (x - p.b)) + p.c;
}

Dataset sinusoid_sample_dataset(const SinusoidParams& p, int m, double noise_std,
                                RandomStream& rng) {
  if (m < 1) throw std::invalid_argument("sinusoid_sample_dataset: m must be >= 1");
  if (noise_std < 0.0)
    throw std::invalid_argument("sinusoid_sample_dataset: noise_std must be >= 0");
  Dataset data;
  data.inputs.resize(m, 1);
  data.targets.resize(m);
  for (int j = 0; j < m; ++j) {
    const double x = rng.uniform(-5.0, 5.0);
    data.inputs(j, 0) = x;
    data.targets(j) = sinusoid_eval(p, x) + rng.normal(0.0, noise_std);
  }
  return data;
}

TaskCollection sinusoid_sample_tasks(int n, int m, double noise_std, RandomStream& rng) {
  TaskCollection tc;
  tc.input_dim = 1;
  tc.tasks.reserve(n);
  for (int i = 0; i < n; ++i) {
    const SinusoidParams p = sinusoid_sample_params(rng);
    tc.tasks.push_back(sinusoid_sample_dataset(p, m, noise_std, rng));
  }
  tc.validate();
  return tc;
}

MeasurementDistribution build_measurement_hypercube(const TaskCollection& tasks) {
  tasks.validate();
  const int d = tasks.input_dim;
  Eigen::VectorXd lo = Eigen::VectorXd::Constant(d, std::numeric_limits<double>::infinity());
  Eigen::VectorXd hi = Eigen::VectorXd::Constant(d, -std::numeric_limits<double>::infinity());
  for (const auto& t : tasks.tasks) {
    lo = lo.cwiseMin(t.inputs.colwise().minCoeff().transpose());
    hi = hi.cwiseMax(t.inputs.colwise().maxCoeff().transpose());
  }
  MeasurementDistribution nu;
  nu.low.resize(d);
  nu.high.resize(d);
  for (int j = 0; j < d; ++j) {
    const double range = hi(j) - lo(j);
    if (range > 0.0) {
      nu.low(j) = lo(j) - 0.2 * range;
      nu.high(j) = hi(j) + 0.2 * range;
    } else {
      nu.low(j) = lo(j) - kZeroRangeEpsilon;
      nu.high(j) = hi(j) + kZeroRangeEpsilon;
    }
  }
  return nu;
}

Eigen::MatrixXd sample_measurement_set(const MeasurementDistribution& nu, int k,
                                       RandomStream& rng) {
  if (k < 1) throw std::invalid_argument("sample_measurement_set: k must be >= 1");
  const int d = nu.dim();
  Eigen::MatrixXd x(k, d);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = rng.uniform(nu.low(j), nu.high(j));
  return x;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

double parse_cell(const std::string& cell, const std::filesystem::path& path, int line_no,
                  const std::string& col) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last)
    throw ParseError(path.string() + ":" + std::to_string(line_no) +
                     ": non-numeric value '" + cell + "' in column '" + col + "'");
  if (!std::isfinite(v))
    throw ParseError(path.string() + ":" + std::to_string(line_no) +
                     ": non-finite value '" + cell + "' in column '" + col + "'");
  return v;
}

}  // namespace

Dataset load_csv_task(const std::filesystem::path& path,
                      const std::vector<std::string>& input_cols,
                      const std::string& target_col) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open CSV file: " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file");
  const auto header = split_csv_line(line);

  auto col_index = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw ParseError(path.string() + ": missing column '" + name + "'");
  };

  std::vector<int> in_idx;
  in_idx.reserve(input_cols.size());
  for (const auto& c : input_cols) in_idx.push_back(col_index(c));
  const int y_idx = col_index(target_col);

  std::vector<Eigen::VectorXd> rows;
  std::vector<double> ys;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " cells, got " +
                       std::to_string(cells.size()));
    Eigen::VectorXd x(in_idx.size());
    for (std::size_t j = 0; j < in_idx.size(); ++j)
      x(j) = parse_cell(cells[in_idx[j]], path, line_no, header[in_idx[j]]);
    rows.push_back(x);
    ys.push_back(parse_cell(cells[y_idx], path, line_no, target_col));
  }
  if (rows.empty()) throw ParseError(path.string() + ": no data rows");

  Dataset data;
  data.inputs.resize(rows.size(), in_idx.size());
  data.targets.resize(ys.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    data.inputs.row(i) = rows[i].transpose();
    data.targets(i) = ys[i];
  }
  data.validate();
  return data;
}

TaskCollection load_csv_tasks(const std::vector<std::filesystem::path>& paths,
                              const std::vector<std::string>& input_cols,
                              const std::string& target_col) {
  if (paths.empty()) throw std::invalid_argument("load_csv_tasks: no paths given");
  TaskCollection tc;
  tc.input_dim = static_cast<int>(input_cols.size());
  tc.tasks.reserve(paths.size());
  for (const auto& p : paths) tc.tasks.push_back(load_csv_task(p, input_cols, target_col));
  tc.validate();
  return tc;
}

void write_csv_task(const std::filesystem::path& path, const Dataset& data,
                    const std::vector<std::string>& input_cols,
                    const std::string& target_col) {
  if (static_cast<int>(input_cols.size()) != data.dim())
    throw std::invalid_argument("write_csv_task: column count mismatch");
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open for writing: " + path.string());
  for (const auto& c : input_cols) out << c << ",";
  out << target_col << "\n";
  char buf[64];
  for (int i = 0; i < data.size(); ++i) {
    for (int j = 0; j < data.dim(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", data.inputs(i, j));
      out << buf << ",";
    }
    std::snprintf(buf, sizeof(buf), "%.17g", data.targets(i));
    out << buf << "\n";
  }
}

Standardizer fit_standardizer(const TaskCollection& tasks) {
  tasks.validate();
  const int d = tasks.input_dim;
  long total = 0;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd sum_sq = Eigen::VectorXd::Zero(d);
  double y_sum = 0.0, y_sum_sq = 0.0;
  for (const auto& t : tasks.tasks) {
    total += t.size();
    sum += t.inputs.colwise().sum().transpose();
    sum_sq += t.inputs.array().square().colwise().sum().matrix().transpose();
    y_sum += t.targets.sum();
    y_sum_sq += t.targets.array().square().sum();
  }
  Standardizer s;
  s.input_mean = sum / static_cast<double>(total);
  Eigen::VectorXd var =
      sum_sq / static_cast<double>(total) - s.input_mean.array().square().matrix();
  s.input_std = var.cwiseMax(0.0).cwiseSqrt();
  for (int j = 0; j < d; ++j)
    if (s.input_std(j) < kStdFloorThreshold) s.input_std(j) = 1.0;
  s.output_mean = y_sum / static_cast<double>(total);
  const double y_var =
      std::max(0.0, y_sum_sq / static_cast<double>(total) - s.output_mean * s.output_mean);
  s.output_std = std::sqrt(y_var);
  if (s.output_std < kStdFloorThreshold) s.output_std = 1.0;
  return s;
}

Eigen::MatrixXd Standardizer::apply_inputs(const Eigen::MatrixXd& x) const {
  return (x.rowwise() - input_mean.transpose()).array().rowwise() /
         input_std.transpose().array();
}

Eigen::MatrixXd Standardizer::invert_inputs(const Eigen::MatrixXd& x) const {
  return (x.array().rowwise() * input_std.transpose().array()).matrix().rowwise() +
         input_mean.transpose();
}

Eigen::VectorXd Standardizer::apply_targets(const Eigen::VectorXd& y) const {
  return (y.array() - output_mean) / output_std;
}

Eigen::VectorXd Standardizer::invert_targets(const Eigen::VectorXd& y) const {
  return (y.array() * output_std + output_mean).matrix();
}

Dataset Standardizer::apply(const Dataset& data) const {
  Dataset out;
  out.inputs = apply_inputs(data.inputs);
  out.targets = apply_targets(data.targets);
  return out;
}

TaskCollection Standardizer::apply(const TaskCollection& tasks) const {
  TaskCollection out;
  out.input_dim = tasks.input_dim;
  out.tasks.reserve(tasks.tasks.size());
  for (const auto& t : tasks.tasks) out.tasks.push_back(apply(t));
  return out;
}

}  // namespace mars::envs
