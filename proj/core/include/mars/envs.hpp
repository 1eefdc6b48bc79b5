#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "mars/random.hpp"

namespace mars::envs {

// One regression task: m noisy function evaluations at d-dimensional inputs.
struct Dataset {
  Eigen::MatrixXd inputs;   // m x d
  Eigen::VectorXd targets;  // m

  int size() const { return static_cast<int>(inputs.rows()); }
  int dim() const { return static_cast<int>(inputs.cols()); }

  // Throws std::invalid_argument on shape mismatch, empty data or
  // non-finite entries.
  void validate() const;
};

// An ordered set of tasks sharing one input dimension.
struct TaskCollection {
  std::vector<Dataset> tasks;
  int input_dim = 0;

  int size() const { return static_cast<int>(tasks.size()); }
  void validate() const;
};

// Parameters of one sinusoid-environment task: beta*x + a*sin(1.5*(x-b)) + c.
struct SinusoidParams {
  double a = 1.0;
  double b = 0.0;
  double c = 5.0;
  double beta = 0.5;
};

// Axis-aligned hypercube with uniform sampling; the measurement
// distribution the score network and fSVGD draw their input locations from.
struct MeasurementDistribution {
  Eigen::VectorXd low;
  Eigen::VectorXd high;

  int dim() const { return static_cast<int>(low.size()); }
};

// Affine input/target whitening fitted on pooled meta-training data.
struct Standardizer {
  Eigen::VectorXd input_mean;
  Eigen::VectorXd input_std;
  double output_mean = 0.0;
  double output_std = 1.0;

  Eigen::MatrixXd apply_inputs(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd invert_inputs(const Eigen::MatrixXd& x) const;
  Eigen::VectorXd apply_targets(const Eigen::VectorXd& y) const;
  Eigen::VectorXd invert_targets(const Eigen::VectorXd& y) const;
  Dataset apply(const Dataset& data) const;
  TaskCollection apply(const TaskCollection& tasks) const;
};

SinusoidParams sinusoid_sample_params(RandomStream& rng);

double sinusoid_eval(const SinusoidParams& p, double x);

// m points with inputs uniform on [-5, 5] and Gaussian observation noise.
Dataset sinusoid_sample_dataset(const SinusoidParams& p, int m, double noise_std,
                                RandomStream& rng);

TaskCollection sinusoid_sample_tasks(int n, int m, double noise_std, RandomStream& rng);

// Per-dimension data range expanded by 20% on each side; zero-width
// dimensions are widened by a small epsilon so the distribution stays
// non-degenerate.
MeasurementDistribution build_measurement_hypercube(const TaskCollection& tasks);

Eigen::MatrixXd sample_measurement_set(const MeasurementDistribution& nu, int k,
                                       RandomStream& rng);

// One Dataset per file, in path order. Files are comma-separated with a
// header row; parse failures report file and line.
TaskCollection load_csv_tasks(const std::vector<std::filesystem::path>& paths,
                              const std::vector<std::string>& input_cols,
                              const std::string& target_col);

Dataset load_csv_task(const std::filesystem::path& path,
                      const std::vector<std::string>& input_cols,
                      const std::string& target_col);

void write_csv_task(const std::filesystem::path& path, const Dataset& data,
                    const std::vector<std::string>& input_cols,
                    const std::string& target_col);

Standardizer fit_standardizer(const TaskCollection& tasks);

}  // namespace mars::envs
