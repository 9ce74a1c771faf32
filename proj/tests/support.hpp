#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "comalign/comalign.hpp"

namespace testing_support {

using comalign::num::Tensor;

inline Tensor random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t = Tensor::matrix(r, c);
  for (double& x : t.data()) x = n(rng);
  return t;
}

inline std::vector<double> random_unit(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(d);
  double s = 0.0;
  for (double& x : v) {
    x = n(rng);
    s += x * x;
  }
  for (double& x : v) x /= std::sqrt(s);
  return v;
}

// Record with the given numbers of real components, all unit vectors.
inline comalign::ingestion::ComponentRecord random_record(std::mt19937_64& rng, const std::string& id,
                                                          comalign::ingestion::Modality m, std::size_t d,
                                                          std::size_t entities, std::size_t relations) {
  comalign::ingestion::ComponentRecord r;
  r.id = id;
  r.modality = m;
  r.global = random_unit(rng, d);
  for (std::size_t k = 0; k < entities; ++k) r.entities.push_back(random_unit(rng, d));
  for (std::size_t k = 0; k < relations; ++k) r.relations.push_back(random_unit(rng, d));
  return r;
}

// A fresh scratch directory under the system temp dir, private to this process.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() /
           ("comalign_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing_support
