#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <vector>

namespace lets {

/// Reproducible random stream identified by a key path (master seed, then
/// replicate id, member id, ...). Child streams derived with `split` are
/// independent of the parent's draw history, so the same key always yields
/// the same sequence regardless of scheduling.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : key_{seed} { reseed(); }

  RngStream split(std::uint64_t id) const {
    RngStream child(*this, id);
    return child;
  }

  double normal() { return normal_(engine_); }

  double uniform() { return uniform_(engine_); }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd a(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) a(i, j) = normal();
    return a;
  }

  std::mt19937_64& engine() { return engine_; }
  const std::vector<std::uint64_t>& key() const { return key_; }

 private:
  RngStream(const RngStream& parent, std::uint64_t id) : key_(parent.key_) {
    key_.push_back(id);
    reseed();
  }

  void reseed() {
    std::vector<std::uint32_t> words;
    words.reserve(2 * key_.size() + 1);
    words.push_back(static_cast<std::uint32_t>(key_.size()));
    for (std::uint64_t k : key_) {
      words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
      words.push_back(static_cast<std::uint32_t>(k >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    engine_.seed(seq);
    normal_.reset();
  }

  std::vector<std::uint64_t> key_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace lets
