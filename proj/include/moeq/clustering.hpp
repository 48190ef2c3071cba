#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "moeq/quant.hpp"

namespace moeq {

struct FcmParams {
  std::uint32_t clusters = 4;  // c
  double fuzzifier = 2.0;      // m > 1
  double epsilon = 1e-6;       // stop when max |U_new - U_old| < epsilon
  std::uint32_t max_iters = 300;

  // Throws ConfigError unless c >= 2, m > 1, epsilon > 0, max_iters >= 1.
  void validate() const;
};

// Row-major n x c membership matrix.
class Memberships {
 public:
  Memberships() = default;
  Memberships(std::size_t points, std::size_t clusters)
      : points_(points), clusters_(clusters), values_(points * clusters, 0.0) {}

  std::size_t points() const noexcept { return points_; }
  std::size_t clusters() const noexcept { return clusters_; }
  double& operator()(std::size_t i, std::size_t k) noexcept { return values_[i * clusters_ + k]; }
  double operator()(std::size_t i, std::size_t k) const noexcept { return values_[i * clusters_ + k]; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {values_.data() + i * clusters_, clusters_};
  }
  std::span<double> row(std::size_t i) noexcept { return {values_.data() + i * clusters_, clusters_}; }

  bool operator==(const Memberships&) const = default;

 private:
  std::size_t points_ = 0;
  std::size_t clusters_ = 0;
  std::vector<double> values_;
};

struct FcmResult {
  std::vector<double> centers;  // c
  Memberships memberships;      // n x c
  std::uint32_t iterations = 0;
  bool converged = false;
};

// State after one center + membership update; objective is
// J_m = sum_i sum_k u_ik^m |x_i - v_k|^2 at the new (U, V).
struct FcmIterate {
  std::uint32_t iteration;
  std::span<const double> centers;
  const Memberships& memberships;
  double objective;
  double max_change;
};

using FcmObserver = std::function<void(const FcmIterate&)>;

// Fuzzy c-means on scalar data. Without initial memberships, rows come from
// init_membership(x) treating x as the shares. Throws InputError when n < c,
// on non-finite input, or on an invalid initial matrix.
FcmResult fcm_cluster(std::span<const double> x, const FcmParams& params,
                      const Memberships* initial = nullptr, const FcmObserver* observer = nullptr);

double fcm_objective(std::span<const double> x, std::span<const double> centers,
                     const Memberships& u, double fuzzifier);

// Initial memberships from per-expert token shares. Each share is placed at its
// normalized rank q in [0, 1] (ties share their average rank); cluster k sits at
// (k + 0.5) / c and row i is a triangular kernel of half-width 1.5 / c around q,
// plus a 1e-3 floor, normalized to sum 1. Equal shares give uniform rows.
Memberships init_membership(std::span<const double> token_shares, std::uint32_t clusters);

struct PrecisionAssignment {
  std::vector<BitWidth> widths;              // per expert
  std::vector<BitWidth> cluster_widths;      // per cluster
  std::vector<std::uint32_t> primary;        // argmax cluster per expert
  std::vector<bool> boundary;                // top-two membership gap < delta
};

inline constexpr double kDefaultBoundaryDelta = 0.10;

// Clusters ranked by center ascending map to 2/4/6/8 bits. A boundary expert
// takes the lower width of its top two clusters. Throws ConfigError unless c == 4.
PrecisionAssignment assign_precisions(const FcmResult& result, double boundary_delta,
                                      std::span<const double> x);

// Per-layer clustering of one set of expert significances.
struct LayerClustering {
  FcmResult fcm;
  PrecisionAssignment assignment;
};

// Runs fcm_cluster + assign_precisions independently for every layer. Initial
// memberships come from token_share[layer].
std::vector<LayerClustering> cluster_layers(const std::vector<std::vector<double>>& significance,
                                            const std::vector<std::vector<double>>& token_share,
                                            const FcmParams& params, double boundary_delta,
                                            Execution exec = Execution::parallel);

WidthTable width_table(const std::vector<LayerClustering>& layers);

}  // namespace moeq
