#include "moeq/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <string>

#include "moeq/error.hpp"

namespace moeq {

void FcmParams::validate() const {
  if (clusters < 2) throw ConfigError("fcm: cluster count must be >= 2");
  if (!(fuzzifier > 1.0) || !std::isfinite(fuzzifier)) throw ConfigError("fcm: fuzzifier must be > 1");
  if (!(epsilon > 0.0)) throw ConfigError("fcm: epsilon must be > 0");
  if (max_iters == 0) throw ConfigError("fcm: max_iters must be >= 1");
}

double fcm_objective(std::span<const double> x, std::span<const double> centers,
                     const Memberships& u, double fuzzifier) {
  double j = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const double d = x[i] - centers[k];
      j += std::pow(u(i, k), fuzzifier) * d * d;
    }
  return j;
}

Memberships init_membership(std::span<const double> token_shares, std::uint32_t clusters) {
  if (clusters == 0) throw ConfigError("init_membership: cluster count must be >= 1");
  const std::size_t n = token_shares.size();
  Memberships u(n, clusters);
  for (double s : token_shares)
    if (!(s >= 0.0) || !std::isfinite(s)) throw InputError("init_membership: shares must be finite and >= 0");
  if (n == 0) return u;

  const auto [lo, hi] = std::minmax_element(token_shares.begin(), token_shares.end());
  if (*lo == *hi) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::uint32_t k = 0; k < clusters; ++k) u(i, k) = 1.0 / clusters;
    return u;
  }

  // Average rank with ties sharing the mean of their positions.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return token_shares[a] < token_shares[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && token_shares[order[j + 1]] == token_shares[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j);
    for (std::size_t t = i; t <= j; ++t) rank[order[t]] = avg;
    i = j + 1;
  }

  const double half_width = 1.5 / clusters;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = n > 1 ? rank[i] / static_cast<double>(n - 1) : 0.5;
    double sum = 0.0;
    for (std::uint32_t k = 0; k < clusters; ++k) {
      const double center = (k + 0.5) / clusters;
      const double w = std::max(0.0, 1.0 - std::fabs(q - center) / half_width) + 1e-3;
      u(i, k) = w;
      sum += w;
    }
    for (std::uint32_t k = 0; k < clusters; ++k) u(i, k) /= sum;
  }
  return u;
}

namespace {

void check_initial(const Memberships& u, std::size_t n, std::size_t c) {
  if (u.points() != n || u.clusters() != c)
    throw InputError("fcm: initial membership matrix has the wrong shape");
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (double v : u.row(i)) {
      if (!(v >= 0.0 && v <= 1.0)) throw InputError("fcm: initial memberships must lie in [0, 1]");
      sum += v;
    }
    if (std::fabs(sum - 1.0) > 1e-9) throw InputError("fcm: initial membership rows must sum to 1");
  }
}

}  // namespace

FcmResult fcm_cluster(std::span<const double> x, const FcmParams& params, const Memberships* initial,
                      const FcmObserver* observer) {
  params.validate();
  const std::size_t n = x.size();
  const std::size_t c = params.clusters;
  if (n < c)
    throw InputError("fcm: " + std::to_string(n) + " points for " + std::to_string(c) + " clusters");
  double scale = 0.0;
  for (double v : x) {
    if (!std::isfinite(v)) throw InputError("fcm: non-finite input");
    scale = std::max(scale, std::fabs(v));
  }
  // Distances at or below this count as coinciding with a center.
  const double coincide = 1e-12 * scale;

  FcmResult r;
  if (initial != nullptr) {
    check_initial(*initial, n, c);
    r.memberships = *initial;
  } else {
    std::vector<double> shares(x.begin(), x.end());
    const double lo = *std::min_element(shares.begin(), shares.end());
    if (lo < 0.0)
      for (double& s : shares) s -= lo;
    r.memberships = init_membership(shares, static_cast<std::uint32_t>(c));
  }
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  r.centers.assign(c, mean);

  const double m = params.fuzzifier;
  const double exponent = 2.0 / (m - 1.0);
  Memberships next(n, c);
  std::vector<double> dist(c);
  for (std::uint32_t it = 1; it <= params.max_iters; ++it) {
    for (std::size_t k = 0; k < c; ++k) {
      double num = 0.0;
      double den = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double w = std::pow(r.memberships(i, k), m);
        num += w * x[i];
        den += w;
      }
      if (den > 0.0) r.centers[k] = std::clamp(num / den, *std::min_element(x.begin(), x.end()),
                                               *std::max_element(x.begin(), x.end()));
    }

    double max_change = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t coinciding = 0;
      for (std::size_t k = 0; k < c; ++k) {
        dist[k] = std::fabs(x[i] - r.centers[k]);
        if (dist[k] <= coincide) ++coinciding;
      }
      for (std::size_t k = 0; k < c; ++k) {
        double u;
        if (coinciding > 0) {
          u = dist[k] <= coincide ? 1.0 / static_cast<double>(coinciding) : 0.0;
        } else {
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j) s += std::pow(dist[k] / dist[j], exponent);
          u = 1.0 / s;
        }
        next(i, k) = u;
        max_change = std::max(max_change, std::fabs(u - r.memberships(i, k)));
      }
    }
    std::swap(r.memberships, next);
    r.iterations = it;
    if (observer != nullptr) {
      (*observer)(FcmIterate{it, r.centers, r.memberships,
                             fcm_objective(x, r.centers, r.memberships, m), max_change});
    }
    if (max_change < params.epsilon) {
      r.converged = true;
      break;
    }
  }
  return r;
}

PrecisionAssignment assign_precisions(const FcmResult& result, double boundary_delta,
                                      std::span<const double> x) {
  const std::size_t c = result.centers.size();
  if (c != 4) throw ConfigError("assign_precisions: needs exactly 4 clusters, got " + std::to_string(c));
  if (!(boundary_delta >= 0.0)) throw ConfigError("assign_precisions: boundary delta must be >= 0");
  const std::size_t n = result.memberships.points();
  if (x.size() != n || result.memberships.clusters() != c)
    throw InputError("assign_precisions: memberships do not match the data");

  std::vector<std::size_t> by_center(c);
  std::iota(by_center.begin(), by_center.end(), 0);
  std::stable_sort(by_center.begin(), by_center.end(), [&](std::size_t a, std::size_t b) {
    return result.centers[a] < result.centers[b];
  });
  PrecisionAssignment out;
  out.cluster_widths.resize(c, BitWidth::int2());
  for (std::size_t rank = 0; rank < c; ++rank) out.cluster_widths[by_center[rank]] = kAllWidths[rank];

  out.widths.reserve(n);
  out.primary.reserve(n);
  out.boundary.reserve(n);
  std::vector<std::size_t> order(c);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = result.memberships.row(i);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    const std::size_t top = order[0];
    const std::size_t second = order[1];
    const bool boundary = row[top] - row[second] < boundary_delta;
    out.primary.push_back(static_cast<std::uint32_t>(top));
    out.boundary.push_back(boundary);
    out.widths.push_back(boundary ? std::min(out.cluster_widths[top], out.cluster_widths[second])
                                  : out.cluster_widths[top]);
  }
  return out;
}

std::vector<LayerClustering> cluster_layers(const std::vector<std::vector<double>>& significance,
                                            const std::vector<std::vector<double>>& token_share,
                                            const FcmParams& params, double boundary_delta,
                                            Execution exec) {
  params.validate();
  if (significance.size() != token_share.size())
    throw InputError("cluster_layers: significance and token shares cover different layers");
  std::vector<LayerClustering> out(significance.size());
  std::exception_ptr failure;
  const auto run = [&](std::int64_t l) {
    try {
      const auto init = init_membership(token_share[l], params.clusters);
      out[l].fcm = fcm_cluster(significance[l], params, &init);
      out[l].assignment = assign_precisions(out[l].fcm, boundary_delta, significance[l]);
    } catch (...) {
#pragma omp critical(moeq_cluster_failure)
      if (!failure) failure = std::current_exception();
    }
  };
  const auto layers = static_cast<std::int64_t>(significance.size());
  if (exec == Execution::serial) {
    for (std::int64_t l = 0; l < layers; ++l) run(l);
  } else {
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t l = 0; l < layers; ++l) run(l);
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

WidthTable width_table(const std::vector<LayerClustering>& layers) {
  WidthTable t;
  t.reserve(layers.size());
  for (const auto& l : layers) t.push_back(l.assignment.widths);
  return t;
}

}  // namespace moeq
