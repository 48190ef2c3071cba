#include "moeq/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "moeq/error.hpp"

namespace moeq {
namespace {

// mt19937_64 output is fully specified by the standard; the distributions are
// not, so sampling is done by hand to keep generated files portable.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do x = eng_();
    while (x >= limit);
    return x % n;
  }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double gumbel() {
    double u;
    do u = uniform();
    while (u <= 0.0);
    return -std::log(-std::log(u));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::mt19937_64 eng_;
};

enum SeedTag : std::uint64_t { kRouterTag = 1, kEmbeddingTag = 2, kPermutationTag = 3, kExpertTag = 1000 };

double affinity_of(const SyntheticSpec& spec, std::uint32_t g, std::uint32_t j) {
  return spec.affinity.empty() ? 0.0 : spec.affinity[g][j];
}

// Rows are orthonormal; built by modified Gram-Schmidt over Gaussian draws.
std::vector<std::vector<double>> orthonormal_rows(std::uint32_t n, std::uint32_t d, Rng& rng) {
  std::vector<std::vector<double>> q;
  while (q.size() < n) {
    std::vector<double> v(d);
    for (double& x : v) x = rng.normal();
    for (const auto& u : q) {
      const double dot = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
      for (std::uint32_t i = 0; i < d; ++i) v[i] -= dot * u[i];
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm < 1e-6) continue;
    for (double& x : v) x /= norm;
    q.push_back(std::move(v));
  }
  return q;
}

// Integer dispatch counts per expert for a group of `members` tokens: largest
// remainder rounding of members * pi, none exceeding `members`.
std::vector<std::uint64_t> dispatch_counts(const std::vector<double>& pi, std::uint64_t members,
                                           std::uint32_t k) {
  const std::size_t n = pi.size();
  std::vector<std::uint64_t> counts(n);
  std::vector<double> frac(n);
  std::uint64_t total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const double t = std::min(static_cast<double>(members), pi[j] * static_cast<double>(members));
    counts[j] = static_cast<std::uint64_t>(std::floor(t));
    frac[j] = t - static_cast<double>(counts[j]);
    total += counts[j];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  const std::uint64_t target = members * k;
  for (std::size_t idx = 0; total < target; idx = (idx + 1) % n) {
    const std::size_t j = order[idx];
    if (counts[j] < members) {
      ++counts[j];
      ++total;
    }
  }
  return counts;
}

// Removes the router directions from every row and rescales it to keep its
// expected norm. Expert activations then do not depend on which group a token
// belongs to, so routing is the only thing a group shift changes.
void project_rows(Matrix& w, const std::vector<std::vector<double>>& q) {
  const std::size_t d = w.cols();
  const double gain = std::sqrt(static_cast<double>(d) / static_cast<double>(d - q.size()));
  std::vector<double> row(d);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    auto out = w.row(r);
    std::copy(out.begin(), out.end(), row.begin());
    for (const auto& u : q) {
      const double dot = std::inner_product(row.begin(), row.end(), u.begin(), 0.0);
      for (std::size_t i = 0; i < d; ++i) row[i] -= dot * u[i];
    }
    for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<float>(row[i] * gain);
  }
}

}  // namespace

void SyntheticSpec::validate() const {
  config.validate();
  if (groups == 0 || groups > config.vocab_size)
    throw ConfigError("synthetic spec: groups must be in [1, vocab_size]");
  if (!std::isfinite(concentration) || concentration < 0.0)
    throw ConfigError("synthetic spec: concentration must be finite and >= 0");
  if (!affinity.empty()) {
    if (affinity.size() != groups) throw ConfigError("synthetic spec: one affinity row per group required");
    for (const auto& row : affinity) {
      if (row.size() != config.experts_per_layer)
        throw ConfigError("synthetic spec: affinity rows must cover every expert");
      for (double a : row)
        if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("synthetic spec: affinities must lie in [0, 1]");
    }
  }
  if (!(weight_std > 0.0f) || !std::isfinite(weight_std))
    throw ConfigError("synthetic spec: weight_std must be positive");
  if (salient_channels > config.ffn_dim)
    throw ConfigError("synthetic spec: more salient channels than ffn_dim");
  if (!(salient_gain > 0.0f) || !std::isfinite(salient_gain))
    throw ConfigError("synthetic spec: salient_gain must be positive");
  if (!(gate_gap >= 0.0) || !std::isfinite(gate_gap)) throw ConfigError("synthetic spec: gate_gap must be >= 0");
  if (!(embedding_noise >= 0.0f) || !std::isfinite(embedding_noise))
    throw ConfigError("synthetic spec: embedding_noise must be >= 0");
}

std::pair<std::uint32_t, std::uint32_t> SyntheticSpec::group_range(std::uint32_t g) const {
  const auto v = static_cast<std::uint64_t>(config.vocab_size);
  return {static_cast<std::uint32_t>(g * v / groups), static_cast<std::uint32_t>((g + 1ull) * v / groups)};
}

std::uint32_t SyntheticSpec::group_of(std::uint32_t token) const {
  // Inverse of group_range: the largest g with g * V / G <= token.
  auto g = static_cast<std::uint32_t>((static_cast<std::uint64_t>(token) * groups + groups - 1) /
                                      config.vocab_size);
  while (g > 0 && group_range(g).first > token) --g;
  while (g + 1 < groups && group_range(g + 1).first <= token) ++g;
  return g;
}

std::vector<std::uint32_t> SyntheticSpec::preferred_experts(std::uint32_t g) const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t j = 0; j < config.experts_per_layer; ++j)
    if (affinity_of(*this, g, j) >= 0.5) out.push_back(j);
  return out;
}

std::vector<std::vector<double>> preferred_affinity(std::uint32_t experts,
                                                    const std::vector<std::vector<std::uint32_t>>& preferred) {
  std::vector<std::vector<double>> a(preferred.size(), std::vector<double>(experts, 0.0));
  for (std::size_t g = 0; g < preferred.size(); ++g)
    for (std::uint32_t j : preferred[g]) {
      if (j >= experts) throw ConfigError("preferred_affinity: expert id out of range");
      a[g][j] = 1.0;
    }
  return a;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::vector<std::uint32_t> expert_permutation(const SyntheticSpec& spec, std::uint32_t layer) {
  std::vector<std::uint32_t> perm(spec.config.experts_per_layer);
  std::iota(perm.begin(), perm.end(), 0u);
  if (layer == 0) return perm;
  Rng rng(derive_seed(spec.seed, kPermutationTag * 1000003ull + layer));
  rng.shuffle(perm);
  return perm;
}

std::vector<double> inclusion_probabilities(const SyntheticSpec& spec, std::uint32_t group) {
  const std::uint32_t n = spec.config.experts_per_layer;
  const double k = spec.config.top_k;
  std::vector<double> w(n);
  double top = 0.0;
  for (std::uint32_t j = 0; j < n; ++j) top = std::max(top, affinity_of(spec, group, j));
  for (std::uint32_t j = 0; j < n; ++j)
    w[j] = std::exp(spec.concentration * (affinity_of(spec, group, j) - top));

  // Proportional to w, with any expert that would exceed 1 capped at 1 and the
  // remainder redistributed over the rest.
  std::vector<double> pi(n, 0.0);
  std::vector<bool> capped(n, false);
  double remaining = k;
  for (bool changed = true; changed;) {
    changed = false;
    double mass = 0.0;
    for (std::uint32_t j = 0; j < n; ++j)
      if (!capped[j]) mass += w[j];
    for (std::uint32_t j = 0; j < n; ++j) {
      if (capped[j]) continue;
      pi[j] = w[j] * remaining / mass;
      if (pi[j] >= 1.0) {
        capped[j] = true;
        pi[j] = 1.0;
        remaining -= 1.0;
        changed = true;
        break;
      }
    }
  }
  return pi;
}

MoEModel generate_model(const SyntheticSpec& spec) {
  spec.validate();
  const auto& cfg = spec.config;
  const std::uint32_t n = cfg.experts_per_layer;
  const std::uint32_t d = cfg.hidden_dim;
  const std::uint32_t k = cfg.top_k;
  MoEModel model = MoEModel::zeros(cfg);

  std::vector<std::vector<std::uint32_t>> perms;
  for (std::uint32_t l = 0; l < cfg.num_layers; ++l) perms.push_back(expert_permutation(spec, l));

  std::vector<std::vector<double>> q;
  if (n <= d) {
    Rng router_rng(derive_seed(spec.seed, kRouterTag));
    q = orthonormal_rows(n, d, router_rng);
    for (std::uint32_t l = 0; l < cfg.num_layers; ++l)
      for (std::uint32_t j = 0; j < n; ++j)
        for (std::uint32_t i = 0; i < d; ++i)
          model.layers[l].router(perms[l][j], i) = static_cast<float>(q[j][i]);

    Rng rng(derive_seed(spec.seed, kEmbeddingTag));
    // Non-chosen logits are centered on zero so embeddings share no common
    // direction; the chosen ones sit 1 to 1 + gate_gap * (K - 1) above them.
    const double top = 1.5 + spec.gate_gap * (k - 1);
    std::vector<double> logits(n);
    std::vector<double> e(d);
    for (std::uint32_t g = 0; g < spec.groups; ++g) {
      const auto [first, last] = spec.group_range(g);
      const std::uint64_t members = last - first;
      const auto counts = dispatch_counts(inclusion_probabilities(spec, g), members, k);

      // Slots sorted by expert; member i takes slots i, i + M, i + 2M, ...
      // Runs of one expert are at most M long, so a member never repeats one.
      std::vector<std::uint32_t> slots;
      slots.reserve(members * k);
      for (std::uint32_t j = 0; j < n; ++j) slots.insert(slots.end(), counts[j], j);
      std::vector<std::uint32_t> tokens(members);
      std::iota(tokens.begin(), tokens.end(), first);
      rng.shuffle(tokens);

      std::vector<std::pair<double, std::uint32_t>> chosen(k);
      for (std::uint64_t i = 0; i < members; ++i) {
        for (std::uint32_t s = 0; s < k; ++s) {
          const std::uint32_t j = slots[i + s * members];
          chosen[s] = {spec.concentration * affinity_of(spec, g, j) + rng.gumbel(), j};
        }
        std::sort(chosen.begin(), chosen.end(), [](const auto& a, const auto& b) {
          return a.first > b.first || (a.first == b.first && a.second < b.second);
        });
        for (std::uint32_t j = 0; j < n; ++j) logits[j] = rng.uniform() - 0.5;
        for (std::uint32_t r = 0; r < k; ++r) logits[chosen[r].second] = top - spec.gate_gap * r;

        std::fill(e.begin(), e.end(), 0.0);
        for (std::uint32_t j = 0; j < n; ++j)
          for (std::uint32_t t = 0; t < d; ++t) e[t] += logits[j] * q[j][t];
        if (n < d && spec.embedding_noise > 0.0f) {
          std::vector<double> z(d);
          for (double& x : z) x = rng.normal();
          for (const auto& row : q) {
            const double dot = std::inner_product(z.begin(), z.end(), row.begin(), 0.0);
            for (std::uint32_t t = 0; t < d; ++t) z[t] -= dot * row[t];
          }
          const double norm = std::sqrt(std::inner_product(z.begin(), z.end(), z.begin(), 0.0));
          const double target = spec.embedding_noise * std::sqrt(static_cast<double>(d - n));
          if (norm > 1e-9)
            for (std::uint32_t t = 0; t < d; ++t) e[t] += z[t] * target / norm;
        }
        const std::uint32_t token = tokens[i];
        for (std::uint32_t t = 0; t < d; ++t) model.embeddings(token, t) = static_cast<float>(e[t]);
      }
    }
  } else {
    Rng rng(derive_seed(spec.seed, kRouterTag));
    const double router_std = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& layer : model.layers)
      for (float& v : layer.router.values()) v = static_cast<float>(router_std * rng.normal());
    Rng emb_rng(derive_seed(spec.seed, kEmbeddingTag));
    for (float& v : model.embeddings.values()) v = static_cast<float>(emb_rng.normal());
  }

  for (std::uint32_t l = 0; l < cfg.num_layers; ++l) {
    for (std::uint32_t x = 0; x < n; ++x) {
      Rng rng(derive_seed(spec.seed, kExpertTag + static_cast<std::uint64_t>(l) * n + x));
      auto& ex = model.layers[l].experts[x];
      for (float& v : ex.w_in.values()) v = static_cast<float>(spec.weight_std * rng.normal());
      for (float& v : ex.w_out.values()) v = static_cast<float>(spec.weight_std * rng.normal());
      if (n < d) project_rows(ex.w_in, q);
      std::vector<std::uint32_t> channels(cfg.ffn_dim);
      std::iota(channels.begin(), channels.end(), 0u);
      for (std::uint32_t s = 0; s < spec.salient_channels; ++s) {
        std::swap(channels[s], channels[s + rng.below(cfg.ffn_dim - s)]);
        const std::uint32_t r = channels[s];
        for (float& v : ex.w_in.row(r)) v *= spec.salient_gain;
        for (std::uint32_t t = 0; t < d; ++t) ex.w_out(t, r) *= spec.salient_gain;
      }
    }
  }
  return model;
}

TokenStream generate_stream(const SyntheticSpec& spec, std::span<const double> group_mix, std::uint64_t seed,
                            std::size_t length, std::string name) {
  spec.validate();
  if (group_mix.size() != spec.groups)
    throw InputError("generate_stream: group_mix needs " + std::to_string(spec.groups) + " probabilities");
  double total = 0.0;
  for (double p : group_mix) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw InputError("generate_stream: probabilities must be >= 0");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InputError("generate_stream: probabilities must sum to 1");
  if (length == 0) length = spec.stream_length;
  if (length == 0) throw InputError("generate_stream: stream length must be >= 1");

  std::uint32_t last_nonzero = 0;
  for (std::uint32_t g = 0; g < spec.groups; ++g)
    if (group_mix[g] > 0.0) last_nonzero = g;

  Rng rng(seed);
  TokenStream s;
  s.name = std::move(name);
  s.tokens.reserve(length);
  for (std::size_t i = 0; i < length; ++i) {
    const double u = rng.uniform();
    std::uint32_t g = 0;
    double acc = group_mix[0];
    while (u >= acc && g + 1 < spec.groups) acc += group_mix[++g];
    // Rounding in the running sum can only run off the end; fall back to the
    // last group that has mass.
    if (group_mix[g] == 0.0) g = last_nonzero;
    const auto [first, last] = spec.group_range(g);
    s.tokens.push_back(first + static_cast<std::uint32_t>(rng.below(last - first)));
  }
  return s;
}

}  // namespace moeq
