// Copyright 2026 The Modscope Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls into the library's numeric code paths.

#ifndef MODSCOPE_TESTS_SUPPORT_H_
#define MODSCOPE_TESTS_SUPPORT_H_

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/hypergeometric.hpp>

#include "modscope/model.h"

namespace modscope::testing {

inline double Relu(double v) { return v > 0.0 ? v : 0.0; }

inline ModelConfig RandomConfig(std::mt19937_64& rng, bool moe, bool attention = false) {
  std::uniform_int_distribution<int> small(2, 12);
  ModelConfig c;
  c.vocab_size = small(rng) + 4;
  c.num_layers = std::uniform_int_distribution<int>(1, 3)(rng);
  c.d_model = small(rng);
  c.num_experts = moe ? std::uniform_int_distribution<int>(2, 6)(rng) : 1;
  c.d_ff = c.num_experts * std::uniform_int_distribution<int>(1, 8)(rng);
  c.top_k = std::uniform_int_distribution<int>(1, c.num_experts)(rng);
  c.use_bias = std::bernoulli_distribution(0.5)(rng);
  if (moe) {
    for (int l = 0; l < c.num_layers; ++l) {
      if (l == 0 || std::bernoulli_distribution(0.5)(rng)) c.moe_layers.push_back(l);
    }
  }
  if (attention) {
    c.mixing = Mixing::kAttention;
    c.num_heads = 1;
    for (int h = 2; h <= 4; ++h) {
      if (c.d_model % h == 0) c.num_heads = h;
    }
  }
  return c;
}

// Biases are zero after InitModel; give them values so they get exercised.
inline void RandomizeBiases(Model& model, std::mt19937_64& rng) {
  if (!model.config.use_bias) return;
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& w : model.layers) {
    for (Eigen::Index i = 0; i < w.b_in.size(); ++i) w.b_in[i] = n(rng);
    for (Eigen::Index i = 0; i < w.b_out.size(); ++i) w.b_out[i] = n(rng);
  }
}

inline Vector RandomVector(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = g(rng);
  return v;
}

// Dense FFN in matrix form.
inline Vector DenseOracle(const LayerWeights& w, const Vector& x, bool bias) {
  Vector pre = w.w_in * x;
  if (bias) pre += w.b_in;
  Vector out = w.w_out * pre.unaryExpr(&Relu);
  if (bias) out += w.b_out;
  return out;
}

// Softmax router with hard top-k, written from scratch.
inline Vector GateOracle(const Matrix& gate, const Vector& x, int top_k,
                         const std::vector<int>& allowed = {}) {
  const int e = static_cast<int>(gate.rows());
  std::vector<bool> ok(e, allowed.empty());
  for (int a : allowed) ok[a] = true;
  const Vector logits = gate * x;
  double top = -1e300;
  for (int i = 0; i < e; ++i) {
    if (ok[i]) top = std::max(top, logits[i]);
  }
  Vector p = Vector::Zero(e);
  for (int i = 0; i < e; ++i) {
    if (ok[i]) p[i] = std::exp(logits[i] - top);
  }
  p /= p.sum();
  std::vector<int> idx(e);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    return p[a] != p[b] ? p[a] > p[b] : a < b;
  });
  Vector g = Vector::Zero(e);
  for (int i = 0; i < top_k && i < e; ++i) {
    if (p[idx[i]] > 0.0) g[idx[i]] = p[idx[i]];
  }
  return g;
}

// Expert form: sum over experts of alpha_e * FFN_e(x), bias added once.
inline Vector ExpertOracle(const LayerWeights& w, const Vector& x, const Vector& gates,
                           int num_experts, bool bias) {
  const int n_e = static_cast<int>(w.w_in.rows()) / num_experts;
  Vector out = Vector::Zero(w.w_out.rows());
  for (int e = 0; e < num_experts; ++e) {
    if (gates[e] == 0.0) continue;
    const auto rows = Eigen::seqN(e * n_e, n_e);
    Vector pre = w.w_in(rows, Eigen::all) * x;
    if (bias) pre += w.b_in(rows);
    out += gates[e] * (w.w_out(Eigen::all, rows) * pre.unaryExpr(&Relu));
  }
  if (bias) out += w.b_out;
  return out;
}

// AP from the precision-recall point set at every distinct threshold. Ties are
// first broken by original index (earlier ranks higher), matching the
// documented policy, by turning the scores into distinct ranks.
inline double ApOracle(const std::vector<double>& scores, const std::vector<int>& labels) {
  const int n = static_cast<int>(scores.size());
  std::vector<double> key(n);
  for (int i = 0; i < n; ++i) {
    int above = 0;
    for (int j = 0; j < n; ++j) {
      if (scores[j] > scores[i] || (scores[j] == scores[i] && j < i)) ++above;
    }
    key[i] = n - above;  // distinct, larger ranks higher
  }
  const int positives = static_cast<int>(std::count(labels.begin(), labels.end(), 1));
  std::set<double, std::greater<>> thresholds(key.begin(), key.end());
  double ap = 0.0, last_recall = 0.0;
  for (double t : thresholds) {
    int tp = 0, predicted = 0;
    for (int i = 0; i < n; ++i) {
      if (key[i] >= t) {
        ++predicted;
        tp += labels[i];
      }
    }
    const double recall = static_cast<double>(tp) / positives;
    const double precision = static_cast<double>(tp) / predicted;
    ap += (recall - last_recall) * precision;
    last_recall = recall;
  }
  return ap;
}

// Spearman by counting ranks and a two-pass Pearson.
inline double SpearmanOracle(const std::vector<double>& x, const std::vector<double>& y) {
  const int n = static_cast<int>(x.size());
  auto ranks = [n](const std::vector<double>& v) {
    std::vector<double> r(n);
    for (int i = 0; i < n; ++i) {
      int less = 0, equal = 0;
      for (int j = 0; j < n; ++j) {
        less += v[j] < v[i];
        equal += v[j] == v[i];
      }
      r[i] = less + (equal + 1) / 2.0;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

// P(X >= r) with X ~ Binomial(M * K, n_E / N).
inline double BinomialTailOracle(int r, int N, int n_E, int K, int M) {
  if (r <= 0) return 1.0;
  if (r > M * K) return 0.0;
  boost::math::binomial_distribution<double> dist(M * K, static_cast<double>(n_E) / N);
  return boost::math::cdf(boost::math::complement(dist, r - 1));
}

// P(X >= r) where X is the sum of M independent Hypergeometric(N, n_E, K)
// draws, by direct convolution of Boost pdfs.
inline double ExactTailOracle(int r, int N, int n_E, int K, int M) {
  boost::math::hypergeometric_distribution<double> h(n_E, K, N);
  std::vector<double> one(K + 1, 0.0);
  for (int x = 0; x <= K; ++x) {
    if (x >= static_cast<int>(boost::math::range(h).first) &&
        x <= static_cast<int>(boost::math::range(h).second)) {
      one[x] = boost::math::pdf(h, static_cast<unsigned>(x));
    }
  }
  std::vector<double> total{1.0};
  for (int m = 0; m < M; ++m) {
    std::vector<double> next(total.size() + K, 0.0);
    for (std::size_t a = 0; a < total.size(); ++a) {
      for (int b = 0; b <= K; ++b) next[a + b] += total[a] * one[b];
    }
    total = std::move(next);
  }
  double tail = 0.0;
  for (std::size_t x = std::max(r, 0); x < total.size(); ++x) tail += total[x];
  return std::min(tail, 1.0);
}

}  // namespace modscope::testing

#endif  // MODSCOPE_TESTS_SUPPORT_H_
