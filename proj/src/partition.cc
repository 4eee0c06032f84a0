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

#include "modscope/partition.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "modscope/checkpoint.h"
#include "modscope/errors.h"

namespace modscope {
namespace {

void CheckDivides(int d_ff, int num_experts) {
  if (num_experts < 1 || d_ff < 1 || d_ff % num_experts != 0) {
    throw ConfigError("num_experts " + std::to_string(num_experts) +
                      " does not divide d_ff " + std::to_string(d_ff));
  }
}

double Objective(const Matrix& distances, const std::vector<int>& assignment) {
  double total = 0.0;
  for (size_t i = 0; i < assignment.size(); ++i) {
    total += distances(static_cast<Eigen::Index>(i), assignment[i]);
  }
  return total;
}

// Unit-normalized rows; zero rows stay zero.
Matrix NormalizedRows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double norm = out.row(r).norm();
    if (norm > 0.0) out.row(r) /= norm;
  }
  return out;
}

Matrix SeedCentroids(const Matrix& rows, int num_experts, std::mt19937_64& rng) {
  const int n = static_cast<int>(rows.rows());
  Matrix centroids(num_experts, rows.cols());
  std::vector<char> chosen(n, 0);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  int pick = std::uniform_int_distribution<int>(0, n - 1)(rng);
  for (int c = 0; c < num_experts; ++c) {
    if (c > 0) {
      std::vector<double> weights(n);
      double total = 0.0;
      for (int i = 0; i < n; ++i) {
        weights[i] = chosen[i] ? 0.0 : nearest[i] * nearest[i];
        total += weights[i];
      }
      if (total > 0.0) {
        std::discrete_distribution<int> dist(weights.begin(), weights.end());
        pick = dist(rng);
      } else {
        std::vector<int> rest;
        for (int i = 0; i < n; ++i) {
          if (!chosen[i]) rest.push_back(i);
        }
        pick = rest[std::uniform_int_distribution<size_t>(0, rest.size() - 1)(rng)];
      }
    }
    chosen[pick] = 1;
    centroids.row(c) = rows.row(pick);
    for (int i = 0; i < n; ++i) {
      const double d = 1.0 - rows.row(i).dot(centroids.row(c));
      nearest[i] = std::min(nearest[i], std::max(d, 0.0));
    }
  }
  return centroids;
}

// Greedy capacity-constrained assignment, most decisive neurons first.
std::vector<int> BalancedAssign(const Matrix& distances, int capacity) {
  const int n = static_cast<int>(distances.rows());
  const int k = static_cast<int>(distances.cols());
  std::vector<std::vector<int>> preference(n);
  std::vector<double> margin(n, 0.0);
  for (int i = 0; i < n; ++i) {
    auto& pref = preference[i];
    pref.resize(k);
    std::iota(pref.begin(), pref.end(), 0);
    std::stable_sort(pref.begin(), pref.end(), [&](int a, int b) {
      return distances(i, a) < distances(i, b);
    });
    if (k > 1) margin[i] = distances(i, pref[1]) - distances(i, pref[0]);
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return margin[a] > margin[b]; });
  std::vector<int> load(k, 0);
  std::vector<int> assignment(n, -1);
  for (int i : order) {
    for (int c : preference[i]) {
      if (load[c] < capacity) {
        assignment[i] = c;
        ++load[c];
        break;
      }
    }
  }
  return assignment;
}

}  // namespace

std::vector<std::vector<int>> LayerPartition::Members() const {
  std::vector<std::vector<int>> members(std::max(num_experts, 0));
  for (size_t i = 0; i < expert_of.size(); ++i) {
    const int e = expert_of[i];
    if (e >= 0 && e < num_experts) members[e].push_back(static_cast<int>(i));
  }
  return members;
}

bool LayerPartition::IsBalanced() const {
  if (num_experts < 1 || expert_of.empty()) return false;
  const auto members = Members();
  size_t covered = 0;
  for (const auto& m : members) {
    if (m.size() != members.front().size()) return false;
    covered += m.size();
  }
  return covered == expert_of.size();
}

void LayerPartition::Validate() const {
  const std::string tag = "partition of layer " + std::to_string(layer);
  if (num_experts < 1) throw ValidationError(tag + " has no experts");
  for (int e : expert_of) {
    if (e < 0 || e >= num_experts) {
      throw ValidationError(tag + " assigns expert " + std::to_string(e) +
                            " outside [0, " + std::to_string(num_experts) + ")");
    }
  }
  if (!IsBalanced()) throw ValidationError(tag + " is not balanced");
}

bool Partition::HasLayer(int layer) const {
  return std::any_of(layers.begin(), layers.end(),
                     [layer](const LayerPartition& p) { return p.layer == layer; });
}

const LayerPartition& Partition::ForLayer(int layer) const {
  for (const auto& p : layers) {
    if (p.layer == layer) return p;
  }
  throw ValidationError("partition does not cover layer " + std::to_string(layer));
}

LayerPartition BlockPartition(int layer, int d_ff, int num_experts) {
  CheckDivides(d_ff, num_experts);
  LayerPartition p{layer, num_experts, std::vector<int>(d_ff)};
  const int size = d_ff / num_experts;
  for (int i = 0; i < d_ff; ++i) p.expert_of[i] = i / size;
  return p;
}

Partition PreMoePartition(const Model& model) {
  const ModelConfig& c = model.config;
  if (!c.HasMoeLayers()) {
    throw ConfigError("pre-MoE partition requested for a dense-only model");
  }
  Partition partition;
  partition.provenance = "pre-moe architectural experts";
  for (int layer : c.moe_layers) {
    partition.layers.push_back(BlockPartition(layer, c.d_ff, c.num_experts));
  }
  return partition;
}

LayerPartition RandomPartition(int layer, int d_ff, int num_experts,
                               std::uint64_t seed) {
  CheckDivides(d_ff, num_experts);
  LayerPartition p = BlockPartition(layer, d_ff, num_experts);
  std::mt19937_64 rng(seed);
  std::shuffle(p.expert_of.begin(), p.expert_of.end(), rng);
  return p;
}

ClusterResult ClusterPartition(const Model& model, int layer, int num_experts,
                               std::uint64_t seed, const ClusterOptions& options) {
  const ModelConfig& c = model.config;
  if (layer < 0 || layer >= c.num_layers) {
    throw ConfigError("layer " + std::to_string(layer) + " out of range");
  }
  if (c.IsMoeLayer(layer)) {
    throw ConfigError("cluster partition requires a dense layer; layer " +
                      std::to_string(layer) + " is MoE");
  }
  CheckDivides(c.d_ff, num_experts);
  if (options.max_iters < 1) throw ConfigError("max_iters must be >= 1");
  const Matrix& w_in = model.layers[layer].w_in;
  if (!w_in.allFinite()) throw ValidationError("W^I has non-finite entries");

  ClusterResult result;
  result.partition.layer = layer;
  result.partition.num_experts = num_experts;
  if (num_experts == c.d_ff) {
    result.partition.expert_of.resize(c.d_ff);
    std::iota(result.partition.expert_of.begin(), result.partition.expert_of.end(), 0);
    result.converged = true;
    return result;
  }

  const Matrix rows = NormalizedRows(w_in);
  const int capacity = c.d_ff / num_experts;
  std::mt19937_64 rng(seed);
  Matrix centroids = SeedCentroids(rows, num_experts, rng);
  std::vector<int> assignment;

  for (int iter = 0; iter < options.max_iters; ++iter) {
    const Matrix distances =
        (Matrix::Ones(rows.rows(), num_experts) - rows * centroids.transpose())
            .cwiseMax(0.0);
    std::vector<int> proposal = BalancedAssign(distances, capacity);
    if (!assignment.empty()) {
      if (proposal == assignment ||
          Objective(distances, proposal) > Objective(distances, assignment)) {
        result.converged = true;
        break;
      }
    }
    assignment = std::move(proposal);
    for (int e = 0; e < num_experts; ++e) {
      Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(rows.cols());
      for (size_t i = 0; i < assignment.size(); ++i) {
        if (assignment[i] == e) sum += rows.row(static_cast<Eigen::Index>(i));
      }
      const double norm = sum.norm();
      if (norm > 0.0) centroids.row(e) = sum / norm;
    }
    const Matrix updated =
        (Matrix::Ones(rows.rows(), num_experts) - rows * centroids.transpose())
            .cwiseMax(0.0);
    result.objective.push_back(Objective(updated, assignment));
    result.iterations = iter + 1;
  }
  result.partition.expert_of = std::move(assignment);
  return result;
}

MoefiedModel MoefyModel(const Model& model, const Partition& partition) {
  model.Validate();
  MoefiedModel out;
  out.model = model;
  out.permutation.resize(model.config.num_layers);
  for (int l = 0; l < model.config.num_layers; ++l) {
    out.permutation[l].resize(model.config.d_ff);
    std::iota(out.permutation[l].begin(), out.permutation[l].end(), 0);
  }
  if (partition.layers.empty()) throw ValidationError("empty partition");
  out.num_experts = partition.layers.front().num_experts;
  for (const LayerPartition& p : partition.layers) {
    p.Validate();
    if (p.layer < 0 || p.layer >= model.config.num_layers ||
        p.d_ff() != model.config.d_ff) {
      throw ValidationError("partition layer " + std::to_string(p.layer) +
                            " does not match the model");
    }
    if (model.config.IsMoeLayer(p.layer)) {
      throw ConfigError("layer " + std::to_string(p.layer) + " is already MoE");
    }
    if (p.num_experts != out.num_experts) {
      throw ValidationError("partition layers disagree on the expert count");
    }
    std::vector<int>& perm = out.permutation[p.layer];
    perm.clear();
    for (const auto& members : p.Members()) perm.insert(perm.end(), members.begin(), members.end());
    const LayerWeights& src = model.layers[p.layer];
    LayerWeights& dst = out.model.layers[p.layer];
    for (int pos = 0; pos < model.config.d_ff; ++pos) {
      dst.w_in.row(pos) = src.w_in.row(perm[pos]);
      dst.w_out.col(pos) = src.w_out.col(perm[pos]);
      dst.b_in[pos] = src.b_in[perm[pos]];
    }
  }
  return out;
}

Model UnmoefyModel(const MoefiedModel& moefied) {
  Model out = moefied.model;
  for (size_t l = 0; l < moefied.permutation.size(); ++l) {
    const std::vector<int>& perm = moefied.permutation[l];
    const LayerWeights& src = moefied.model.layers[l];
    LayerWeights& dst = out.layers[l];
    for (size_t pos = 0; pos < perm.size(); ++pos) {
      const auto p = static_cast<Eigen::Index>(pos);
      dst.w_in.row(perm[pos]) = src.w_in.row(p);
      dst.w_out.col(perm[pos]) = src.w_out.col(p);
      dst.b_in[perm[pos]] = src.b_in[p];
    }
  }
  return out;
}

Vector ExpertFormForward(const MoefiedModel& moefied, int layer, const Vector& x) {
  const Model& model = moefied.model;
  if (layer < 0 || layer >= model.config.num_layers || model.config.IsMoeLayer(layer)) {
    throw ConfigError("layer " + std::to_string(layer) + " is not a moefied dense layer");
  }
  const LayerWeights& w = model.layers[layer];
  const int size = model.config.d_ff / moefied.num_experts;
  Vector out = Vector::Zero(model.config.d_model);
  for (int e = 0; e < moefied.num_experts; ++e) {
    const auto block = Eigen::seqN(e * size, size);
    Vector pre = w.w_in(block, Eigen::all) * x;
    if (model.config.use_bias) pre += w.b_in(block);
    out += w.w_out(Eigen::all, block) * pre.cwiseMax(0.0);
  }
  if (model.config.use_bias) out += w.b_out;
  return out;
}

std::string SerializePartition(const Partition& partition) {
  std::ostringstream out;
  out << "# provenance: " << partition.provenance << '\n';
  out << "layer,neuron,expert\n";
  for (const LayerPartition& p : partition.layers) {
    for (int i = 0; i < p.d_ff(); ++i) {
      out << p.layer << ',' << i << ',' << p.expert_of[i] << '\n';
    }
  }
  return out.str();
}

Partition ParsePartition(std::string_view text) {
  Partition partition;
  std::map<int, std::map<int, int>> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.rfind("# provenance:", 0) == 0) {
      partition.provenance = line.substr(13);
      if (!partition.provenance.empty() && partition.provenance.front() == ' ') {
        partition.provenance.erase(0, 1);
      }
      continue;
    }
    if (line[0] == '#') continue;
    if (!header_seen) {
      if (line != "layer,neuron,expert") {
        throw ParseError("expected header 'layer,neuron,expert'", line_no);
      }
      header_seen = true;
      continue;
    }
    int layer = 0, neuron = 0, expert = 0;
    char c1 = 0, c2 = 0;
    std::istringstream fields(line);
    if (!(fields >> layer >> c1 >> neuron >> c2 >> expert) || c1 != ',' || c2 != ',' ||
        neuron < 0 || expert < 0) {
      throw ParseError("malformed partition row '" + line + "'", line_no);
    }
    if (!rows[layer].emplace(neuron, expert).second) {
      throw ParseError("duplicate neuron " + std::to_string(neuron), line_no);
    }
  }
  for (const auto& [layer, assignment] : rows) {
    LayerPartition p;
    p.layer = layer;
    int max_expert = -1;
    for (const auto& [neuron, expert] : assignment) {
      if (neuron != p.d_ff()) {
        throw ValidationError("partition of layer " + std::to_string(layer) +
                              " skips neuron " + std::to_string(p.d_ff()));
      }
      p.expert_of.push_back(expert);
      max_expert = std::max(max_expert, expert);
    }
    p.num_experts = max_expert + 1;
    p.Validate();
    partition.layers.push_back(std::move(p));
  }
  return partition;
}

void SavePartition(const Partition& partition, const std::filesystem::path& path) {
  WriteFileBytes(path, SerializePartition(partition));
}

Partition LoadPartition(const std::filesystem::path& path) {
  return ParsePartition(ReadFileBytes(path));
}

}  // namespace modscope
