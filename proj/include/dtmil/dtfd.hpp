#pragma once

// Double-tier training: a slide's instances are dealt into pseudo-bags that
// inherit the slide label, a Tier-1 AB-MIL learns on the pseudo-bags, one
// feature per pseudo-bag is distilled from the Tier-1 forward, and a Tier-2
// AB-MIL classifies the slide from the distilled features. The two tiers are
// optimized as separate objectives: distilled features enter Tier-2 as
// constants, so no Tier-2 gradient reaches Tier-1.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtmil/abmil.hpp"
#include "dtmil/adam.hpp"
#include "dtmil/attribution.hpp"
#include "dtmil/data.hpp"
#include "dtmil/metrics.hpp"
#include "dtmil/rng.hpp"

namespace dtmil {

// ---------------------------------------------------------------------------
// Pseudo-bag partitioning
// ---------------------------------------------------------------------------

struct PseudoBagPartition {
  std::string bag_id;
  int M = 0;
  std::vector<std::vector<int>> groups;  // disjoint cover of 0..K-1
  uint64_t seed = 0;
};

// Shuffles 0..K-1 and deals round-robin, so group sizes differ by at most 1.
inline PseudoBagPartition split_pseudobags(int K, int M, uint64_t seed,
                                           const std::string& bag_id = "") {
  if (M < 1 || K < M)
    throw ValueError("split_pseudobags: need K >= M >= 1, got K=" + std::to_string(K) +
                     " M=" + std::to_string(M));
  Rng rng(seed);
  std::vector<int> perm(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) perm[size_t(i)] = i;
  rng.shuffle(perm);
  PseudoBagPartition part;
  part.bag_id = bag_id;
  part.M = M;
  part.seed = seed;
  part.groups.resize(size_t(M));
  for (int j = 0; j < K; ++j) part.groups[size_t(j % M)].push_back(perm[size_t(j)]);
  return part;
}

// ---------------------------------------------------------------------------
// Distillation strategies
// ---------------------------------------------------------------------------

enum class Distill { MaxS, MaxMinS, MAS, AFS };

inline const char* distill_name(Distill d) {
  switch (d) {
    case Distill::MaxS: return "maxs";
    case Distill::MaxMinS: return "maxmins";
    case Distill::MAS: return "mas";
    case Distill::AFS: return "afs";
  }
  return "?";
}

inline Distill parse_distill(const std::string& s) {
  if (s == "maxs") return Distill::MaxS;
  if (s == "maxmins") return Distill::MaxMinS;
  if (s == "mas") return Distill::MAS;
  if (s == "afs") return Distill::AFS;
  throw ValueError("unknown distillation strategy '" + s + "' (maxs|maxmins|mas|afs)");
}

inline int distill_dim(Distill d, int D) { return d == Distill::MaxMinS ? 2 * D : D; }

template <typename S>
struct DistilledFeature {
  std::vector<S> vec;              // D, or 2D for MaxMinS; severed from the graph
  int pseudo_bag_index = 0;
  std::vector<int> source_instances;  // within-pseudo-bag rows; empty for AFS
  bool aggregate = false;             // true for AFS
};

namespace detail {

template <typename S>
std::vector<S> row_of(const Tensor<S>& H, int k) {
  std::vector<S> out(size_t(H.cols()));
  for (int d = 0; d < H.cols(); ++d) out[size_t(d)] = H.at(k, d);
  return out;
}

// argmax/argmin with lowest-index tie break
template <typename S>
int arg_extreme(const std::vector<S>& v, bool want_max) {
  int best = 0;
  for (int i = 1; i < int(v.size()); ++i) {
    if (want_max ? v[size_t(i)] > v[size_t(best)] : v[size_t(i)] < v[size_t(best)]) best = i;
  }
  return best;
}

}  // namespace detail

// Selects the feature a pseudo-bag forwards to Tier-2. Raw instance features
// h_k are used for the selection strategies (not the attention-scaled h_hat).
template <typename S>
DistilledFeature<S> distill(const AbmilForward<S>& fwd, const InstanceAttribution<S>& attr,
                            Distill strategy) {
  DistilledFeature<S> out;
  switch (strategy) {
    case Distill::MaxS: {
      if (attr.C != 2) throw ValueError("distill MaxS expects 2 classes");
      std::vector<S> p1(size_t(fwd.K));
      for (int k = 0; k < fwd.K; ++k) p1[size_t(k)] = attr.p[size_t(k) * 2 + 1];
      const int kmax = detail::arg_extreme(p1, true);
      out.vec = detail::row_of(fwd.H, kmax);
      out.source_instances = {kmax};
      break;
    }
    case Distill::MaxMinS: {
      if (attr.C != 2) throw ValueError("distill MaxMinS expects 2 classes");
      std::vector<S> p1(size_t(fwd.K));
      for (int k = 0; k < fwd.K; ++k) p1[size_t(k)] = attr.p[size_t(k) * 2 + 1];
      const int kmax = detail::arg_extreme(p1, true);
      const int kmin = detail::arg_extreme(p1, false);
      out.vec = detail::row_of(fwd.H, kmax);
      auto lo = detail::row_of(fwd.H, kmin);
      out.vec.insert(out.vec.end(), lo.begin(), lo.end());
      out.source_instances = {kmax, kmin};
      break;
    }
    case Distill::MAS: {
      std::vector<S> a(attr.a_raw);
      const int kmax = detail::arg_extreme(a, true);
      out.vec = detail::row_of(fwd.H, kmax);
      out.source_instances = {kmax};
      break;
    }
    case Distill::AFS: {
      out.vec.assign(fwd.F.values().begin(), fwd.F.values().end());
      out.aggregate = true;
      break;
    }
  }
  return out;
}

// Convenience: runs the instance-probability derivation only when the
// strategy needs it.
template <typename S>
DistilledFeature<S> distill(const AbmilForward<S>& fwd, Distill strategy) {
  if (strategy == Distill::MaxS || strategy == Distill::MaxMinS)
    return distill(fwd, attribute_forward(fwd), strategy);
  InstanceAttribution<S> attr;
  attr.K = fwd.K;
  attr.C = fwd.s.cols();
  attr.a_raw.assign(fwd.a.values().begin(), fwd.a.values().end());
  return distill(fwd, attr, strategy);
}

// ---------------------------------------------------------------------------
// Model and losses
// ---------------------------------------------------------------------------

template <typename S>
struct DtfdModel {
  AbmilParams<S> tier1;
  AbmilParams<S> tier2;  // input dim is 2D exactly for MaxMinS
  int M = 5;
  Distill strategy = Distill::AFS;
};

// Mean cross entropy of the pseudo-bag positive probabilities against the
// parent label; the caller averages across slides.
template <typename S>
Tensor<S> tier1_loss(const std::vector<AbmilForward<S>>& pseudo_forwards, int label) {
  if (pseudo_forwards.empty()) throw ValueError("tier1_loss: no pseudo-bag forwards");
  Tensor<S> total;
  for (const auto& fwd : pseudo_forwards) {
    auto term = bce_loss(pick(fwd.p_bag, 0, 1), label);
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, S(1) / S(pseudo_forwards.size()));
}

// Runs the Tier-2 AB-MIL over the distilled features of one slide.
template <typename S>
AbmilForward<S> tier2_forward(const std::vector<DistilledFeature<S>>& feats,
                              const AbmilParams<S>& tier2) {
  if (feats.empty()) throw ValueError("tier2_forward: no distilled features");
  const int dim = int(feats[0].vec.size());
  if (dim != tier2.dims.D)
    throw ShapeError("tier2_forward: feature dim " + std::to_string(dim) +
                     " does not match tier-2 input dim " + std::to_string(tier2.dims.D));
  std::vector<S> vals;
  vals.reserve(feats.size() * size_t(dim));
  for (const auto& f : feats) {
    if (int(f.vec.size()) != dim)
      throw ShapeError("tier2_forward: inconsistent distilled feature dims");
    vals.insert(vals.end(), f.vec.begin(), f.vec.end());
  }
  auto G = Tensor<S>::leaf(int(feats.size()), dim, std::move(vals), false);
  return forward_bag(G, tier2);
}

namespace detail {

template <typename S>
Tensor<S> pseudo_bag_tensor(const BagRecord& rec, const std::vector<int>& rows) {
  std::vector<S> vals;
  vals.reserve(rows.size() * size_t(rec.D));
  for (int r : rows)
    for (int d = 0; d < rec.D; ++d) vals.push_back(S(rec.features[size_t(r) * rec.D + d]));
  return Tensor<S>::leaf(int(rows.size()), rec.D, std::move(vals), false);
}

inline int effective_m(const BagRecord& rec, int M) {
  if (rec.K >= M) return M;
  std::cerr << "warning: bag " << rec.bag_id << " has K=" << rec.K << " < M=" << M
            << "; using M=" << rec.K << " for this bag\n";
  return rec.K;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training step and loop
// ---------------------------------------------------------------------------

struct StepLosses {
  double l1 = 0.0;
  double l2 = 0.0;
};

// One slide, one optimization step per tier. The partition is freshly drawn
// from `partition_seed`; distillation reads the retained Tier-1 forwards
// before the Tier-1 update so the attribution gradients match the values
// that produced them.
template <typename S>
StepLosses train_step(const BagRecord& slide, DtfdModel<S>& model, AdamState<S>& st1,
                      AdamState<S>& st2, const AdamHyper& hp1, const AdamHyper& hp2,
                      uint64_t partition_seed) {
  const int m_eff = detail::effective_m(slide, model.M);
  const auto part = split_pseudobags(slide.K, m_eff, partition_seed, slide.bag_id);

  std::vector<AbmilForward<S>> fwds;
  fwds.reserve(size_t(m_eff));
  for (const auto& group : part.groups)
    fwds.push_back(forward_bag(detail::pseudo_bag_tensor<S>(slide, group), model.tier1));
  auto l1 = tier1_loss(fwds, slide.label);

  std::vector<DistilledFeature<S>> feats;
  feats.reserve(fwds.size());
  for (size_t m = 0; m < fwds.size(); ++m) {
    feats.push_back(distill(fwds[m], model.strategy));
    feats.back().pseudo_bag_index = int(m);
  }

  zero_grad_graph(l1);
  backward(l1);
  auto params1 = model.tier1.trainable();
  adam_step(params1, st1, hp1);

  auto fwd2 = tier2_forward(feats, model.tier2);
  auto l2 = bce_loss(pick(fwd2.p_bag, 0, 1), slide.label);
  zero_grad_graph(l2);
  backward(l2);
  auto params2 = model.tier2.trainable();
  adam_step(params2, st2, hp2);

  return {double(l1.item()), double(l2.item())};
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct InferResult {
  double y_tier2 = 0.0;               // Tier-2 positive probability
  std::vector<double> y_pseudo;       // Tier-1 positive probability per pseudo-bag
  double tier1_pooled = 0.0;          // max over pseudo-bags
};

// Evaluation partitions are pinned per bag id, independent of any run seed.
inline constexpr uint64_t kInferPartitionSalt = 0x70736575646f6267ULL;

template <typename S>
InferResult infer(const BagRecord& slide, const DtfdModel<S>& model) {
  const int m_eff = detail::effective_m(slide, model.M);
  const uint64_t seed = Rng::mix(kInferPartitionSalt, Rng::hash(slide.bag_id));
  const auto part = split_pseudobags(slide.K, m_eff, seed, slide.bag_id);

  InferResult out;
  std::vector<DistilledFeature<S>> feats;
  feats.reserve(size_t(m_eff));
  for (size_t m = 0; m < part.groups.size(); ++m) {
    auto fwd = forward_bag(detail::pseudo_bag_tensor<S>(slide, part.groups[m]), model.tier1);
    out.y_pseudo.push_back(double(fwd.p_bag.at(0, 1)));
    feats.push_back(distill(fwd, model.strategy));
    feats.back().pseudo_bag_index = int(m);
  }
  out.tier1_pooled = *std::max_element(out.y_pseudo.begin(), out.y_pseudo.end());
  auto fwd2 = tier2_forward(feats, model.tier2);
  out.y_tier2 = double(fwd2.p_bag.at(0, 1));
  return out;
}

// ---------------------------------------------------------------------------
// Fit loop with per-epoch validation and best-epoch selection
// ---------------------------------------------------------------------------

struct FitConfig {
  int M = 5;
  Distill strategy = Distill::AFS;
  int epochs = 50;
  AdamHyper opt;
  int D_att = 128;
  int head_hidden = 0;
  bool head_bias = true;
  int patience = 0;  // stop after this many epochs without val-AUC improvement; 0 = off
  uint64_t seed = 1;
};

struct HistoryRow {
  int epoch = 0;  // 1-based
  double l1 = 0.0;
  double l2 = 0.0;
  double val_auc_t1 = 0.0;
  double val_auc_t2 = 0.0;
};

template <typename S>
struct FitResult {
  DtfdModel<S> model;  // parameters from the best-validation-AUC epoch
  std::vector<HistoryRow> history;
  int best_epoch = 0;
  double best_val_auc = 0.0;
};

template <typename S>
struct SplitScores {
  std::vector<double> t2;
  std::vector<double> t1_pooled;
  std::vector<int> labels;
};

template <typename S>
SplitScores<S> score_bags(const std::vector<BagRecord*>& bags, const DtfdModel<S>& model) {
  SplitScores<S> sc;
  for (BagRecord* rec : bags) {
    load_features(*rec);
    const auto res = infer(*rec, model);
    sc.t2.push_back(res.y_tier2);
    sc.t1_pooled.push_back(res.tier1_pooled);
    sc.labels.push_back(rec->label);
  }
  return sc;
}

template <typename S>
FitResult<S> fit(std::vector<BagRecord>& bags, const FitConfig& cfg) {
  std::vector<BagRecord*> train, val;
  for (auto& b : bags) {
    if (b.split == "train") train.push_back(&b);
    if (b.split == "val") val.push_back(&b);
  }
  if (train.empty()) throw ValueError("fit: train split is empty");
  if (val.empty()) throw ValueError("fit: val split is empty");
  bool has_pos = false, has_neg = false;
  for (auto* b : val) (b->label == 1 ? has_pos : has_neg) = true;
  if (!has_pos || !has_neg)
    throw SingleClassError("fit: val split needs both classes for AUC model selection");
  if (cfg.epochs < 1) throw ValueError("fit: epochs must be >= 1");

  for (auto* b : train) load_features(*b);
  const int D = train.front()->D;
  for (auto* b : train)
    if (b->D != D) throw ShapeError("fit: inconsistent feature dims across bags");

  DtfdModel<S> model;
  model.M = cfg.M;
  model.strategy = cfg.strategy;
  {
    Rng r1(Rng::mix(cfg.seed, 1));
    model.tier1 = AbmilParams<S>::init({D, cfg.D_att, 2, cfg.head_hidden, cfg.head_bias}, r1);
    Rng r2(Rng::mix(cfg.seed, 2));
    model.tier2 = AbmilParams<S>::init(
        {distill_dim(cfg.strategy, D), cfg.D_att, 2, cfg.head_hidden, cfg.head_bias}, r2);
  }
  auto params1 = model.tier1.trainable();
  auto params2 = model.tier2.trainable();
  auto st1 = AdamState<S>::init(params1);
  auto st2 = AdamState<S>::init(params2);

  Rng train_rng(Rng::mix(cfg.seed, 3));
  FitResult<S> result;
  result.best_val_auc = -1.0;
  AbmilParams<S> best1 = model.tier1.clone();
  AbmilParams<S> best2 = model.tier2.clone();

  std::vector<BagRecord*> order = train;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    train_rng.shuffle(order);
    double sum_l1 = 0.0, sum_l2 = 0.0;
    for (BagRecord* rec : order) {
      const auto losses =
          train_step(*rec, model, st1, st2, cfg.opt, cfg.opt, train_rng.next_u64());
      if (!std::isfinite(losses.l1) || !std::isfinite(losses.l2))
        throw NumericError("fit: non-finite loss at epoch " + std::to_string(epoch), epoch);
      sum_l1 += losses.l1;
      sum_l2 += losses.l2;
    }
    const auto sc = score_bags(val, model);
    HistoryRow row;
    row.epoch = epoch;
    row.l1 = sum_l1 / double(order.size());
    row.l2 = sum_l2 / double(order.size());
    row.val_auc_t2 = auc(sc.t2, sc.labels);
    row.val_auc_t1 = auc(sc.t1_pooled, sc.labels);
    result.history.push_back(row);
    if (row.val_auc_t2 > result.best_val_auc) {  // ties keep the earliest epoch
      result.best_val_auc = row.val_auc_t2;
      result.best_epoch = epoch;
      best1 = model.tier1.clone();
      best2 = model.tier2.clone();
    }
    if (cfg.patience > 0 && epoch - result.best_epoch >= cfg.patience) break;
  }
  result.model = model;
  result.model.tier1 = best1;
  result.model.tier2 = best2;
  return result;
}

// ---------------------------------------------------------------------------
// Model directory: tier1.json, tier2.json, model.meta.json, history.csv
// ---------------------------------------------------------------------------

inline constexpr int kModelFormatVersion = 1;

template <typename S>
void save_model(const DtfdModel<S>& model, const std::filesystem::path& dir, uint64_t seed,
                int best_epoch) {
  std::filesystem::create_directories(dir);
  save_params(model.tier1, (dir / "tier1.json").string());
  save_params(model.tier2, (dir / "tier2.json").string());
  nlohmann::json meta = {
      {"format_version", kModelFormatVersion},
      {"M", model.M},
      {"strategy", distill_name(model.strategy)},
      {"dims",
       {{"D", model.tier1.dims.D},
        {"D_att", model.tier1.dims.D_att},
        {"C", model.tier1.dims.C},
        {"head_hidden", model.tier1.dims.head_hidden},
        {"head_bias", model.tier1.dims.head_bias},
        {"tier2_input_dim", model.tier2.dims.D}}},
      {"seed", seed},
      {"best_epoch", best_epoch}};
  std::ofstream out(dir / "model.meta.json");
  out << meta.dump(2) << "\n";
}

template <typename S>
DtfdModel<S> load_model(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "model.meta.json");
  if (!meta_in) throw ValueError("load_model: cannot open " + (dir / "model.meta.json").string());
  nlohmann::json meta;
  meta_in >> meta;
  if (meta.at("format_version").get<int>() != kModelFormatVersion)
    throw ValueError("load_model: unsupported format_version");
  DtfdModel<S> model;
  model.M = meta.at("M").get<int>();
  model.strategy = parse_distill(meta.at("strategy").get<std::string>());
  model.tier1 = load_params<S>((dir / "tier1.json").string());
  model.tier2 = load_params<S>((dir / "tier2.json").string());
  if (model.tier2.dims.D != distill_dim(model.strategy, model.tier1.dims.D))
    throw ValueError("load_model: tier-2 input dim does not match strategy");
  return model;
}

inline constexpr const char* kHistoryHeader = "epoch,L1,L2,val_auc_t1,val_auc_t2";

inline void write_history(const std::vector<HistoryRow>& history,
                          const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ValueError("write_history: cannot open " + path.string());
  out << kHistoryHeader << "\n";
  for (const auto& r : history)
    out << r.epoch << ',' << format_number(r.l1) << ',' << format_number(r.l2) << ','
        << format_number(r.val_auc_t1) << ',' << format_number(r.val_auc_t2) << "\n";
}

}  // namespace dtmil
