#pragma once

// Bag datasets: seeded synthetic generation with a controllable witness
// rate, the .bagf binary feature format, and the manifest that ties bag
// files to labels and splits.
//
// .bagf layout (little-endian):
//   bytes 0-3   magic "BAGF"
//   byte  4     version (1)
//   byte  5     dtype (0 = float32)
//   bytes 6-7   reserved, zero
//   bytes 8-11  K  (u32)
//   bytes 12-15 D  (u32)
//   then K*D float32 values, instance-major.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtmil/errors.hpp"
#include "dtmil/rng.hpp"

namespace dtmil {

struct BagRecord {
  std::string bag_id;
  int K = 0;
  int D = 0;
  std::vector<float> features;  // K x D row-major; empty until loaded
  int label = 0;                // 0 or 1
  std::string split;            // train / val / test
  std::vector<uint8_t> witness_mask;  // synthetic only; per-instance 0/1
  std::string path;             // source .bagf, for lazy loading

  bool features_loaded() const { return !features.empty(); }
};

struct SynthConfig {
  int n_bags = 400;
  double pos_frac = 0.5;
  int k_min = 50;
  int k_max = 200;
  int D = 64;
  double witness_rate = 0.1;  // in (0, 1]
  double sep = 2.0;           // positive-cluster mean shift along e1, in sigmas
  uint64_t seed = 1;

  void validate() const {
    if (n_bags < 1) throw ValueError("synth config: n_bags must be >= 1");
    if (!(pos_frac > 0.0 && pos_frac < 1.0))
      throw ValueError("synth config: pos_frac must be in (0,1)");
    if (k_min < 1 || k_max < k_min) throw ValueError("synth config: need 1 <= k_min <= k_max");
    if (D < 1) throw ValueError("synth config: D must be >= 1");
    if (!(witness_rate > 0.0 && witness_rate <= 1.0))
      throw ValueError("synth config: witness_rate must be in (0,1]");
    if (sep < 0.0) throw ValueError("synth config: sep must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// .bagf reader/writer
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32le(std::string& buf, uint32_t v) {
  buf.push_back(char(v & 0xff));
  buf.push_back(char((v >> 8) & 0xff));
  buf.push_back(char((v >> 16) & 0xff));
  buf.push_back(char((v >> 24) & 0xff));
}

inline uint32_t get_u32le(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}

}  // namespace detail

inline void write_bag(const std::string& path, int K, int D, const std::vector<float>& features) {
  if (K < 1 || D < 1) throw ValueError("write_bag: K and D must be >= 1");
  if (features.size() != size_t(K) * size_t(D))
    throw ValueError("write_bag: feature count does not match K*D");
  std::string buf;
  buf.reserve(16 + features.size() * 4);
  buf += "BAGF";
  buf.push_back(char(1));  // version
  buf.push_back(char(0));  // dtype float32
  buf.push_back(char(0));
  buf.push_back(char(0));
  detail::put_u32le(buf, uint32_t(K));
  detail::put_u32le(buf, uint32_t(D));
  for (float f : features) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32le(buf, bits);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValueError("write_bag: cannot open " + path);
  out.write(buf.data(), std::streamsize(buf.size()));
}

struct BagMatrix {
  int K = 0;
  int D = 0;
  std::vector<float> features;
};

inline BagMatrix read_bag(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValueError("read_bag: cannot open " + path);
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  if (raw.size() < 16) {
    if (raw.size() < 4 || std::memcmp(raw.data(), "BAGF", 4) != 0)
      throw BagfError(BagfError::Kind::magic, path + ": bad magic, expected BAGF");
    throw BagfError(BagfError::Kind::truncated,
                    path + ": truncated header, expected 16 bytes, got " + std::to_string(raw.size()));
  }
  if (std::memcmp(raw.data(), "BAGF", 4) != 0)
    throw BagfError(BagfError::Kind::magic, path + ": bad magic, expected BAGF");
  if (p[4] != 1)
    throw BagfError(BagfError::Kind::version,
                    path + ": unsupported version " + std::to_string(int(p[4])));
  if (p[5] != 0)
    throw BagfError(BagfError::Kind::dtype, path + ": unsupported dtype " + std::to_string(int(p[5])));
  BagMatrix m;
  const uint32_t K = detail::get_u32le(p + 8);
  const uint32_t D = detail::get_u32le(p + 12);
  if (K == 0 || D == 0)
    throw BagfError(BagfError::Kind::zero_dim, path + ": K and D must be nonzero, got K=" +
                                                   std::to_string(K) + " D=" + std::to_string(D));
  const size_t expected = 16 + size_t(K) * size_t(D) * 4;
  if (raw.size() != expected)
    throw BagfError(BagfError::Kind::truncated, path + ": expected " + std::to_string(expected) +
                                                    " bytes, got " + std::to_string(raw.size()));
  m.K = int(K);
  m.D = int(D);
  m.features.resize(size_t(K) * D);
  for (size_t i = 0; i < m.features.size(); ++i) {
    const uint32_t bits = detail::get_u32le(p + 16 + i * 4);
    std::memcpy(&m.features[i], &bits, 4);
  }
  return m;
}

inline void load_features(BagRecord& rec) {
  if (rec.features_loaded()) return;
  BagMatrix m = read_bag(rec.path);
  rec.K = m.K;
  rec.D = m.D;
  rec.features = std::move(m.features);
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

// Negative instances ~ N(0, I); witness instances ~ N(sep * e1, I). A
// positive bag gets max(1, Binomial(K, witness_rate)) witnesses, a negative
// bag gets none, so label == 1 exactly when a witness exists. Splits are
// dealt per class against exact global 65/10/25 counts.
inline std::vector<BagRecord> generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  const int n = cfg.n_bags;
  const int n_pos = std::clamp(int(std::llround(cfg.pos_frac * n)), 0, n);
  std::vector<int> labels(size_t(n), 0);
  for (int i = 0; i < n_pos; ++i) labels[size_t(i)] = 1;
  rng.shuffle(labels);

  // Global split sizes, then per-class apportioning that preserves them.
  const int n_train = int(std::llround(0.65 * n));
  const int n_val = int(std::llround(0.10 * n));
  const int n_test = n - n_train - n_val;
  std::vector<int> pos_idx, neg_idx;
  for (int i = 0; i < n; ++i) (labels[size_t(i)] == 1 ? pos_idx : neg_idx).push_back(i);
  rng.shuffle(pos_idx);
  rng.shuffle(neg_idx);
  const int pos_train = int(std::llround(0.65 * double(pos_idx.size())));
  const int pos_val = int(std::llround(0.10 * double(pos_idx.size())));
  std::vector<std::string> split(static_cast<size_t>(n));
  auto deal = [&](const std::vector<int>& idx, int t, int v) {
    for (size_t i = 0; i < idx.size(); ++i)
      split[size_t(idx[i])] = i < size_t(t) ? "train" : (i < size_t(t + v) ? "val" : "test");
  };
  deal(pos_idx, pos_train, pos_val);
  deal(neg_idx, n_train - pos_train, n_val - pos_val);
  (void)n_test;

  std::vector<BagRecord> bags;
  bags.reserve(size_t(n));
  int pad = 1;
  for (int x = n - 1; x >= 10; x /= 10) ++pad;
  for (int i = 0; i < n; ++i) {
    BagRecord rec;
    std::ostringstream id;
    id << "bag_" << std::setw(std::max(pad, 4)) << std::setfill('0') << i;
    rec.bag_id = id.str();
    rec.label = labels[size_t(i)];
    rec.split = split[size_t(i)];
    rec.K = int(rng.uniform_int(cfg.k_min, cfg.k_max));
    rec.D = cfg.D;
    rec.witness_mask.assign(size_t(rec.K), 0);
    if (rec.label == 1) {
      const int witnesses = std::min(rec.K, std::max(1, rng.binomial(rec.K, cfg.witness_rate)));
      std::vector<int> order(size_t(rec.K));
      for (int k = 0; k < rec.K; ++k) order[size_t(k)] = k;
      rng.shuffle(order);
      for (int wi = 0; wi < witnesses; ++wi) rec.witness_mask[size_t(order[size_t(wi)])] = 1;
    }
    rec.features.resize(size_t(rec.K) * size_t(rec.D));
    for (int k = 0; k < rec.K; ++k)
      for (int d = 0; d < rec.D; ++d) {
        double v = rng.normal();
        if (d == 0 && rec.witness_mask[size_t(k)]) v += cfg.sep;
        rec.features[size_t(k) * rec.D + d] = float(v);
      }
    bags.push_back(std::move(rec));
  }
  return bags;
}

// ---------------------------------------------------------------------------
// On-disk dataset: bags/*.bagf + witness.csv + gen.meta.json, manifest last.
// ---------------------------------------------------------------------------

inline constexpr const char* kManifestHeader = "bag_id,path,label,split";

inline void write_dataset(const std::vector<BagRecord>& bags, const SynthConfig& cfg,
                          const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "bags");
  std::ostringstream manifest;
  manifest << kManifestHeader << "\n";
  std::ostringstream witness;
  witness << "bag_id,instance_index,is_witness\n";
  for (const auto& rec : bags) {
    const std::string rel = "bags/" + rec.bag_id + ".bagf";
    write_bag((dir / rel).string(), rec.K, rec.D, rec.features);
    manifest << rec.bag_id << ',' << rel << ',' << rec.label << ',' << rec.split << "\n";
    for (int k = 0; k < rec.K; ++k)
      witness << rec.bag_id << ',' << k << ',' << int(rec.witness_mask[size_t(k)]) << "\n";
  }
  {
    std::ofstream out(dir / "witness.csv");
    out << witness.str();
  }
  {
    nlohmann::json meta = {{"format_version", 1},
                           {"n_bags", cfg.n_bags},
                           {"pos_frac", cfg.pos_frac},
                           {"k_min", cfg.k_min},
                           {"k_max", cfg.k_max},
                           {"dim", cfg.D},
                           {"witness_rate", cfg.witness_rate},
                           {"sep", cfg.sep},
                           {"seed", cfg.seed}};
    std::ofstream out(dir / "gen.meta.json");
    out << meta.dump(2) << "\n";
  }
  // Manifest goes last as the commit marker.
  std::ofstream out(dir / "manifest.csv");
  out << manifest.str();
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace detail

// Reads manifest.csv into feature-less stubs; paths are resolved relative to
// the manifest location and must exist.
inline std::vector<BagRecord> load_manifest(const std::filesystem::path& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  if (!in) throw ManifestError("cannot open manifest " + manifest_path.string());
  std::string line;
  if (!std::getline(in, line)) throw ManifestError("manifest is empty: " + manifest_path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader)
    throw ManifestError("manifest header must be exactly '" + std::string(kManifestHeader) +
                        "', got '" + line + "'");
  const fs::path base = manifest_path.parent_path();
  std::vector<BagRecord> out;
  std::set<std::string> seen;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != 4)
      throw ManifestError("row " + std::to_string(row) + ": expected 4 fields, got " +
                              std::to_string(fields.size()),
                          row);
    BagRecord rec;
    rec.bag_id = fields[0];
    if (!seen.insert(rec.bag_id).second)
      throw ManifestError("row " + std::to_string(row) + ": duplicate bag_id '" + rec.bag_id + "'",
                          row);
    rec.path = (base / fields[1]).string();
    if (!fs::exists(rec.path))
      throw ManifestError("row " + std::to_string(row) + ": bag file missing: " + rec.path, row);
    if (fields[2] == "0")
      rec.label = 0;
    else if (fields[2] == "1")
      rec.label = 1;
    else
      throw ManifestError("row " + std::to_string(row) + ": label must be 0 or 1, got '" +
                              fields[2] + "'",
                          row);
    if (fields[3] != "train" && fields[3] != "val" && fields[3] != "test")
      throw ManifestError("row " + std::to_string(row) + ": split must be train/val/test, got '" +
                              fields[3] + "'",
                          row);
    rec.split = fields[3];
    out.push_back(std::move(rec));
  }
  return out;
}

// witness.csv -> per-bag instance masks; absent entries mean "unknown".
inline std::map<std::string, std::vector<uint8_t>> load_witness_masks(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open witness file " + path.string());
  std::string line;
  std::getline(in, line);  // header
  std::map<std::string, std::vector<uint8_t>> masks;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != 3)
      throw ManifestError("witness row " + std::to_string(row) + ": expected 3 fields", row);
    auto& mask = masks[fields[0]];
    const size_t idx = size_t(std::stoul(fields[1]));
    if (mask.size() <= idx) mask.resize(idx + 1, 0);
    mask[idx] = fields[2] == "1" ? 1 : 0;
  }
  return masks;
}

}  // namespace dtmil
