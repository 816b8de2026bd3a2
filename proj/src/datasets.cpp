#include "pcda/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace pcda {

namespace fs = std::filesystem;
using njson = nlohmann::ordered_json;

// ---- manifest ---------------------------------------------------------------

int DatasetManifest::count(const std::string& split, int class_index) const {
  auto it = splits.find(split);
  if (it == splits.end()) return 0;
  return static_cast<int>(it->second[static_cast<std::size_t>(class_index)].size());
}

int DatasetManifest::total(const std::string& split) const {
  auto it = splits.find(split);
  if (it == splits.end()) return 0;
  int n = 0;
  for (const auto& files : it->second) n += static_cast<int>(files.size());
  return n;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  njson j;
  j["domain"] = m.domain_name;
  j["cloud_size"] = m.cloud_size;
  j["classes"] = m.classes;
  njson splits = njson::object();
  njson counts = njson::object();
  for (const auto& [split, per_class] : m.splits) {
    njson files = njson::object();
    njson cnt = njson::object();
    for (std::size_t c = 0; c < m.classes.size(); ++c) {
      files[m.classes[c]] = per_class[c];
      cnt[m.classes[c]] = per_class[c].size();
    }
    splits[split] = files;
    counts[split] = cnt;
  }
  j["splits"] = splits;
  j["counts"] = counts;
  fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot write manifest " + path.string());
  f << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot read manifest " + path.string());
  njson j = njson::parse(f, nullptr, /*allow_exceptions=*/true);
  DatasetManifest m;
  m.domain_name = j.at("domain").get<std::string>();
  m.cloud_size = j.at("cloud_size").get<int>();
  m.classes = j.at("classes").get<std::vector<std::string>>();
  for (const auto& [split, files] : j.at("splits").items()) {
    std::vector<std::vector<std::string>> per_class(m.classes.size());
    for (std::size_t c = 0; c < m.classes.size(); ++c) {
      if (files.contains(m.classes[c])) {
        per_class[c] = files.at(m.classes[c]).get<std::vector<std::string>>();
      }
    }
    m.splits[split] = std::move(per_class);
  }
  if (j.contains("counts")) {
    for (const auto& [split, cnt] : j.at("counts").items()) {
      for (std::size_t c = 0; c < m.classes.size(); ++c) {
        const int declared = cnt.contains(m.classes[c]) ? cnt.at(m.classes[c]).get<int>() : 0;
        const int listed = m.count(split, static_cast<int>(c));
        if (declared != listed) {
          throw ValidationError("manifest " + path.string() + ": count mismatch for " + split +
                                "/" + m.classes[c] + " (declared " + std::to_string(declared) +
                                ", listed " + std::to_string(listed) + ")");
        }
      }
    }
  }
  return m;
}

// ---- npy IO -----------------------------------------------------------------

namespace {

constexpr char kNpyMagic[] = "\x93NUMPY";

std::string npy_header(int rows) {
  std::string dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (" +
                     std::to_string(rows) + ", 3), }";
  // Total header (magic + version + length field + dict + padding + '\n')
  // must be a multiple of 64.
  const std::size_t base = 6 + 2 + 2;
  std::size_t total = base + dict.size() + 1;
  const std::size_t pad = (64 - total % 64) % 64;
  dict.append(pad, ' ');
  dict.push_back('\n');
  return dict;
}

}  // namespace

void quantize_f32(PointCloud& cloud) {
  for (Eigen::Index i = 0; i < cloud.points.rows(); ++i) {
    for (int c = 0; c < 3; ++c) {
      cloud.points(i, c) = static_cast<double>(static_cast<float>(cloud.points(i, c)));
    }
  }
}

void write_cloud_npy(const fs::path& path, const PointCloud& cloud) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot write cloud file " + path.string());
  const std::string dict = npy_header(cloud.size());
  f.write(kNpyMagic, 6);
  const char version[2] = {1, 0};
  f.write(version, 2);
  const std::uint16_t len = static_cast<std::uint16_t>(dict.size());
  f.write(reinterpret_cast<const char*>(&len), 2);
  f.write(dict.data(), static_cast<std::streamsize>(dict.size()));
  std::vector<float> buf(static_cast<std::size_t>(cloud.size()) * 3);
  for (int i = 0; i < cloud.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      buf[static_cast<std::size_t>(i) * 3 + static_cast<std::size_t>(c)] =
          static_cast<float>(cloud.points(i, c));
    }
  }
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

PointCloud read_cloud_npy(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot read cloud file " + path.string());
  char magic[6];
  f.read(magic, 6);
  if (f.gcount() != 6 || std::memcmp(magic, kNpyMagic, 6) != 0) {
    throw ValidationError("not an npy file: " + path.string());
  }
  char version[2];
  f.read(version, 2);
  std::uint16_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 2);
  std::string header(len, '\0');
  f.read(header.data(), len);
  if (header.find("'<f4'") == std::string::npos) {
    throw ValidationError("unsupported npy dtype (expected <f4) in " + path.string());
  }
  if (header.find("'fortran_order': False") == std::string::npos) {
    throw ValidationError("unsupported npy layout (expected C order) in " + path.string());
  }
  const auto shape_at = header.find("'shape':");
  const auto open = header.find('(', shape_at);
  const auto close = header.find(')', open);
  if (shape_at == std::string::npos || open == std::string::npos || close == std::string::npos) {
    throw ValidationError("malformed npy header in " + path.string());
  }
  std::string shape = header.substr(open + 1, close - open - 1);
  std::replace(shape.begin(), shape.end(), ',', ' ');
  std::istringstream ss(shape);
  long rows = 0, cols = 0;
  ss >> rows >> cols;
  if (rows <= 0 || cols != 3) {
    throw ValidationError("expected an N x 3 cloud in " + path.string());
  }
  std::vector<float> buf(static_cast<std::size_t>(rows) * 3);
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (f.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float))) {
    throw ValidationError("truncated cloud file " + path.string());
  }
  PointCloud cloud;
  cloud.points.resize(rows, 3);
  for (long i = 0; i < rows; ++i) {
    for (int c = 0; c < 3; ++c) {
      const float v = buf[static_cast<std::size_t>(i) * 3 + static_cast<std::size_t>(c)];
      if (!std::isfinite(v)) {
        throw ValidationError("non-finite coordinate in " + path.string());
      }
      cloud.points(i, c) = static_cast<double>(v);
    }
  }
  return cloud;
}

// ---- dataset loading ----------------------------------------------------------

const std::vector<PointCloud>& Dataset::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw ValidationError("dataset has no split " + name);
  return it->second;
}

Dataset load_dataset(const fs::path& root, const DatasetManifest& manifest, DomainTag tag,
                     bool with_labels) {
  Dataset ds;
  ds.manifest = manifest;
  for (const auto& [split, per_class] : manifest.splits) {
    std::vector<std::pair<std::string, int>> entries;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      for (const auto& rel : per_class[c]) {
        entries.emplace_back(rel, static_cast<int>(c));
      }
    }
    std::sort(entries.begin(), entries.end());
    std::vector<PointCloud> clouds;
    clouds.reserve(entries.size());
    for (const auto& [rel, class_idx] : entries) {
      const fs::path path = root / rel;
      if (!fs::exists(path)) {
        throw ValidationError("manifest lists missing file " + path.string());
      }
      PointCloud cloud = read_cloud_npy(path);
      cloud = normalize_cloud(cloud);
      cloud = resample_cloud(cloud, manifest.cloud_size, fnv1a64(rel));
      cloud.domain = tag;
      if (with_labels) cloud.label = class_idx;
      clouds.push_back(std::move(cloud));
    }
    ds.splits[split] = std::move(clouds);
  }
  return ds;
}

// ---- toy generator -------------------------------------------------------------

std::string toy_class_name(ToyClass c) {
  switch (c) {
    case ToyClass::box: return "box";
    case ToyClass::cylinder: return "cylinder";
    case ToyClass::sphere_cap: return "sphere_cap";
    case ToyClass::two_box: return "two_box";
  }
  return "unknown";
}

void ToyDomainSpec::validate() const {
  if (name.empty()) throw ValidationError("toy spec: empty domain name");
  if (classes.empty()) throw ValidationError("toy spec: empty class list");
  if (deformation.density_bias < 0) throw ValidationError("toy spec: density_bias must be >= 0");
  if (deformation.part_dropout < 0 || deformation.part_dropout >= 1) {
    throw ValidationError("toy spec: part_dropout must be in [0, 1)");
  }
  if (deformation.jitter_sigma < 0) throw ValidationError("toy spec: jitter_sigma must be >= 0");
}

namespace {

// Area-uniform surface samplers in canonical pose. Sizes are randomized per
// instance so no two clouds of a class coincide.

Eigen::RowVector3d sample_box_surface(Rng& rng, double ax, double ay, double az) {
  // Face areas: two each of (ay*az), (ax*az), (ax*ay), scaled by 4 (half extents).
  const double a_yz = ay * az, a_xz = ax * az, a_xy = ax * ay;
  const double total = 2 * (a_yz + a_xz + a_xy);
  double u = rng.uniform() * total;
  const double u1 = rng.uniform(-1.0, 1.0);
  const double u2 = rng.uniform(-1.0, 1.0);
  if (u < 2 * a_yz) {
    const double s = u < a_yz ? 1.0 : -1.0;
    return {s * ax, u1 * ay, u2 * az};
  }
  u -= 2 * a_yz;
  if (u < 2 * a_xz) {
    const double s = u < a_xz ? 1.0 : -1.0;
    return {u1 * ax, s * ay, u2 * az};
  }
  u -= 2 * a_xz;
  const double s = u < a_xy ? 1.0 : -1.0;
  return {u1 * ax, u2 * ay, s * az};
}

Eigen::RowVector3d sample_cylinder_surface(Rng& rng, double r, double h) {
  const double lateral = 2 * 3.14159265358979323846 * r * h;
  const double caps = 2 * 3.14159265358979323846 * r * r;
  const double u = rng.uniform() * (lateral + caps);
  const double theta = rng.uniform() * 2 * 3.14159265358979323846;
  if (u < lateral) {
    const double z = rng.uniform(-0.5, 0.5) * h;
    return {r * std::cos(theta), r * std::sin(theta), z};
  }
  const double rr = r * std::sqrt(rng.uniform());
  const double z = (u - lateral < caps / 2) ? h / 2 : -h / 2;
  return {rr * std::cos(theta), rr * std::sin(theta), z};
}

Eigen::RowVector3d sample_sphere_cap_surface(Rng& rng, double radius, double cos_min) {
  // Archimedes: z uniform on the cap gives area-uniform samples.
  const double z = rng.uniform(cos_min, 1.0);
  const double phi = rng.uniform() * 2 * 3.14159265358979323846;
  const double rxy = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {radius * rxy * std::cos(phi), radius * rxy * std::sin(phi), radius * z};
}

}  // namespace

PointCloud generate_toy_cloud(const ToyDomainSpec& spec, int class_index, int instance_index,
                              const std::string& split, int cloud_size, ToyCloudStats* stats) {
  spec.validate();
  if (cloud_size <= 0) throw ValidationError("generate_toy_cloud: cloud_size must be positive");
  if (class_index < 0 || class_index >= static_cast<int>(spec.classes.size())) {
    throw ValidationError("generate_toy_cloud: class index out of range");
  }
  // The stream is independent of the domain *name*: identical specs produce
  // identical clouds, which is what a zero-gap control pair needs.
  Rng rng(derive_seed(spec.seed, "toy/" + split + "/" + std::to_string(class_index),
                      static_cast<u64>(instance_index)));

  const ToyClass cls = spec.classes[static_cast<std::size_t>(class_index)];
  const int pool_size = std::max(6 * cloud_size, 512);
  Points pool(pool_size, 3);

  switch (cls) {
    case ToyClass::box: {
      const double ax = rng.uniform(0.6, 1.0);
      const double ay = rng.uniform(0.6, 1.0);
      const double az = rng.uniform(0.25, 0.45);
      for (int i = 0; i < pool_size; ++i) pool.row(i) = sample_box_surface(rng, ax, ay, az);
      break;
    }
    case ToyClass::cylinder: {
      const double r = rng.uniform(0.3, 0.45);
      const double h = rng.uniform(1.4, 1.9);
      for (int i = 0; i < pool_size; ++i) pool.row(i) = sample_cylinder_surface(rng, r, h);
      break;
    }
    case ToyClass::sphere_cap: {
      const double radius = rng.uniform(0.8, 1.1);
      const double cos_min = rng.uniform(0.1, 0.35);
      for (int i = 0; i < pool_size; ++i) {
        pool.row(i) = sample_sphere_cap_surface(rng, radius, cos_min);
      }
      break;
    }
    case ToyClass::two_box: {
      const double base_z = rng.uniform(0.12, 0.2);
      const double top_x = rng.uniform(0.15, 0.25);
      const double top_z = rng.uniform(0.6, 0.9);
      const double a_base = 8 * (1.0 * base_z + 1.0 * base_z + 1.0 * 1.0);
      const double a_top = 8 * (top_x * top_z + 0.5 * top_z + top_x * 0.5);
      for (int i = 0; i < pool_size; ++i) {
        if (rng.uniform() * (a_base + a_top) < a_base) {
          Eigen::RowVector3d p = sample_box_surface(rng, 1.0, 1.0, base_z);
          pool.row(i) = p;
        } else {
          Eigen::RowVector3d p = sample_box_surface(rng, top_x, 0.5, top_z);
          p(0) += 1.0 - top_x;
          p(2) += base_z + top_z;
          pool.row(i) = p;
        }
      }
      break;
    }
  }

  // Slab dropout: remove everything inside an axis-aligned slab covering
  // `part_dropout` of the bounding box along a random axis.
  std::vector<int> alive(static_cast<std::size_t>(pool_size));
  std::iota(alive.begin(), alive.end(), 0);
  if (spec.deformation.part_dropout > 0) {
    const int axis = static_cast<int>(rng.below(3));
    const double u = rng.uniform();
    const double lo = pool.col(axis).minCoeff();
    const double hi = pool.col(axis).maxCoeff();
    const double extent = hi - lo;
    const double width = spec.deformation.part_dropout * extent;
    const double start = lo + u * (extent - width);
    std::vector<int> kept;
    kept.reserve(alive.size());
    for (int i : alive) {
      const double v = pool(i, axis);
      if (v < start || v >= start + width) kept.push_back(i);
    }
    if (!kept.empty()) alive = std::move(kept);
  }

  if (stats != nullptr) {
    stats->pool_size = pool_size;
    stats->survivors = static_cast<int>(alive.size());
  }

  // Height-biased selection of exactly cloud_size points. Bias 0 is uniform
  // through the same code path so rng consumption stays aligned across specs
  // that differ only in deformation.
  const double zmin = pool.col(2).minCoeff();
  const double zmax = pool.col(2).maxCoeff();
  const double zrange = std::max(zmax - zmin, 1e-12);
  std::vector<double> weight(alive.size());
  for (std::size_t i = 0; i < alive.size(); ++i) {
    const double t = (pool(alive[i], 2) - zmin) / zrange;
    weight[i] = std::pow(t + 0.05, spec.deformation.density_bias);
  }

  PointCloud cloud;
  cloud.points.resize(cloud_size, 3);
  cloud.label = class_index;
  const bool with_replacement = static_cast<int>(alive.size()) < cloud_size;
  std::vector<double> w = weight;
  std::vector<int> pick_from = alive;
  for (int k = 0; k < cloud_size; ++k) {
    double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (total <= 0) {
      for (auto& x : w) x = 1.0;
      total = static_cast<double>(w.size());
    }
    double u = rng.uniform() * total;
    std::size_t chosen = w.size() - 1;
    for (std::size_t i = 0; i < w.size(); ++i) {
      u -= w[i];
      if (u <= 0) {
        chosen = i;
        break;
      }
    }
    cloud.points.row(k) = pool.row(pick_from[chosen]);
    if (!with_replacement) {
      w.erase(w.begin() + static_cast<long>(chosen));
      pick_from.erase(pick_from.begin() + static_cast<long>(chosen));
    }
  }

  if (spec.deformation.jitter_sigma > 0) {
    for (int i = 0; i < cloud_size; ++i) {
      for (int c = 0; c < 3; ++c) {
        cloud.points(i, c) += spec.deformation.jitter_sigma * rng.normal();
      }
    }
  }

  quantize_f32(cloud);
  return cloud;
}

std::pair<DatasetManifest, DatasetManifest> make_toy_pair(const fs::path& root,
                                                          const ToyDomainSpec& source,
                                                          const ToyDomainSpec& target,
                                                          int per_class, int cloud_size) {
  source.validate();
  target.validate();
  if (per_class <= 0) throw ValidationError("make_toy_pair: per_class must be positive");
  if (source.classes != target.classes) {
    throw ValidationError("make_toy_pair: domains must share the class list");
  }
  if (source.name == target.name) {
    throw ValidationError("make_toy_pair: domains need distinct names");
  }

  const int test_per_class = (per_class + 3) / 4;
  auto build = [&](const ToyDomainSpec& spec) {
    DatasetManifest m;
    m.domain_name = spec.name;
    m.cloud_size = cloud_size;
    for (ToyClass c : spec.classes) m.classes.push_back(toy_class_name(c));
    for (const std::string split : {"train", "test"}) {
      const int n = split == std::string("train") ? per_class : test_per_class;
      std::vector<std::vector<std::string>> per_class_files(m.classes.size());
      for (std::size_t c = 0; c < m.classes.size(); ++c) {
        for (int i = 0; i < n; ++i) {
          PointCloud cloud =
              generate_toy_cloud(spec, static_cast<int>(c), i, split, cloud_size);
          char name[32];
          std::snprintf(name, sizeof(name), "%04d.npy", i);
          const std::string rel = split + "/" + m.classes[c] + "/" + name;
          write_cloud_npy(root / spec.name / rel, cloud);
          per_class_files[c].push_back(rel);
        }
      }
      m.splits[split] = std::move(per_class_files);
    }
    save_manifest(m, root / spec.name / "manifest.json");
    return m;
  };

  DatasetManifest ms = build(source);
  DatasetManifest mt = build(target);
  return {std::move(ms), std::move(mt)};
}

// ---- batches ---------------------------------------------------------------

BatchStream::BatchStream(int dataset_size, int batch_size, u64 seed, bool paired_z, int d_z)
    : size_(dataset_size), batch_size_(batch_size), seed_(seed), paired_z_(paired_z), d_z_(d_z) {
  if (batch_size_ <= 0) throw ValidationError("batch_iterator: batch_size must be positive");
  if (size_ <= 0) throw ValidationError("batch_iterator: empty dataset");
  if (paired_z_ && d_z_ <= 0) throw ValidationError("batch_iterator: paired_z needs d_z > 0");
  reshuffle();
}

int BatchStream::batches_per_epoch() const { return (size_ + batch_size_ - 1) / batch_size_; }

void BatchStream::reshuffle() {
  Rng rng(derive_seed(seed_, "shuffle", static_cast<u64>(epoch_)));
  order_ = rng.permutation(size_);
  cursor_ = 0;
}

Batch BatchStream::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    reshuffle();
  }
  Batch b;
  const std::size_t end = std::min(cursor_ + static_cast<std::size_t>(batch_size_), order_.size());
  b.indices.assign(order_.begin() + static_cast<long>(cursor_),
                   order_.begin() + static_cast<long>(end));
  cursor_ = end;
  if (paired_z_) {
    b.z.reserve(b.indices.size());
    for (std::size_t i = 0; i < b.indices.size(); ++i) {
      Rng rng(derive_seed(seed_, "z", z_counter_++));
      ModeVector z;
      z.values.resize(d_z_);
      for (int d = 0; d < d_z_; ++d) z.values(d) = rng.normal();
      b.z.push_back(std::move(z));
    }
  }
  return b;
}

// ---- PointDA-10 reference ----------------------------------------------------

const std::vector<std::string>& pointda_classes() {
  static const std::vector<std::string> classes = {"bathtub", "bed",     "bookshelf", "cabinet",
                                                   "chair",   "lamp",    "monitor",   "plant",
                                                   "sofa",    "table"};
  return classes;
}

const std::array<ReferenceDomain, 3>& pointda_reference() {
  static const std::array<ReferenceDomain, 3> ref = {{
      {"M",
       {106, 515, 572, 200, 889, 124, 465, 240, 680, 392},
       {50, 100, 100, 86, 100, 20, 100, 100, 100, 100}},
      {"S",
       {599, 167, 310, 1076, 4612, 1620, 762, 158, 2198, 5876},
       {85, 23, 50, 126, 662, 232, 112, 30, 330, 842}},
      {"S*",
       {98, 329, 464, 650, 2578, 161, 210, 88, 495, 1037},
       {26, 85, 146, 149, 801, 41, 61, 25, 134, 301}},
  }};
  return ref;
}

DatasetManifest reference_manifest(const std::string& key, int cloud_size) {
  for (const auto& dom : pointda_reference()) {
    if (dom.key != key) continue;
    DatasetManifest m;
    m.domain_name = key;
    m.cloud_size = cloud_size;
    m.classes = pointda_classes();
    auto fill = [&](const std::array<int, 10>& counts, const std::string& split) {
      std::vector<std::vector<std::string>> per_class(10);
      for (std::size_t c = 0; c < 10; ++c) {
        per_class[c].reserve(static_cast<std::size_t>(counts[c]));
        for (int i = 0; i < counts[c]; ++i) {
          char name[32];
          std::snprintf(name, sizeof(name), "%05d.npy", i);
          per_class[c].push_back(split + "/" + m.classes[c] + "/" + name);
        }
      }
      m.splits[split] = std::move(per_class);
    };
    fill(dom.train, "train");
    fill(dom.test, "test");
    return m;
  }
  throw ValidationError("unknown reference domain " + key + " (expected M, S or S*)");
}

}  // namespace pcda
