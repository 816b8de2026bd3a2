#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pcda/geometry.hpp"
#include "pcda/nets.hpp"

namespace pcda {

/// On-disk dataset description: ordered classes and per-class file lists per
/// split, all paths relative to the domain root.
struct DatasetManifest {
  std::string domain_name;
  int cloud_size = 0;
  std::vector<std::string> classes;
  // splits["train"][class_index] -> file list
  std::map<std::string, std::vector<std::vector<std::string>>> splits;

  int count(const std::string& split, int class_index) const;
  int total(const std::string& split) const;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

/// In-memory dataset: clouds per split, normalized and resampled to the
/// manifest cloud size, in lexicographic file order.
struct Dataset {
  DatasetManifest manifest;
  std::map<std::string, std::vector<PointCloud>> splits;

  const std::vector<PointCloud>& split(const std::string& name) const;
};

/// Loads every cloud listed by the manifest from `root`. Errors name the
/// offending path; listed-but-missing or unparsable files and count
/// mismatches are errors.
Dataset load_dataset(const std::filesystem::path& root, const DatasetManifest& manifest,
                     DomainTag tag, bool with_labels = true);

/// Raw cloud file IO (N x 3 little-endian float32 .npy). Writing quantizes
/// coordinates to float32; a written-then-loaded cloud is bit-identical.
void write_cloud_npy(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_cloud_npy(const std::filesystem::path& path);

/// Quantizes coordinates to float32 precision in place (the on-disk
/// precision).
void quantize_f32(PointCloud& cloud);

// ---- toy domain pair -------------------------------------------------------

enum class ToyClass { box, cylinder, sphere_cap, two_box };

std::string toy_class_name(ToyClass c);

struct ToyDeformation {
  double density_bias = 0.0;   // sampling probability ~ height^bias
  double part_dropout = 0.0;   // fraction of the bounding box removed as a slab
  double jitter_sigma = 0.0;   // per-coordinate Gaussian noise
};

struct ToyDomainSpec {
  std::string name;
  std::vector<ToyClass> classes = {ToyClass::box, ToyClass::cylinder, ToyClass::sphere_cap,
                                   ToyClass::two_box};
  ToyDeformation deformation;
  u64 seed = 0;

  void validate() const;
};

struct ToyCloudStats {
  int pool_size = 0;
  int survivors = 0;  // points left after slab dropout, before resampling
};

/// One toy cloud. Identical (spec.seed, class, split, index) with identical
/// deformation parameters yields identical output regardless of the domain
/// name, so a zero-gap pair is file-identical.
PointCloud generate_toy_cloud(const ToyDomainSpec& spec, int class_index, int instance_index,
                              const std::string& split, int cloud_size,
                              ToyCloudStats* stats = nullptr);

/// Materializes a source/target toy pair under root/<spec.name>/... with
/// per_class train clouds and ceil(per_class/4) test clouds per class.
std::pair<DatasetManifest, DatasetManifest> make_toy_pair(const std::filesystem::path& root,
                                                          const ToyDomainSpec& source,
                                                          const ToyDomainSpec& target,
                                                          int per_class, int cloud_size);

// ---- batches ---------------------------------------------------------------

struct Batch {
  std::vector<int> indices;
  std::vector<ModeVector> z;  // filled when paired_z
};

/// Seeded epoch shuffles, final short batch kept. A construction is a pure
/// function of (size, batch_size, seed, paired_z, d_z).
class BatchStream {
 public:
  BatchStream(int dataset_size, int batch_size, u64 seed, bool paired_z = false, int d_z = 0);

  Batch next();
  int epoch() const { return epoch_; }
  int batches_per_epoch() const;

 private:
  void reshuffle();

  int size_;
  int batch_size_;
  u64 seed_;
  bool paired_z_;
  int d_z_;
  int epoch_ = 0;
  std::size_t cursor_ = 0;
  u64 z_counter_ = 0;
  std::vector<int> order_;
};

// ---- PointDA-10 reference schema -------------------------------------------

struct ReferenceDomain {
  std::string key;  // "M", "S", "S*"
  std::array<int, 10> train;
  std::array<int, 10> test;
};

/// Class order shared by all three domains (confusion matrices follow it).
const std::vector<std::string>& pointda_classes();
const std::array<ReferenceDomain, 3>& pointda_reference();

/// Builds the expected manifest skeleton (counts only, no file lists) for one
/// of the reference domains.
DatasetManifest reference_manifest(const std::string& key, int cloud_size);

}  // namespace pcda
