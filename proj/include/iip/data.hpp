#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "iip/sim.hpp"

namespace iip::data {

using sim::Property;

using ShapePair = std::pair<sim::ShapeKind, sim::ShapeKind>;  // (mover, target)

struct DatasetConfig {
  uint64_t master_seed = 1;
  sim::RenderConfig render;
  std::vector<ShapePair> shape_pairs;
  std::vector<ShapePair> heldout_pairs;  // exactly 2, members of shape_pairs
  int variation_count = 3;
  double frame_interval = 0.25;
  int substeps = 100;
  double body_size = 0.7;
  double mover_mass = 1.0;
  double target_x = 3.2;
  bool store_flows = true;
};

// the ten unordered pairs over {disc, square, tallbox, wedge}
std::vector<ShapePair> default_shape_pairs();
DatasetConfig desk_config();

enum class Split { train, param_test, shape_test };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct SequenceRecord {
  int64_t id = 0;
  int pair_index = 0;
  int mass_scale = 1, speed_scale = 1, friction_scale = 1;
  int variation_index = 0;
  uint64_t variation_seed = 0;
  std::string path;  // relative to the dataset root
  Split split = Split::train;
};

struct DatasetManifest {
  DatasetConfig config;
  std::vector<SequenceRecord> records;
  std::string root_dir;  // empty when enumerate-only
  int64_t retry_count = 0;
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

// deterministic per-record scene seed, independent of the property scales so
// every B^p five-tuple shares its variation draw
uint64_t variation_seed(uint64_t master_seed, int pair_index, int variation_index, int retry = 0);

// grid enumeration without simulation (125 x V x |pairs| records, ids dense)
DatasetManifest enumerate_records(const DatasetConfig& config);
// tags records: param_test = the (3,3,3) cell on training pairs, shape_test =
// all records of the held-out pairs, train = remainder
void assign_splits(DatasetManifest& manifest);

sim::SceneSpec scene_for_record(const DatasetConfig& config, const SequenceRecord& rec);

// full pipeline: enumerate, split, simulate every record, write files + manifest
DatasetManifest generate_grid(const DatasetConfig& config, const std::string& out_dir,
                              int threads = 1);

void save_manifest(const DatasetManifest& manifest, const std::string& dir);
DatasetManifest load_manifest(const std::string& dir);
// true when the on-disk dataset exists and all sequence checksums verify
bool dataset_up_to_date(const DatasetConfig& config, const std::string& dir);

// Sequence file IO ("IIPSEQ1\0"; see README). store/load round-trips bit-exactly.
void store_sequence(const sim::Sequence& seq, const std::string& path);
sim::Sequence load_sequence(const std::string& path);  // spec fields left default
sim::Sequence load_record(const DatasetManifest& manifest, const SequenceRecord& rec);

// B^p machinery ------------------------------------------------------------

struct BatchContext {
  int pair_index = 0;
  int variation_index = 0;
  std::array<int, 3> fixed_scales{};      // scale per property; varying one is 0
  std::array<int64_t, 5> member_ids{};    // record ids ordered by varying scale
};

// all train-split contexts with full scale-1..5 coverage for property p,
// in a deterministic order
std::vector<BatchContext> complete_contexts(const DatasetManifest& manifest, Property p,
                                            Split split = Split::train);
// full-coverage contexts regardless of split tags (the parameter-test
// protocols need mixed-split five-tuples)
std::vector<BatchContext> complete_contexts_all(const DatasetManifest& manifest, Property p);

struct MiniBatch {
  Property property = Property::mass;
  BatchContext context;
  std::vector<sim::Sequence> sequences;  // exactly 5, ordered by scale of p
};

// caches decoded sequences; reads are idempotent so shared use is safe
class DatasetReader {
 public:
  explicit DatasetReader(DatasetManifest manifest) : manifest_(std::move(manifest)) {}

  const DatasetManifest& manifest() const { return manifest_; }
  const sim::Sequence& sequence(int64_t id);
  MiniBatch load_batch(Property p, const BatchContext& ctx);
  // uniform over complete contexts; throws DataError naming the property when
  // no complete five-tuple exists
  MiniBatch sample_minibatch(Property p, std::mt19937_64& rng, Split split = Split::train);
  const std::vector<BatchContext>& contexts(Property p, Split split = Split::train);
  const std::vector<BatchContext>& contexts_all(Property p);

 private:
  DatasetManifest manifest_;
  std::map<int64_t, sim::Sequence> cache_;
  std::map<std::pair<int, int>, std::vector<BatchContext>> ctx_cache_;
};

}  // namespace iip::data
