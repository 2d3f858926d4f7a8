#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "iip/binio.hpp"
#include "iip/data.hpp"

using namespace iip::data;
using iip::sim::Property;
using iip::sim::ShapeKind;

namespace {

DatasetConfig tiny_config(int pairs = 3, int variations = 1) {
  DatasetConfig c = desk_config();
  c.shape_pairs.resize(static_cast<size_t>(pairs));
  c.heldout_pairs = {c.shape_pairs[c.shape_pairs.size() - 2], c.shape_pairs.back()};
  c.variation_count = variations;
  c.render.width = 16;
  c.render.height = 16;
  return c;
}

std::filesystem::path tmp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("enumerate: desk grid product counts") {
  DatasetConfig c = desk_config();  // 10 pairs
  c.variation_count = 3;
  const DatasetManifest m = enumerate_records(c);
  CHECK(m.records.size() == 125u * 3u * 10u);  // 3750
  // ids dense 0..N-1
  for (size_t i = 0; i < m.records.size(); ++i) CHECK(m.records[i].id == static_cast<int64_t>(i));
}

TEST_CASE("enumerate + split: source-paper-scale structure") {
  DatasetConfig c = desk_config();
  c.shape_pairs.push_back({ShapeKind::square, ShapeKind::disc});  // 11th combination
  c.heldout_pairs = {c.shape_pairs[9], c.shape_pairs[10]};
  c.variation_count = 15;
  DatasetManifest m = enumerate_records(c);
  CHECK(m.records.size() == 20625u);  // 125 * 15 * 11
  assign_splits(m);
  int64_t train = 0, param = 0, shape = 0;
  std::set<std::pair<int, std::array<int, 3>>> train_cells;
  for (const SequenceRecord& r : m.records) {
    if (r.split == Split::train) {
      ++train;
      train_cells.insert({r.pair_index, {r.mass_scale, r.speed_scale, r.friction_scale}});
    } else if (r.split == Split::param_test) {
      ++param;
      CHECK(r.mass_scale == 3);
      CHECK(r.speed_scale == 3);
      CHECK(r.friction_scale == 3);
    } else {
      ++shape;
    }
  }
  CHECK(param == 135);        // 15 variations x 9 training pairs
  CHECK(shape == 3750);       // 2 pairs x 125 x 15
  CHECK(train == 16740);
  CHECK(train_cells.size() == 124u * 9u);  // combinations per training pair
}

TEST_CASE("split: desk param_test count and partition") {
  DatasetConfig c = desk_config();
  c.variation_count = 3;
  DatasetManifest m = enumerate_records(c);
  assign_splits(m);
  int64_t param = 0;
  for (const SequenceRecord& r : m.records)
    if (r.split == Split::param_test) ++param;
  CHECK(param == 1 * 3 * 8);  // one cell, 3 variations, 8 training pairs

  // partition and leakage: every (pair, scales, variation) tuple has one tag
  std::set<std::array<int, 5>> seen;
  for (const SequenceRecord& r : m.records) {
    const std::array<int, 5> key{r.pair_index, r.mass_scale, r.speed_scale, r.friction_scale,
                                 r.variation_index};
    CHECK(seen.insert(key).second);
  }
  CHECK(seen.size() == m.records.size());
}

TEST_CASE("split: fewer than 3 shape pairs is a config error") {
  DatasetConfig c = desk_config();
  c.shape_pairs.resize(2);
  c.heldout_pairs = {c.shape_pairs[0], c.shape_pairs[1]};
  DatasetManifest m = enumerate_records(c);
  CHECK_THROWS_AS(assign_splits(m), DataError);
}

TEST_CASE("variation seeds are shared across all scales of a context") {
  DatasetConfig c = desk_config();
  c.variation_count = 2;
  const DatasetManifest m = enumerate_records(c);
  for (const SequenceRecord& r : m.records)
    CHECK(r.variation_seed == variation_seed(c.master_seed, r.pair_index, r.variation_index));
}

TEST_CASE("mini-batch contexts and sampling contracts") {
  DatasetConfig c = tiny_config();  // 3 pairs, 1 variation -> 1 training pair
  DatasetManifest m = enumerate_records(c);
  assign_splits(m);

  const auto ctxs = complete_contexts(m, Property::mass, Split::train);
  // 25 (speed,friction) combos minus the (3,3) column broken by param_test
  CHECK(ctxs.size() == 24u);
  for (const auto& ctx : ctxs) {
    CHECK(ctx.fixed_scales[0] == 0);  // mass varies
    for (int i = 0; i < 5; ++i) {
      const SequenceRecord& r = m.records.at(static_cast<size_t>(ctx.member_ids[static_cast<size_t>(i)]));
      CHECK(r.mass_scale == i + 1);  // ordered by the varying scale
      CHECK(r.speed_scale == ctx.fixed_scales[1]);
      CHECK(r.friction_scale == ctx.fixed_scales[2]);
      CHECK(r.pair_index == ctx.pair_index);
      CHECK(r.split == Split::train);
    }
  }

  // ignoring split tags restores the (3,3) column and the held-out pairs
  CHECK(complete_contexts_all(m, Property::mass).size() == 25u * 3u);
}

TEST_CASE("sampling visits every complete context within 1000 draws") {
  DatasetConfig c = tiny_config();
  DatasetManifest m = enumerate_records(c);
  assign_splits(m);
  const auto ctxs = complete_contexts(m, Property::speed, Split::train);
  REQUIRE(ctxs.size() == 24u);
  std::mt19937_64 rng(3);
  std::set<int> seen;
  std::uniform_int_distribution<size_t> d(0, ctxs.size() - 1);
  for (int i = 0; i < 1000; ++i) seen.insert(static_cast<int>(d(rng)));
  CHECK(seen.size() == ctxs.size());
}

TEST_CASE("generate_grid: files, determinism, retry-free, and up-to-date check") {
  DatasetConfig c = tiny_config();
  const auto dir_a = tmp_dir("iip_gen_a");
  const auto dir_b = tmp_dir("iip_gen_b");
  const DatasetManifest ma = generate_grid(c, dir_a.string());
  CHECK(ma.records.size() == 375u);
  CHECK(ma.retry_count == 0);

  const DatasetManifest mb = generate_grid(c, dir_b.string());
  CHECK(iip::io::read_file((dir_a / "manifest.header.json").string()) ==
        iip::io::read_file((dir_b / "manifest.header.json").string()));
  CHECK(iip::io::read_file((dir_a / "manifest.jsonl").string()) ==
        iip::io::read_file((dir_b / "manifest.jsonl").string()));
  for (int64_t id : {0, 77, 374})
    CHECK(iip::io::read_file((dir_a / ("seq/" + std::to_string(id) + ".iiseq")).string()) ==
          iip::io::read_file((dir_b / ("seq/" + std::to_string(id) + ".iiseq")).string()));

  CHECK(dataset_up_to_date(c, dir_a.string()));
  DatasetConfig other = c;
  other.master_seed += 1;
  CHECK_FALSE(dataset_up_to_date(other, dir_a.string()));

  // round-trip identity through the reader
  const DatasetManifest loaded = load_manifest(dir_a.string());
  REQUIRE(loaded.records.size() == ma.records.size());
  for (size_t i = 0; i < loaded.records.size(); ++i) {
    CHECK(loaded.records[i].variation_seed == ma.records[i].variation_seed);
    CHECK(loaded.records[i].split == ma.records[i].split);
  }
  const iip::sim::Sequence seq = load_record(loaded, loaded.records[7]);
  CHECK(seq.frames.size() == 5u);
  CHECK(seq.gt_flows.size() == 4u);
  CHECK(seq.contact_frame_index == 2);

  // store -> load -> store is byte-stable
  const std::string copy = (dir_a / "copy.iiseq").string();
  store_sequence(seq, copy);
  CHECK(iip::io::read_file(copy) ==
        iip::io::read_file((dir_a / loaded.records[7].path).string()));
}

TEST_CASE("sequence format: corruption and invariant violations are format errors") {
  DatasetConfig c = tiny_config();
  const auto dir = tmp_dir("iip_fmt");
  // build one real sequence file without generating the whole grid
  DatasetManifest m = enumerate_records(c);
  assign_splits(m);
  const iip::sim::Sequence seq = iip::sim::simulate(scene_for_record(c, m.records[0]), c.render);
  const std::string path = (dir / "s.iiseq").string();
  store_sequence(seq, path);

  const std::vector<uint8_t> good = iip::io::read_file(path);

  std::vector<uint8_t> trunc = good;
  trunc.pop_back();
  iip::io::write_file((dir / "t.iiseq").string(), trunc);
  CHECK_THROWS_AS(load_sequence((dir / "t.iiseq").string()), iip::io::FormatError);

  std::vector<uint8_t> flip = good;
  flip[flip.size() / 2] ^= 0x40;  // payload corruption
  iip::io::write_file((dir / "f.iiseq").string(), flip);
  CHECK_THROWS_AS(load_sequence((dir / "f.iiseq").string()), iip::io::FormatError);

  std::vector<uint8_t> badcount = good;
  badcount[20] = 7;  // frame_count field
  iip::io::write_file((dir / "c.iiseq").string(), badcount);
  CHECK_THROWS_AS(load_sequence((dir / "c.iiseq").string()), iip::io::FormatError);

  std::vector<uint8_t> badmagic = good;
  badmagic[0] = 'X';
  iip::io::write_file((dir / "m.iiseq").string(), badmagic);
  CHECK_THROWS_AS(load_sequence((dir / "m.iiseq").string()), iip::io::FormatError);
}

TEST_CASE("DatasetReader: uniform sampling and coverage errors") {
  DatasetConfig c = tiny_config();
  const auto dir = tmp_dir("iip_reader");
  generate_grid(c, dir.string());
  DatasetReader reader(load_manifest(dir.string()));

  std::mt19937_64 rng(11);
  const MiniBatch b = reader.sample_minibatch(Property::friction, rng);
  REQUIRE(b.sequences.size() == 5u);
  for (int i = 0; i < 5; ++i) {
    CHECK(b.sequences[static_cast<size_t>(i)].spec.friction_scale == i + 1);
    CHECK(b.sequences[static_cast<size_t>(i)].spec.mass_scale == b.context.fixed_scales[0]);
    CHECK(b.sequences[static_cast<size_t>(i)].spec.speed_scale == b.context.fixed_scales[1]);
    CHECK(b.sequences[static_cast<size_t>(i)].spec.variation_seed ==
          b.sequences[0].spec.variation_seed);
  }

  // param_test holds a single cell, so no complete five-tuple exists there
  CHECK_THROWS_AS(reader.sample_minibatch(Property::mass, rng, Split::param_test), DataError);
}
