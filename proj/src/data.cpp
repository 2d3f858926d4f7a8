#include "iip/data.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "iip/binio.hpp"

namespace iip::data {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::vector<ShapePair> default_shape_pairs() {
  using K = sim::ShapeKind;
  const K all[4] = {K::disc, K::square, K::tallbox, K::wedge};
  std::vector<ShapePair> pairs;
  for (int i = 0; i < 4; ++i)
    for (int j = i; j < 4; ++j) pairs.emplace_back(all[i], all[j]);
  return pairs;
}

DatasetConfig desk_config() {
  DatasetConfig c;
  c.shape_pairs = default_shape_pairs();
  c.heldout_pairs = {c.shape_pairs[c.shape_pairs.size() - 2], c.shape_pairs.back()};
  return c;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::param_test: return "param_test";
    case Split::shape_test: return "shape_test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "param_test") return Split::param_test;
  if (name == "shape_test") return Split::shape_test;
  throw DataError("unknown split tag: " + name);
}

uint64_t variation_seed(uint64_t master_seed, int pair_index, int variation_index, int retry) {
  // splitmix64 over the packed identity
  uint64_t x = master_seed;
  for (uint64_t k : {static_cast<uint64_t>(pair_index) + 1, static_cast<uint64_t>(variation_index) + 1,
                     static_cast<uint64_t>(retry)}) {
    x += 0x9e3779b97f4a7c15ull * (k + 1);
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    x ^= x >> 31;
  }
  return x;
}

DatasetManifest enumerate_records(const DatasetConfig& config) {
  if (config.shape_pairs.empty()) throw DataError("config declares no shape pairs");
  DatasetManifest m;
  m.config = config;
  int64_t id = 0;
  for (int pi = 0; pi < static_cast<int>(config.shape_pairs.size()); ++pi) {
    for (int var = 0; var < config.variation_count; ++var) {
      const uint64_t seed = variation_seed(config.master_seed, pi, var);
      for (int ms = 1; ms <= 5; ++ms)
        for (int ss = 1; ss <= 5; ++ss)
          for (int fsc = 1; fsc <= 5; ++fsc) {
            SequenceRecord r;
            r.id = id;
            r.pair_index = pi;
            r.mass_scale = ms;
            r.speed_scale = ss;
            r.friction_scale = fsc;
            r.variation_index = var;
            r.variation_seed = seed;
            r.path = "seq/" + std::to_string(id) + ".iiseq";
            m.records.push_back(std::move(r));
            ++id;
          }
    }
  }
  return m;
}

namespace {
int heldout_index(const DatasetConfig& c, int pair_index) {
  const ShapePair& p = c.shape_pairs.at(static_cast<size_t>(pair_index));
  for (size_t i = 0; i < c.heldout_pairs.size(); ++i)
    if (c.heldout_pairs[i] == p) return static_cast<int>(i);
  return -1;
}
}  // namespace

void assign_splits(DatasetManifest& manifest) {
  const DatasetConfig& c = manifest.config;
  if (c.shape_pairs.size() < 3) throw DataError("split requires at least 3 shape pairs");
  if (c.heldout_pairs.size() != 2) throw DataError("split requires exactly 2 held-out pairs");
  for (const ShapePair& h : c.heldout_pairs) {
    bool found = false;
    for (const ShapePair& p : c.shape_pairs) found = found || p == h;
    if (!found) throw DataError("held-out pair is not in the shape pair list");
  }
  for (SequenceRecord& r : manifest.records) {
    if (heldout_index(c, r.pair_index) >= 0) r.split = Split::shape_test;
    else if (r.mass_scale == 3 && r.speed_scale == 3 && r.friction_scale == 3)
      r.split = Split::param_test;
    else r.split = Split::train;
  }
}

sim::SceneSpec scene_for_record(const DatasetConfig& config, const SequenceRecord& rec) {
  const ShapePair& pair = config.shape_pairs.at(static_cast<size_t>(rec.pair_index));
  sim::SceneSpec spec;
  spec.mover.shape = pair.first;
  spec.mover.size = config.body_size;
  spec.mover.mass = config.mover_mass;
  spec.target.shape = pair.second;
  spec.target.size = config.body_size;
  spec.mass_scale = rec.mass_scale;
  spec.speed_scale = rec.speed_scale;
  spec.friction_scale = rec.friction_scale;
  spec.variation_seed = rec.variation_seed;
  spec.frame_interval = config.frame_interval;
  spec.substeps = config.substeps;
  spec.target_x = config.target_x;
  return spec;
}

// ------------------------------------------------------------ sequence file

namespace {
constexpr char kSeqMagic[8] = {'I', 'I', 'P', 'S', 'E', 'Q', '1', '\0'};
constexpr uint32_t kSeqVersion = 1;
}  // namespace

void store_sequence(const sim::Sequence& seq, const std::string& path) {
  if (seq.frames.empty()) throw DataError("store_sequence: no frames");
  const sim::Frame& f0 = seq.frames.front();
  io::ByteWriter w;
  w.raw(kSeqMagic, 8);
  w.u32(kSeqVersion);
  w.u32(static_cast<uint32_t>(f0.height));
  w.u32(static_cast<uint32_t>(f0.width));
  w.u32(static_cast<uint32_t>(f0.channels));
  w.u32(static_cast<uint32_t>(seq.frames.size()));
  const bool has_flows = !seq.gt_flows.empty();
  w.u8(has_flows ? 1 : 0);
  const size_t payload_start = w.buf.size();
  for (const sim::Frame& f : seq.frames) {
    if (f.height != f0.height || f.width != f0.width || f.channels != f0.channels)
      throw DataError("store_sequence: inconsistent frame shapes");
    for (float x : f.pixels) w.f32(x);
  }
  if (has_flows) {
    if (seq.gt_flows.size() != seq.frames.size() - 1)
      throw DataError("store_sequence: flow count must be frame count - 1");
    for (const sim::FlowField& fl : seq.gt_flows) {
      if (fl.height != f0.height || fl.width != f0.width)
        throw DataError("store_sequence: inconsistent flow shapes");
      for (float x : fl.d) w.f32(x);
    }
  }
  w.u64(io::fnv1a(w.buf.data() + payload_start, w.buf.size() - payload_start));
  io::write_file(path, w.buf);
}

sim::Sequence load_sequence(const std::string& path) {
  const std::vector<uint8_t> bytes = io::read_file(path);
  io::ByteReader r(bytes.data(), bytes.size());
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kSeqMagic, 8) != 0) throw io::FormatError("bad sequence magic in " + path);
  if (r.u32() != kSeqVersion) throw io::FormatError("unsupported sequence version in " + path);
  const uint32_t h = r.u32(), w = r.u32(), c = r.u32();
  const uint32_t frame_count = r.u32();
  if (frame_count != 5)
    throw io::FormatError("sequence declares " + std::to_string(frame_count) + " frames, expected 5");
  if (h == 0 || w == 0 || c == 0 || h > 4096 || w > 4096 || c > 8)
    throw io::FormatError("implausible sequence dimensions in " + path);
  const bool has_flows = r.u8() != 0;

  const size_t payload_start = r.offset();
  const size_t frame_bytes = static_cast<size_t>(h) * w * c * 4;
  const size_t flow_bytes = has_flows ? static_cast<size_t>(h) * w * 2 * 4 * (frame_count - 1) : 0;
  const size_t payload = frame_bytes * frame_count + flow_bytes;
  if (bytes.size() != payload_start + payload + 8)
    throw io::FormatError("truncated or oversized sequence payload in " + path + " at offset " +
                          std::to_string(bytes.size()));
  const uint64_t want = io::fnv1a(bytes.data() + payload_start, payload);
  io::ByteReader tail(bytes.data() + payload_start + payload, 8);
  if (tail.u64() != want)
    throw io::FormatError("sequence checksum mismatch in " + path + " at offset " +
                          std::to_string(payload_start + payload));

  sim::Sequence seq;
  for (uint32_t f = 0; f < frame_count; ++f) {
    sim::Frame fr;
    fr.height = static_cast<int>(h);
    fr.width = static_cast<int>(w);
    fr.channels = static_cast<int>(c);
    fr.pixels.resize(static_cast<size_t>(h) * w * c);
    for (float& x : fr.pixels) x = r.f32();
    seq.frames.push_back(std::move(fr));
  }
  if (has_flows) {
    for (uint32_t f = 0; f + 1 < frame_count; ++f) {
      sim::FlowField fl;
      fl.height = static_cast<int>(h);
      fl.width = static_cast<int>(w);
      fl.d.resize(static_cast<size_t>(h) * w * 2);
      for (float& x : fl.d) x = r.f32();
      seq.gt_flows.push_back(std::move(fl));
    }
  }
  seq.contact_frame_index = 2;
  return seq;
}

sim::Sequence load_record(const DatasetManifest& manifest, const SequenceRecord& rec) {
  if (manifest.root_dir.empty()) throw DataError("manifest has no backing directory");
  sim::Sequence seq = load_sequence(manifest.root_dir + "/" + rec.path);
  seq.spec = scene_for_record(manifest.config, rec);
  return seq;
}

// ---------------------------------------------------------------- manifest

namespace {

ordered_json pairs_json(const std::vector<ShapePair>& pairs) {
  ordered_json arr = ordered_json::array();
  for (const ShapePair& p : pairs)
    arr.push_back({sim::shape_name(p.first), sim::shape_name(p.second)});
  return arr;
}

std::vector<ShapePair> pairs_from_json(const ordered_json& arr) {
  std::vector<ShapePair> pairs;
  for (const auto& e : arr)
    pairs.emplace_back(sim::shape_from_name(e.at(0).get<std::string>()),
                       sim::shape_from_name(e.at(1).get<std::string>()));
  return pairs;
}

}  // namespace

void save_manifest(const DatasetManifest& manifest, const std::string& dir) {
  const DatasetConfig& c = manifest.config;
  ordered_json h;
  h["magic"] = "iip-dataset";
  h["version"] = 1;
  h["master_seed"] = c.master_seed;
  h["render"] = {{"width", c.render.width},
                 {"height", c.render.height},
                 {"channels", c.render.channels},
                 {"world_width", c.render.world_width},
                 {"world_cx", c.render.world_cx},
                 {"floor_frac", c.render.floor_frac},
                 {"supersample", c.render.supersample}};
  ordered_json grids;
  for (Property p : {Property::mass, Property::speed, Property::friction}) {
    ordered_json desk = ordered_json::array(), paper = ordered_json::array();
    for (int s = 1; s <= 5; ++s) {
      desk.push_back(sim::scale_to_value(p, s));
      paper.push_back(sim::paper_grid_value(p, s));
    }
    grids[sim::property_name(p)] = {{"desk", desk}, {"paper", paper}};
  }
  h["grids"] = grids;
  h["shape_pairs"] = pairs_json(c.shape_pairs);
  h["heldout_pairs"] = pairs_json(c.heldout_pairs);
  h["variation_count"] = c.variation_count;
  h["frame_interval"] = c.frame_interval;
  h["substeps"] = c.substeps;
  h["body_size"] = c.body_size;
  h["mover_mass"] = c.mover_mass;
  h["target_x"] = c.target_x;
  h["store_flows"] = c.store_flows;
  h["record_count"] = manifest.records.size();
  h["retries"] = manifest.retry_count;
  int64_t ntrain = 0, nparam = 0, nshape = 0;
  for (const SequenceRecord& r : manifest.records) {
    if (r.split == Split::train) ++ntrain;
    else if (r.split == Split::param_test) ++nparam;
    else ++nshape;
  }
  h["splits"] = {{"train", ntrain}, {"param_test", nparam}, {"shape_test", nshape}};
  io::write_file(dir + "/manifest.header.json", h.dump(2) + "\n");

  std::ostringstream lines;
  for (const SequenceRecord& r : manifest.records) {
    ordered_json j;
    j["id"] = r.id;
    j["pair"] = r.pair_index;
    j["mass"] = r.mass_scale;
    j["speed"] = r.speed_scale;
    j["friction"] = r.friction_scale;
    j["variation"] = r.variation_index;
    j["seed"] = r.variation_seed;
    j["path"] = r.path;
    j["split"] = split_name(r.split);
    lines << j.dump() << "\n";
  }
  io::write_file(dir + "/manifest.jsonl", lines.str());
}

DatasetManifest load_manifest(const std::string& dir) {
  std::ifstream hf(dir + "/manifest.header.json");
  if (!hf) throw DataError("missing manifest.header.json in " + dir);
  ordered_json h = ordered_json::parse(hf);
  if (h.at("magic").get<std::string>() != "iip-dataset")
    throw io::FormatError("bad manifest magic in " + dir);

  DatasetManifest m;
  DatasetConfig& c = m.config;
  c.master_seed = h.at("master_seed").get<uint64_t>();
  const ordered_json& r = h.at("render");
  c.render.width = r.at("width").get<int>();
  c.render.height = r.at("height").get<int>();
  c.render.channels = r.at("channels").get<int>();
  c.render.world_width = r.at("world_width").get<double>();
  c.render.world_cx = r.at("world_cx").get<double>();
  c.render.floor_frac = r.at("floor_frac").get<double>();
  c.render.supersample = r.at("supersample").get<int>();
  c.shape_pairs = pairs_from_json(h.at("shape_pairs"));
  c.heldout_pairs = pairs_from_json(h.at("heldout_pairs"));
  c.variation_count = h.at("variation_count").get<int>();
  c.frame_interval = h.at("frame_interval").get<double>();
  c.substeps = h.at("substeps").get<int>();
  c.body_size = h.at("body_size").get<double>();
  c.mover_mass = h.at("mover_mass").get<double>();
  c.target_x = h.at("target_x").get<double>();
  c.store_flows = h.at("store_flows").get<bool>();
  m.retry_count = h.at("retries").get<int64_t>();
  m.root_dir = dir;

  std::ifstream lf(dir + "/manifest.jsonl");
  if (!lf) throw DataError("missing manifest.jsonl in " + dir);
  std::string line;
  while (std::getline(lf, line)) {
    if (line.empty()) continue;
    ordered_json j = ordered_json::parse(line);
    SequenceRecord rec;
    rec.id = j.at("id").get<int64_t>();
    rec.pair_index = j.at("pair").get<int>();
    rec.mass_scale = j.at("mass").get<int>();
    rec.speed_scale = j.at("speed").get<int>();
    rec.friction_scale = j.at("friction").get<int>();
    rec.variation_index = j.at("variation").get<int>();
    rec.variation_seed = j.at("seed").get<uint64_t>();
    rec.path = j.at("path").get<std::string>();
    rec.split = split_from_name(j.at("split").get<std::string>());
    m.records.push_back(std::move(rec));
  }
  const size_t expect = h.at("record_count").get<size_t>();
  if (m.records.size() != expect)
    throw io::FormatError("manifest record count mismatch: header says " + std::to_string(expect) +
                          ", found " + std::to_string(m.records.size()));
  return m;
}

DatasetManifest generate_grid(const DatasetConfig& config, const std::string& out_dir,
                              int threads) {
  DatasetManifest manifest = enumerate_records(config);
  assign_splits(manifest);
  manifest.root_dir = out_dir;
  fs::create_directories(fs::path(out_dir) / "seq");

  std::atomic<int64_t> next{0};
  std::atomic<int64_t> retries{0};
  std::atomic<bool> failed{false};
  std::string fail_msg;
  std::mutex fail_mu;

  auto worker = [&]() {
    while (true) {
      const int64_t i = next.fetch_add(1);
      if (i >= static_cast<int64_t>(manifest.records.size()) || failed.load()) return;
      SequenceRecord& rec = manifest.records[static_cast<size_t>(i)];
      try {
        sim::Sequence seq;
        bool done = false;
        for (int retry = 0; retry < 8 && !done; ++retry) {
          rec.variation_seed =
              variation_seed(config.master_seed, rec.pair_index, rec.variation_index, retry);
          try {
            seq = sim::simulate(scene_for_record(config, rec), config.render);
            done = true;
          } catch (const sim::LayoutError&) {
            retries.fetch_add(1);
          }
        }
        if (!done)
          throw DataError("record " + std::to_string(rec.id) +
                          ": layout search failed after retries");
        if (!config.store_flows) seq.gt_flows.clear();
        store_sequence(seq, out_dir + "/" + rec.path);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lk(fail_mu);
        failed.store(true);
        fail_msg = e.what();
      }
    }
  };

  const int n = std::max(1, threads);
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (failed.load()) throw DataError("generation failed: " + fail_msg);
  // variation_seed retries are per-record; count them for the header
  manifest.retry_count = retries.load();
  save_manifest(manifest, out_dir);
  return manifest;
}

bool dataset_up_to_date(const DatasetConfig& config, const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.header.json")) return false;
  DatasetManifest existing;
  try {
    existing = load_manifest(dir);
  } catch (const std::exception&) {
    return false;
  }
  DatasetManifest want = enumerate_records(config);
  assign_splits(want);
  if (existing.records.size() != want.records.size()) return false;
  if (existing.config.master_seed != config.master_seed) return false;
  if (existing.config.render.width != config.render.width ||
      existing.config.render.height != config.render.height)
    return false;
  for (const SequenceRecord& r : existing.records) {
    try {
      load_sequence(dir + "/" + r.path);  // verifies checksum and shape
    } catch (const std::exception&) {
      return false;
    }
  }
  return true;
}

// -------------------------------------------------------------- mini-batch

namespace {

std::vector<BatchContext> contexts_impl(const DatasetManifest& manifest, Property p,
                                        const Split* split) {
  // key: (pair, variation, fixed scales); the varying property's slot is 0
  std::map<std::array<int, 5>, BatchContext> groups;
  for (const SequenceRecord& r : manifest.records) {
    if (split && r.split != *split) continue;
    int varying = 0;
    std::array<int, 3> scales{r.mass_scale, r.speed_scale, r.friction_scale};
    switch (p) {
      case Property::mass: varying = scales[0]; scales[0] = 0; break;
      case Property::speed: varying = scales[1]; scales[1] = 0; break;
      case Property::friction: varying = scales[2]; scales[2] = 0; break;
    }
    const std::array<int, 5> key{r.pair_index, r.variation_index, scales[0], scales[1], scales[2]};
    BatchContext& ctx = groups[key];
    ctx.pair_index = r.pair_index;
    ctx.variation_index = r.variation_index;
    ctx.fixed_scales = scales;
    ctx.member_ids[static_cast<size_t>(varying - 1)] = r.id + 1;  // 0 = missing
  }
  std::vector<BatchContext> out;
  for (auto& [key, ctx] : groups) {
    bool full = true;
    for (int64_t& id : ctx.member_ids) {
      if (id == 0) {
        full = false;
        break;
      }
      --id;  // shift back to the real record id
    }
    if (full) out.push_back(ctx);
  }
  return out;
}

}  // namespace

std::vector<BatchContext> complete_contexts(const DatasetManifest& manifest, Property p,
                                            Split split) {
  return contexts_impl(manifest, p, &split);
}

std::vector<BatchContext> complete_contexts_all(const DatasetManifest& manifest, Property p) {
  return contexts_impl(manifest, p, nullptr);
}

const sim::Sequence& DatasetReader::sequence(int64_t id) {
  auto it = cache_.find(id);
  if (it != cache_.end()) return it->second;
  const SequenceRecord& rec = manifest_.records.at(static_cast<size_t>(id));
  if (rec.id != id) throw DataError("manifest ids are not dense");
  auto [pos, inserted] = cache_.emplace(id, load_record(manifest_, rec));
  return pos->second;
}

MiniBatch DatasetReader::load_batch(Property p, const BatchContext& ctx) {
  MiniBatch b;
  b.property = p;
  b.context = ctx;
  for (int64_t id : ctx.member_ids) b.sequences.push_back(sequence(id));
  return b;
}

const std::vector<BatchContext>& DatasetReader::contexts(Property p, Split split) {
  const std::pair<int, int> key{static_cast<int>(p), static_cast<int>(split)};
  auto it = ctx_cache_.find(key);
  if (it == ctx_cache_.end())
    it = ctx_cache_.emplace(key, complete_contexts(manifest_, p, split)).first;
  return it->second;
}

const std::vector<BatchContext>& DatasetReader::contexts_all(Property p) {
  const std::pair<int, int> key{static_cast<int>(p), 3};
  auto it = ctx_cache_.find(key);
  if (it == ctx_cache_.end())
    it = ctx_cache_.emplace(key, complete_contexts_all(manifest_, p)).first;
  return it->second;
}

MiniBatch DatasetReader::sample_minibatch(Property p, std::mt19937_64& rng, Split split) {
  const std::vector<BatchContext>& ctxs = contexts(p, split);
  if (ctxs.empty())
    throw DataError(std::string("no complete five-tuple covers property ") +
                    sim::property_name(p) + " in split " + split_name(split));
  std::uniform_int_distribution<size_t> d(0, ctxs.size() - 1);
  return load_batch(p, ctxs[d(rng)]);
}

}  // namespace iip::data
