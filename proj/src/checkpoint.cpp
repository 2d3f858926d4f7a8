#include "iip/checkpoint.hpp"

#include "iip/binio.hpp"

namespace iip::grad {

namespace {
constexpr char kMagic[8] = {'I', 'I', 'P', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF64 = 0;
}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  io::ByteWriter w;
  w.raw(kMagic, 8);
  w.u32(kVersion);
  w.u64(ck.step);
  w.u32(static_cast<uint32_t>(ck.config_json.size()));
  w.raw(ck.config_json.data(), ck.config_json.size());
  w.u32(static_cast<uint32_t>(ck.params.count()));
  for (const Param& p : ck.params.params()) {
    w.u16(static_cast<uint16_t>(p.name.size()));
    w.raw(p.name.data(), p.name.size());
    w.u8(kDtypeF64);
    w.u8(static_cast<uint8_t>(p.value.rank()));
    for (int d : p.value.shape) w.u32(static_cast<uint32_t>(d));
    for (double x : p.value.v) w.f64(x);
  }
  for (const Param& p : ck.params.params())
    for (double x : p.m.v) w.f64(x);
  for (const Param& p : ck.params.params())
    for (double x : p.s.v) w.f64(x);
  w.u64(io::fnv1a(w.buf.data(), w.buf.size()));
  io::write_file(path, w.buf);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::vector<uint8_t> bytes = io::read_file(path);
  if (bytes.size() < 8 + 8 + 4 + 4 + 4)
    throw io::FormatError("checkpoint too short: " + path);
  const size_t body = bytes.size() - 8;
  io::ByteReader tail(bytes.data() + body, 8);
  if (tail.u64() != io::fnv1a(bytes.data(), body))
    throw io::FormatError("checkpoint checksum mismatch at offset " + std::to_string(body));

  io::ByteReader r(bytes.data(), body);
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw io::FormatError("bad checkpoint magic");
  if (r.u32() != kVersion) throw io::FormatError("unsupported checkpoint version");

  Checkpoint ck;
  ck.step = r.u64();
  const uint32_t cfg_len = r.u32();
  ck.config_json.resize(cfg_len);
  if (cfg_len) r.raw(ck.config_json.data(), cfg_len);
  const uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    const uint16_t name_len = r.u16();
    std::string name(name_len, '\0');
    if (name_len) r.raw(name.data(), name_len);
    if (r.u8() != kDtypeF64) throw io::FormatError("unsupported dtype in checkpoint");
    const uint8_t rank = r.u8();
    std::vector<int> shape(rank);
    for (uint8_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(r.u32());
    Tensor t(shape);
    for (double& x : t.v) x = r.f64();
    ck.params.add(name, std::move(t));
  }
  for (Param& p : ck.params.params())
    for (double& x : p.m.v) x = r.f64();
  for (Param& p : ck.params.params())
    for (double& x : p.s.v) x = r.f64();
  if (r.remaining() != 0) throw io::FormatError("trailing bytes in checkpoint");
  ck.params.step_count = ck.step;
  return ck;
}

}  // namespace iip::grad
