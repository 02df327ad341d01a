#include "webrec/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "webrec/config.hpp"
#include "webrec/error.hpp"

namespace webrec {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

constexpr char kMagic[8] = {'W', 'R', 'C', 'K', 'P', 'T', '0', '1'};

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw DataError("checkpoint: cannot write " + path);
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void str32(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void section(const std::string& tag, const std::vector<ad::Variable>& vars) {
    str32(tag);
    u64(vars.size());
    for (const auto& v : vars) {
      u64(v.rows());
      u64(v.cols());
      bytes(v.value().data().data(), v.value().data().size() * sizeof(double));
    }
  }
  void close() {
    out_.flush();
    if (!out_) throw DataError("checkpoint: write failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw DataError("checkpoint: cannot read " + path);
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw DataError("checkpoint: " + path_ + " is truncated");
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str(std::uint64_t n, std::uint64_t limit) {
    if (n > limit) throw DataError("checkpoint: " + path_ + " has an implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  // Fills `vars` in order, checking every shape.
  void section(const std::string& tag, std::vector<ad::Variable> vars) {
    const auto count = u64();
    if (count != vars.size()) {
      throw DataError("checkpoint: section '" + tag + "' holds " + std::to_string(count) +
                      " matrices, config implies " + std::to_string(vars.size()));
    }
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const auto rows = u64(), cols = u64();
      if (rows != vars[i].rows() || cols != vars[i].cols()) {
        throw DataError("checkpoint: section '" + tag + "' matrix " + std::to_string(i) + " is " +
                        std::to_string(rows) + "x" + std::to_string(cols) + ", expected " +
                        vars[i].value().shape_string());
      }
      auto& data = vars[i].mutable_value().data();
      bytes(data.data(), data.size() * sizeof(double));
    }
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace

Transformer Checkpoint::transformer() const { return Transformer(config, backbone.clone()); }

void save_checkpoint(const std::string& path, const Transformer& model, const MPHeadParams* mp,
                     const TaskAdapter* adapter) {
  Writer w(path);
  w.bytes(kMagic, sizeof kMagic);
  const auto cfg = to_json(model.config()).dump();
  w.u64(cfg.size());
  w.bytes(cfg.data(), cfg.size());
  w.u32(1 + (mp ? 1 : 0) + (adapter ? 1 : 0));
  w.section("backbone", model.params().all());
  if (mp) w.section("mp_head", mp->all());
  if (adapter) w.section("adapter", {adapter->logit_bias});
  w.close();
}

Checkpoint load_checkpoint(const std::string& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw DataError("checkpoint: " + path + " does not start with WRCKPT01");
  }
  Checkpoint ck;
  const auto cfg_text = r.str(r.u64(), 1 << 20);
  try {
    ck.config = model_config_from_json(nlohmann::json::parse(cfg_text));
    ck.config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: config block is not valid JSON: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw DataError("checkpoint: config block rejected: " + std::string(e.what()));
  }
  // Initialization only fixes shapes; every value is overwritten below.
  Rng shapes(0);
  ck.backbone = BackboneParams::init(ck.config, shapes);
  const auto sections = r.u32();
  bool have_backbone = false;
  for (std::uint32_t s = 0; s < sections; ++s) {
    const auto tag = r.str(r.u32(), 64);
    if (tag == "backbone") {
      r.section(tag, ck.backbone.all());
      have_backbone = true;
    } else if (tag == "mp_head") {
      ck.mp = MPHeadParams::init(ck.config, shapes);
      r.section(tag, ck.mp->all());
    } else if (tag == "adapter") {
      ck.adapter = TaskAdapter::init(ck.config);
      r.section(tag, {ck.adapter->logit_bias});
    } else {
      throw DataError("checkpoint: unknown section '" + tag + "'");
    }
  }
  if (!have_backbone) throw DataError("checkpoint: " + path + " has no backbone section");
  if (!r.at_end()) throw DataError("checkpoint: trailing bytes in " + path);
  return ck;
}

}  // namespace webrec
