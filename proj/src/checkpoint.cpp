#include "tokenhier/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tokenhier/params.hpp"

namespace tokenhier {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "tokenhier-checkpoint";

void put_le(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

const Mat& CheckpointFile::get(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return tensors[i];
  }
  throw ConfigError("checkpoint: missing tensor '" + name + "'");
}

bool CheckpointFile::has(const std::string& name) const {
  return std::find(names.begin(), names.end(), name) != names.end();
}

std::string encode_checkpoint(const CheckpointFile& ck) {
  json shapes = json::array();
  for (std::size_t i = 0; i < ck.names.size(); ++i) {
    shapes.push_back({{"name", ck.names[i]}, {"rows", ck.tensors[i].rows()}, {"cols", ck.tensors[i].cols()}});
  }
  const json header = {{"format", kFormat},
                       {"version", kCheckpointVersion},
                       {"kind", ck.kind},
                       {"meta", ck.meta},
                       {"tensors", shapes}};
  std::string out = header.dump() + "\n";
  for (const Mat& m : ck.tensors) {
    for (Eigen::Index i = 0; i < m.size(); ++i) put_le(out, m.data()[i]);
  }
  return out;
}

CheckpointFile decode_checkpoint(const std::string& bytes) {
  const std::size_t nl = bytes.find('\n');
  if (nl == std::string::npos) throw ConfigError("checkpoint: missing header");
  json header;
  try {
    header = json::parse(bytes.substr(0, nl));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint: bad header: ") + e.what());
  }
  if (header.value("format", "") != kFormat) throw ConfigError("checkpoint: not a tokenhier checkpoint");
  if (header.value("version", 0) != kCheckpointVersion) {
    throw ConfigError("checkpoint: unsupported version " + header["version"].dump());
  }
  CheckpointFile ck;
  ck.kind = header.at("kind").get<std::string>();
  ck.meta = header.at("meta");
  std::size_t pos = nl + 1;
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    const std::size_t need = static_cast<std::size_t>(rows * cols) * 8;
    if (bytes.size() - pos < need) throw ConfigError("checkpoint: truncated tensor data");
    Mat m(rows, cols);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get_le(p + 8 * i);
    pos += need;
    ck.names.push_back(t.at("name").get<std::string>());
    ck.tensors.push_back(std::move(m));
  }
  if (pos != bytes.size()) throw ConfigError("checkpoint: trailing bytes after tensor data");
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

json encoder_config_to_json(const EncoderConfig& c) {
  return {{"image_size", c.image_size}, {"token_size", c.token_size}, {"embed_dim", c.embed_dim},
          {"depth", c.depth},           {"num_heads", c.num_heads},   {"mlp_ratio", c.mlp_ratio},
          {"ln_eps", c.ln_eps}};
}

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.token_size = j.value("token_size", c.token_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.depth = j.value("depth", c.depth);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
  c.validate();
  return c;
}

CheckpointFile encoder_checkpoint(const EncoderParams& p) {
  CheckpointFile ck;
  ck.kind = "encoder";
  ck.meta["encoder"] = encoder_config_to_json(p.config);
  append_params(ck, "", p);
  return ck;
}

EncoderParams encoder_from_checkpoint(const CheckpointFile& ck) {
  std::string prefix;
  if (ck.kind == "ssl") {
    prefix = "teacher.encoder.";
  } else if (ck.kind != "encoder") {
    throw ConfigError("checkpoint of kind '" + ck.kind + "' holds no encoder");
  }
  const EncoderConfig cfg = encoder_config_from_json(ck.meta.at("encoder"));
  RngStream rng(0, 0);
  EncoderParams p = EncoderParams::init(cfg, rng);
  load_params(ck, prefix, p);
  return p;
}

}  // namespace tokenhier
