#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokenhier/encoder.hpp"
#include "tokenhier/numkernel.hpp"

namespace tokenhier {

constexpr int kCheckpointVersion = 1;

/// Container shared by encoder, SSL and head checkpoints: one JSON header
/// line (format, version, kind, meta, tensor shapes) followed by the tensors
/// as little-endian float64 blobs in header order.
struct CheckpointFile {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::string> names;
  std::vector<Mat> tensors;

  const Mat& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

std::string encode_checkpoint(const CheckpointFile& ck);
CheckpointFile decode_checkpoint(const std::string& bytes);
void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& ck);
CheckpointFile read_checkpoint(const std::filesystem::path& path);

template <class P>
void append_params(CheckpointFile& ck, const std::string& prefix, const P& p) {
  p.visit([&](const std::string& name, const Mat& m) {
    ck.names.push_back(prefix + name);
    ck.tensors.push_back(m);
  });
}

/// Fills every tensor of `p` from `ck`; shapes must match exactly.
template <class P>
void load_params(const CheckpointFile& ck, const std::string& prefix, P& p) {
  p.visit([&](const std::string& name, Mat& m) {
    const Mat& src = ck.get(prefix + name);
    if (src.rows() != m.rows() || src.cols() != m.cols()) {
      throw ConfigError("checkpoint: tensor " + prefix + name + " has shape " +
                        shape_str(src.rows(), src.cols()) + ", expected " + shape_str(m.rows(), m.cols()));
    }
    m = src;
  });
}

nlohmann::json encoder_config_to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

/// Encoder-only checkpoint (kind "encoder").
CheckpointFile encoder_checkpoint(const EncoderParams& p);
/// Reads an encoder from kind "encoder" or from the teacher of kind "ssl".
EncoderParams encoder_from_checkpoint(const CheckpointFile& ck);

}  // namespace tokenhier
