#pragma once

#include <string>
#include <vector>

#include "tokenhier/color.hpp"
#include "tokenhier/numkernel.hpp"

namespace tokenhier {

struct EncoderConfig {
  int image_size = 64;
  int token_size = 16;
  int embed_dim = 64;
  int depth = 4;
  int num_heads = 4;
  double mlp_ratio = 4.0;
  double ln_eps = 1e-6;

  int grid() const { return image_size / token_size; }
  int num_patches() const { return grid() * grid(); }
  int seq_len() const { return num_patches() + 1; }
  int patch_dim() const { return token_size * token_size * 3; }
  int head_dim() const { return embed_dim / num_heads; }
  int hidden_dim() const { return static_cast<int>(embed_dim * mlp_ratio); }

  void validate() const;
  /// Stable digest of every field.
  std::string hash() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct BlockParams {
  Mat ln1_g, ln1_b;
  Mat qkv_w, qkv_b;    // D x 3D, 1 x 3D; columns [Q | K | V], heads contiguous
  Mat proj_w, proj_b;  // D x D
  Mat ln2_g, ln2_b;
  Mat fc1_w, fc1_b;  // D x H
  Mat fc2_w, fc2_b;  // H x D

  template <class Self, class F>
  static void visit_impl(Self& s, const std::string& prefix, F&& f) {
    f(prefix + "ln1_g", s.ln1_g);
    f(prefix + "ln1_b", s.ln1_b);
    f(prefix + "qkv_w", s.qkv_w);
    f(prefix + "qkv_b", s.qkv_b);
    f(prefix + "proj_w", s.proj_w);
    f(prefix + "proj_b", s.proj_b);
    f(prefix + "ln2_g", s.ln2_g);
    f(prefix + "ln2_b", s.ln2_b);
    f(prefix + "fc1_w", s.fc1_w);
    f(prefix + "fc1_b", s.fc1_b);
    f(prefix + "fc2_w", s.fc2_w);
    f(prefix + "fc2_b", s.fc2_b);
  }
};

/// Trainable state of the ViT: patch projection E, positional table E_pos,
/// class token, iBOT mask token, transformer blocks and the final norm.
struct EncoderParams {
  EncoderConfig config;
  Mat patch_w, patch_b;  // P x D, 1 x D
  Mat pos;               // (N + 1) x D
  Mat cls;               // 1 x D
  Mat mask_token;        // 1 x D
  std::vector<BlockParams> blocks;
  Mat norm_g, norm_b;

  /// Truncated normal (0.02) weights, zero biases, zero class token, unit gains.
  static EncoderParams init(const EncoderConfig& cfg, RngStream& rng);

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& s, F& f) {
    f("patch_w", s.patch_w);
    f("patch_b", s.patch_b);
    f("pos", s.pos);
    f("cls", s.cls);
    f("mask_token", s.mask_token);
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
      BlockParams::visit_impl(s.blocks[i], "blocks." + std::to_string(i) + ".", f);
    }
    f("norm_g", s.norm_g);
    f("norm_b", s.norm_b);
  }
};

/// Final hidden state Z_L split into class token and patch tokens.
struct TokenSequence {
  RowVec cls;   // D
  Mat patches;  // N x D
  std::string config_hash;

  Mat stacked() const;
};

struct BlockCache {
  Mat x_in;
  LayerNormCache ln1;
  Mat a;    // LN1 output
  Mat qkv;  // T x 3D
  std::vector<Mat> attn;
  Mat ctx;  // T x D
  Mat x_mid;
  LayerNormCache ln2;
  Mat m;  // LN2 output
  Mat h_pre;
  Mat h_act;
};

struct ForwardCache {
  Mat patches;  // N x P pixel rows
  std::vector<bool> mask;
  std::vector<BlockCache> blocks;
  LayerNormCache final_ln;
};

/// Pixel rows of the t x t patches in raster order; each row is
/// (py, px, channel)-major, scaled to [-1, 1].
Mat patchify(const Raster& r, const EncoderConfig& cfg);

/// Z_0 = [z_cls; E(x_1) .. E(x_N)] + E_pos. Masked positions use the mask token.
Mat tokenize(const Mat& patches, const EncoderParams& p, const std::vector<bool>& mask = {});
Mat tokenize(const Raster& r, const EncoderParams& p);

/// One pre-norm block: x + MHSA(LN1(x)), then + MLP(LN2(.)).
Mat block_forward(const Mat& x, const BlockParams& b, const EncoderConfig& cfg, BlockCache* cache = nullptr);
/// Returns dL/dx and accumulates parameter gradients into `grads`.
Mat block_backward(const Mat& dy, const BlockParams& b, const EncoderConfig& cfg, const BlockCache& cache,
                   BlockParams& grads);

/// Full forward returning the stacked (N + 1) x D output.
Mat encode(const Mat& patches, const EncoderParams& p, const std::vector<bool>& mask = {},
           ForwardCache* cache = nullptr);

TokenSequence forward(const Raster& r, const EncoderParams& p);
TokenSequence forward_masked(const Raster& r, const std::vector<bool>& mask, const EncoderParams& p);

/// Gradient of a scalar loss w.r.t. every encoder parameter, given dL/dZ_L.
EncoderParams encoder_backward(const Mat& dz, const EncoderParams& p, const ForwardCache& cache);

TokenSequence split_tokens(const Mat& z, const EncoderConfig& cfg);

}  // namespace tokenhier
