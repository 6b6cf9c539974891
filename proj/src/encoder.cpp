#include "tokenhier/encoder.hpp"

#include <cmath>
#include <sstream>

#include "tokenhier/params.hpp"

namespace tokenhier {

void EncoderConfig::validate() const {
  if (image_size <= 0 || token_size <= 0 || image_size % token_size != 0) {
    throw ConfigError("encoder: image_size must be a positive multiple of token_size");
  }
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0) {
    throw ConfigError("encoder: embed_dim must be divisible by num_heads");
  }
  if (depth < 0) throw ConfigError("encoder: depth must be >= 0");
  if (!(mlp_ratio > 0) || hidden_dim() < 1) throw ConfigError("encoder: mlp_ratio must be positive");
  if (!(ln_eps > 0)) throw ConfigError("encoder: ln_eps must be positive");
}

std::string EncoderConfig::hash() const {
  std::ostringstream s;
  s.precision(17);
  s << image_size << ',' << token_size << ',' << embed_dim << ',' << depth << ',' << num_heads << ','
    << mlp_ratio << ',' << ln_eps;
  const std::string text = s.str();
  return hex64(fnv1a64({reinterpret_cast<const unsigned char*>(text.data()), text.size()}));
}

EncoderParams EncoderParams::init(const EncoderConfig& cfg, RngStream& rng) {
  cfg.validate();
  const int d = cfg.embed_dim, h = cfg.hidden_dim();
  constexpr double sigma = 0.02;
  EncoderParams p;
  p.config = cfg;
  p.patch_w = trunc_normal(rng, cfg.patch_dim(), d, sigma);
  p.patch_b = Mat::Zero(1, d);
  p.pos = trunc_normal(rng, cfg.seq_len(), d, sigma);
  p.cls = Mat::Zero(1, d);
  p.mask_token = trunc_normal(rng, 1, d, sigma);
  for (int l = 0; l < cfg.depth; ++l) {
    BlockParams b;
    b.ln1_g = Mat::Ones(1, d);
    b.ln1_b = Mat::Zero(1, d);
    b.qkv_w = trunc_normal(rng, d, 3 * d, sigma);
    b.qkv_b = Mat::Zero(1, 3 * d);
    b.proj_w = trunc_normal(rng, d, d, sigma);
    b.proj_b = Mat::Zero(1, d);
    b.ln2_g = Mat::Ones(1, d);
    b.ln2_b = Mat::Zero(1, d);
    b.fc1_w = trunc_normal(rng, d, h, sigma);
    b.fc1_b = Mat::Zero(1, h);
    b.fc2_w = trunc_normal(rng, h, d, sigma);
    b.fc2_b = Mat::Zero(1, d);
    p.blocks.push_back(std::move(b));
  }
  p.norm_g = Mat::Ones(1, d);
  p.norm_b = Mat::Zero(1, d);
  return p;
}

Mat TokenSequence::stacked() const {
  Mat z(patches.rows() + 1, cls.size());
  z.row(0) = cls;
  z.bottomRows(patches.rows()) = patches;
  return z;
}

Mat patchify(const Raster& r, const EncoderConfig& cfg) {
  r.validate();
  if (r.width != cfg.image_size || r.height != cfg.image_size) {
    throw ShapeError("encoder: raster " + std::to_string(r.width) + "x" + std::to_string(r.height) +
                     " does not match image_size " + std::to_string(cfg.image_size));
  }
  const int t = cfg.token_size, g = cfg.grid();
  Mat out(cfg.num_patches(), cfg.patch_dim());
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      const int row = gy * g + gx;
      int col = 0;
      for (int py = 0; py < t; ++py) {
        for (int px = 0; px < t; ++px) {
          for (int c = 0; c < 3; ++c) {
            out(row, col++) = r.at(gx * t + px, gy * t + py, c) / 127.5 - 1.0;
          }
        }
      }
    }
  }
  return out;
}

namespace {

void check_mask(const std::vector<bool>& mask, int n) {
  if (!mask.empty() && static_cast<int>(mask.size()) != n) {
    throw ShapeError("encoder: mask of length " + std::to_string(mask.size()) + " for " +
                     std::to_string(n) + " patches");
  }
}

bool masked_at(const std::vector<bool>& mask, Eigen::Index i) {
  return !mask.empty() && mask[static_cast<std::size_t>(i)];
}

}  // namespace

Mat tokenize(const Mat& patches, const EncoderParams& p, const std::vector<bool>& mask) {
  const EncoderConfig& cfg = p.config;
  if (patches.rows() != cfg.num_patches() || patches.cols() != cfg.patch_dim()) {
    throw ShapeError("tokenize: patch matrix " + shape_str(patches.rows(), patches.cols()));
  }
  check_mask(mask, cfg.num_patches());
  Mat z(cfg.seq_len(), cfg.embed_dim);
  z.row(0) = p.cls;
  z.bottomRows(cfg.num_patches()) = matmul(patches, p.patch_w);
  for (Eigen::Index i = 0; i < patches.rows(); ++i) {
    if (masked_at(mask, i)) {
      z.row(i + 1) = p.mask_token;
    } else {
      z.row(i + 1) += p.patch_b;
    }
  }
  z += p.pos;
  return z;
}

Mat tokenize(const Raster& r, const EncoderParams& p) { return tokenize(patchify(r, p.config), p); }

Mat block_forward(const Mat& x, const BlockParams& b, const EncoderConfig& cfg, BlockCache* cache) {
  const int d = cfg.embed_dim, dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index t = x.rows();

  LayerNormCache ln1;
  Mat a = layer_norm(x, b.ln1_g, b.ln1_b, cfg.ln_eps, &ln1);
  Mat qkv = a * b.qkv_w;
  qkv.rowwise() += b.qkv_b.row(0);

  Mat ctx(t, d);
  std::vector<Mat> attn;
  attn.reserve(static_cast<std::size_t>(cfg.num_heads));
  for (int h = 0; h < cfg.num_heads; ++h) {
    const auto q = qkv.middleCols(h * dh, dh);
    const auto k = qkv.middleCols(d + h * dh, dh);
    const auto v = qkv.middleCols(2 * d + h * dh, dh);
    Mat weights = softmax_rows((q * k.transpose()) * scale);
    ctx.middleCols(h * dh, dh) = weights * v;
    attn.push_back(std::move(weights));
  }
  Mat x_mid = x + ctx * b.proj_w;
  x_mid.rowwise() += b.proj_b.row(0);

  LayerNormCache ln2;
  Mat m = layer_norm(x_mid, b.ln2_g, b.ln2_b, cfg.ln_eps, &ln2);
  Mat h_pre = m * b.fc1_w;
  h_pre.rowwise() += b.fc1_b.row(0);
  Mat h_act = h_pre.unaryExpr([](double v) { return gelu(v); });
  Mat y = x_mid + h_act * b.fc2_w;
  y.rowwise() += b.fc2_b.row(0);

  if (cache) {
    cache->x_in = x;
    cache->ln1 = std::move(ln1);
    cache->a = std::move(a);
    cache->qkv = std::move(qkv);
    cache->attn = std::move(attn);
    cache->ctx = std::move(ctx);
    cache->x_mid = std::move(x_mid);
    cache->ln2 = std::move(ln2);
    cache->m = std::move(m);
    cache->h_pre = std::move(h_pre);
    cache->h_act = std::move(h_act);
  }
  return y;
}

Mat block_backward(const Mat& dy, const BlockParams& b, const EncoderConfig& cfg, const BlockCache& c,
                   BlockParams& g) {
  const int d = cfg.embed_dim, dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // MLP branch.
  g.fc2_w += c.h_act.transpose() * dy;
  g.fc2_b += dy.colwise().sum();
  Mat dh_pre = dy * b.fc2_w.transpose();
  dh_pre.array() *= c.h_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
  g.fc1_w += c.m.transpose() * dh_pre;
  g.fc1_b += dh_pre.colwise().sum();
  const Mat dm = dh_pre * b.fc1_w.transpose();
  LayerNormGrads ln2 = layer_norm_backward(dm, b.ln2_g, c.ln2);
  g.ln2_g += ln2.dgain;
  g.ln2_b += ln2.dbias;
  const Mat dx_mid = dy + ln2.dx;

  // Attention branch.
  g.proj_w += c.ctx.transpose() * dx_mid;
  g.proj_b += dx_mid.colwise().sum();
  const Mat dctx = dx_mid * b.proj_w.transpose();
  Mat dqkv(c.qkv.rows(), c.qkv.cols());
  for (int h = 0; h < cfg.num_heads; ++h) {
    const auto q = c.qkv.middleCols(h * dh, dh);
    const auto k = c.qkv.middleCols(d + h * dh, dh);
    const auto v = c.qkv.middleCols(2 * d + h * dh, dh);
    const Mat& w = c.attn[static_cast<std::size_t>(h)];
    const auto dc = dctx.middleCols(h * dh, dh);
    const Mat dw = dc * v.transpose();
    dqkv.middleCols(2 * d + h * dh, dh) = w.transpose() * dc;
    Mat ds = w.cwiseProduct(dw);
    const Vec row_dot = ds.rowwise().sum();
    ds -= w.cwiseProduct(row_dot.replicate(1, w.cols()));
    ds *= scale;
    dqkv.middleCols(h * dh, dh) = ds * k;
    dqkv.middleCols(d + h * dh, dh) = ds.transpose() * q;
  }
  g.qkv_w += c.a.transpose() * dqkv;
  g.qkv_b += dqkv.colwise().sum();
  const Mat da = dqkv * b.qkv_w.transpose();
  LayerNormGrads ln1 = layer_norm_backward(da, b.ln1_g, c.ln1);
  g.ln1_g += ln1.dgain;
  g.ln1_b += ln1.dbias;
  return dx_mid + ln1.dx;
}

Mat encode(const Mat& patches, const EncoderParams& p, const std::vector<bool>& mask, ForwardCache* cache) {
  Mat x = tokenize(patches, p, mask);
  require_finite(x, "encoder tokenization");
  if (cache) {
    cache->patches = patches;
    cache->mask = mask;
    cache->blocks.assign(p.blocks.size(), {});
  }
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    x = block_forward(x, p.blocks[l], p.config, cache ? &cache->blocks[l] : nullptr);
    require_finite(x, "encoder layer " + std::to_string(l));
  }
  return layer_norm(x, p.norm_g, p.norm_b, p.config.ln_eps, cache ? &cache->final_ln : nullptr);
}

TokenSequence split_tokens(const Mat& z, const EncoderConfig& cfg) {
  TokenSequence s;
  s.cls = z.row(0);
  s.patches = z.bottomRows(z.rows() - 1);
  s.config_hash = cfg.hash();
  return s;
}

TokenSequence forward(const Raster& r, const EncoderParams& p) {
  return split_tokens(encode(patchify(r, p.config), p), p.config);
}

TokenSequence forward_masked(const Raster& r, const std::vector<bool>& mask, const EncoderParams& p) {
  if (static_cast<int>(mask.size()) != p.config.num_patches()) {
    throw ShapeError("forward_masked: mask of length " + std::to_string(mask.size()) + " for " +
                     std::to_string(p.config.num_patches()) + " patches");
  }
  return split_tokens(encode(patchify(r, p.config), p, mask), p.config);
}

EncoderParams encoder_backward(const Mat& dz, const EncoderParams& p, const ForwardCache& c) {
  EncoderParams g = zeros_like(p);
  LayerNormGrads fin = layer_norm_backward(dz, p.norm_g, c.final_ln);
  g.norm_g = fin.dgain;
  g.norm_b = fin.dbias;
  Mat dx = std::move(fin.dx);
  for (std::size_t l = p.blocks.size(); l-- > 0;) {
    dx = block_backward(dx, p.blocks[l], p.config, c.blocks[l], g.blocks[l]);
  }
  g.pos = dx;
  g.cls = dx.row(0);
  Mat visible = dx.bottomRows(c.patches.rows());
  for (Eigen::Index i = 0; i < c.patches.rows(); ++i) {
    if (masked_at(c.mask, i)) {
      g.mask_token += visible.row(i);
      visible.row(i).setZero();
    }
  }
  g.patch_b = visible.colwise().sum();
  g.patch_w.noalias() = c.patches.transpose() * visible;
  return g;
}

}  // namespace tokenhier
