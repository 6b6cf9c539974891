#include "tokenhier/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace tokenhier {

using nlohmann::json;

void SslConfig::validate() const {
  if (prototypes < 2) throw ConfigError("ssl: prototype_count must be >= 2");
  if (!(teacher_temp > 0) || !(student_temp > teacher_temp)) {
    throw ConfigError("ssl: temperatures must satisfy student_temp > teacher_temp > 0");
  }
  if (!(center_momentum > 0 && center_momentum < 1)) throw ConfigError("ssl: center_momentum must be in (0, 1)");
  if (!(ema_momentum > 0 && ema_momentum <= 1)) throw ConfigError("ssl: ema_momentum must be in (0, 1]");
  if (!(mask_fraction > 0 && mask_fraction < 1)) throw ConfigError("ssl: mask_fraction must be in (0, 1)");
  if (!(koleo_weight >= 0) || !(gram_weight >= 0)) throw ConfigError("ssl: term weights must be >= 0");
  if (!(lr >= 0)) throw ConfigError("ssl: lr must be >= 0");
  if (batch_size < 2) throw ConfigError("ssl: batch_size must be >= 2 (koleo needs two samples)");
  if (!(crop_min_scale > 0 && crop_min_scale <= 1)) throw ConfigError("ssl: crop_min_scale must be in (0, 1]");
  encoder.validate();
  stain.validate();
}

namespace {

json sigmas_to_json(const JitterSigmas& s) { return {{"mean", s.mean}, {"std_ratio", s.std_ratio}}; }

JitterSigmas sigmas_from_json(const json& j, JitterSigmas s) {
  if (j.contains("mean")) s.mean = j["mean"].get<std::array<double, 3>>();
  if (j.contains("std_ratio")) s.std_ratio = j["std_ratio"].get<std::array<double, 3>>();
  return s;
}

}  // namespace

json ssl_config_to_json(const SslConfig& c) {
  return {{"prototype_count", c.prototypes},
          {"student_temp", c.student_temp},
          {"teacher_temp", c.teacher_temp},
          {"center_momentum", c.center_momentum},
          {"ema_momentum", c.ema_momentum},
          {"mask_fraction", c.mask_fraction},
          {"koleo_weight", c.koleo_weight},
          {"gram_weight", c.gram_weight},
          {"gram_teacher_checkpoint", c.gram_teacher_checkpoint},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"stain_aug", c.stain_aug},
          {"flips", c.flips},
          {"crop_min_scale", c.crop_min_scale},
          {"seed", c.seed},
          {"encoder", encoder_config_to_json(c.encoder)},
          {"stain", {{"space", to_string(c.stain.space)},
                     {"lab", sigmas_to_json(c.stain.lab)},
                     {"hsv", sigmas_to_json(c.stain.hsv)}}}};
}

SslConfig ssl_config_from_json(const json& j) {
  static const std::set<std::string> known = {
      "prototype_count", "student_temp", "teacher_temp", "center_momentum", "ema_momentum",
      "mask_fraction",   "koleo_weight", "gram_weight",  "gram_teacher_checkpoint",
      "lr",              "batch_size",   "stain_aug",    "flips",
      "crop_min_scale",  "seed",         "encoder",      "stain"};
  if (!j.is_object()) throw ConfigError("ssl config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ConfigError("ssl config: unknown field '" + k + "'");
  }
  SslConfig c;
  try {
    c.prototypes = j.value("prototype_count", c.prototypes);
    c.student_temp = j.value("student_temp", c.student_temp);
    c.teacher_temp = j.value("teacher_temp", c.teacher_temp);
    c.center_momentum = j.value("center_momentum", c.center_momentum);
    c.ema_momentum = j.value("ema_momentum", c.ema_momentum);
    c.mask_fraction = j.value("mask_fraction", c.mask_fraction);
    c.koleo_weight = j.value("koleo_weight", c.koleo_weight);
    c.gram_weight = j.value("gram_weight", c.gram_weight);
    c.gram_teacher_checkpoint = j.value("gram_teacher_checkpoint", c.gram_teacher_checkpoint);
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.stain_aug = j.value("stain_aug", c.stain_aug);
    c.flips = j.value("flips", c.flips);
    c.crop_min_scale = j.value("crop_min_scale", c.crop_min_scale);
    c.seed = j.value("seed", c.seed);
    if (j.contains("encoder")) c.encoder = encoder_config_from_json(j["encoder"]);
    if (j.contains("stain")) {
      const json& s = j["stain"];
      if (s.contains("space")) c.stain.space = stain_space_from_string(s["space"].get<std::string>());
      if (s.contains("lab")) c.stain.lab = sigmas_from_json(s["lab"], c.stain.lab);
      if (s.contains("hsv")) c.stain.hsv = sigmas_from_json(s["hsv"], c.stain.hsv);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("ssl config: ") + e.what());
  }
  c.validate();
  return c;
}

json loss_to_json(int step, const LossBreakdown& l) {
  return {{"step", step}, {"dino", l.dino}, {"ibot", l.ibot}, {"koleo", l.koleo}, {"gram", l.gram},
          {"total", l.total}};
}

double prototype_cross_entropy(const Mat& student, const Mat& teacher, const RowVec& center, const SslConfig& cfg,
                               Mat* dstudent) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols() || center.size() != student.cols()) {
    throw ShapeError("prototype_cross_entropy: shapes " + shape_str(student.rows(), student.cols()) + " / " +
                     shape_str(teacher.rows(), teacher.cols()));
  }
  Mat centered = teacher;
  centered.rowwise() -= center;
  const Mat pt = softmax_rows(centered / cfg.teacher_temp);
  const Mat ps = softmax_rows(student / cfg.student_temp);
  const double rows = static_cast<double>(student.rows());
  double loss = 0.0;
  if (dstudent) dstudent->resize(student.rows(), student.cols());
  for (Eigen::Index r = 0; r < student.rows(); ++r) {
    double row_loss = 0.0;
    for (Eigen::Index c = 0; c < student.cols(); ++c) row_loss -= pt(r, c) * std::log(ps(r, c) + kLogEps);
    loss += row_loss;
    if (dstudent) {
      const RowVec ratio = pt.row(r).cwiseProduct(ps.row(r)).cwiseQuotient((ps.row(r).array() + kLogEps).matrix());
      const double mass = ratio.sum();
      dstudent->row(r) = -(ratio - ps.row(r) * mass) / (cfg.student_temp * rows);
    }
  }
  return loss / rows;
}

double dino_loss(const RowVec& student, const RowVec& teacher, const RowVec& center, const SslConfig& cfg,
                 RowVec* dstudent) {
  Mat grad;
  const double loss = prototype_cross_entropy(student, teacher, center, cfg, dstudent ? &grad : nullptr);
  if (dstudent) *dstudent = grad.row(0);
  return loss;
}

double ibot_loss(const Mat& student_masked, const Mat& teacher, const RowVec& center, const SslConfig& cfg,
                 Mat* dstudent) {
  if (student_masked.rows() == 0) throw ParameterError("ibot_loss: no masked positions");
  return prototype_cross_entropy(student_masked, teacher, center, cfg, dstudent);
}

namespace {

Mat normalize_rows(const Mat& x, Vec& norms) {
  norms = x.rowwise().norm().cwiseMax(1e-12);
  Mat out = x;
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r) /= norms(r);
  return out;
}

// d/dx of the row normalization applied to an upstream gradient on x-hat.
Mat normalize_rows_backward(const Mat& xhat, const Vec& norms, const Mat& dxhat) {
  Mat dx(xhat.rows(), xhat.cols());
  for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
    dx.row(r) = (dxhat.row(r) - xhat.row(r) * xhat.row(r).dot(dxhat.row(r))) / norms(r);
  }
  return dx;
}

}  // namespace

double koleo_loss(const Mat& features, Mat* dfeatures) {
  const Eigen::Index n = features.rows();
  if (n < 2) throw ParameterError("koleo_loss: needs at least two rows");
  Vec norms;
  const Mat z = normalize_rows(features, norms);
  Mat dz = Mat::Zero(n, z.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    Eigen::Index nn = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = (z.row(i) - z.row(j)).norm();
      if (d < best) {
        best = d;
        nn = j;
      }
    }
    loss -= std::log(std::max(best, kKoleoEps));
    if (best > kKoleoEps) {
      const RowVec g = -(z.row(i) - z.row(nn)) / (best * best * static_cast<double>(n));
      dz.row(i) += g;
      dz.row(nn) -= g;
    }
  }
  if (dfeatures) *dfeatures = normalize_rows_backward(z, norms, dz);
  return loss / static_cast<double>(n);
}

double gram_loss(const Mat& student, const Mat& gram_teacher, Mat* dstudent) {
  if (student.rows() != gram_teacher.rows()) {
    throw ShapeError("gram_loss: " + std::to_string(student.rows()) + " student rows vs " +
                     std::to_string(gram_teacher.rows()) + " teacher rows");
  }
  const double n = static_cast<double>(student.rows());
  Vec ns, ng;
  const Mat xs = normalize_rows(student, ns);
  const Mat xg = normalize_rows(gram_teacher, ng);
  const Mat diff = xs * xs.transpose() - xg * xg.transpose();
  if (dstudent) *dstudent = normalize_rows_backward(xs, ns, (4.0 / (n * n)) * diff * xs);
  return diff.squaredNorm() / (n * n);
}

ProjHeadParams ProjHeadParams::init(int dim, int hidden, int prototypes, RngStream& rng) {
  ProjHeadParams p;
  p.w1 = trunc_normal(rng, dim, hidden, 1.0 / std::sqrt(static_cast<double>(dim)));
  p.b1 = Mat::Zero(1, hidden);
  p.w2 = trunc_normal(rng, hidden, dim, 1.0 / std::sqrt(static_cast<double>(hidden)));
  p.b2 = Mat::Zero(1, dim);
  p.proto = trunc_normal(rng, dim, prototypes, 1.0);
  return p;
}

Mat proj_head_forward(const Mat& x, const ProjHeadParams& p, ProjHeadCache* cache) {
  Mat h_pre = matmul(x, p.w1);
  h_pre.rowwise() += p.b1.row(0);
  Mat h_act = h_pre.unaryExpr([](double v) { return gelu(v); });
  Mat y = h_act * p.w2;
  y.rowwise() += p.b2.row(0);
  Vec norms;
  Mat u = normalize_rows(y, norms);
  Vec pnorms = p.proto.colwise().norm().transpose().cwiseMax(1e-12);
  Mat pn = p.proto * pnorms.cwiseInverse().asDiagonal();
  Mat logits = u * pn;
  if (cache) {
    cache->x = x;
    cache->h_pre = std::move(h_pre);
    cache->h_act = std::move(h_act);
    cache->u = std::move(u);
    cache->norms = std::move(norms);
    cache->pn = std::move(pn);
    cache->pnorms = std::move(pnorms);
  }
  return logits;
}

Mat proj_head_backward(const Mat& dlogits, const ProjHeadParams& p, const ProjHeadCache& c, ProjHeadParams& g) {
  const Mat dpn = c.u.transpose() * dlogits;
  for (Eigen::Index k = 0; k < dpn.cols(); ++k) {
    const auto col = c.pn.col(k);
    g.proto.col(k) += (dpn.col(k) - col * col.dot(dpn.col(k))) / c.pnorms(k);
  }
  const Mat dy = normalize_rows_backward(c.u, c.norms, dlogits * c.pn.transpose());
  g.w2 += c.h_act.transpose() * dy;
  g.b2 += dy.colwise().sum();
  Mat dh = dy * p.w2.transpose();
  dh.array() *= c.h_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
  g.w1 += c.x.transpose() * dh;
  g.b1 += dh.colwise().sum();
  return dh * p.w1.transpose();
}

SslModel SslModel::init(const SslConfig& cfg, RngStream& rng) {
  SslModel m;
  m.encoder = EncoderParams::init(cfg.encoder, rng);
  const int d = cfg.encoder.embed_dim;
  m.dino_head = ProjHeadParams::init(d, 2 * d, cfg.prototypes, rng);
  m.ibot_head = ProjHeadParams::init(d, 2 * d, cfg.prototypes, rng);
  return m;
}

SslState::SslState(const SslConfig& c) : cfg(c), optimizer(c.lr) {
  cfg.validate();
  RngStream rng(cfg.seed, 0x5eed);
  student = SslModel::init(cfg, rng);
  teacher = student;
  center_cls = RowVec::Zero(cfg.prototypes);
  center_patch = RowVec::Zero(cfg.prototypes);
}

namespace {

Raster flip(const Raster& r, bool horizontal, bool vertical) {
  if (!horizontal && !vertical) return r;
  Raster out(r.width, r.height);
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      const int sx = horizontal ? r.width - 1 - x : x;
      const int sy = vertical ? r.height - 1 - y : y;
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = r.at(sx, sy, c);
    }
  }
  return out;
}

// Square crop of side `side` at (x0, y0), bilinearly resized to the input size.
Raster crop_resize(const Raster& r, int x0, int y0, int side) {
  Raster out(r.width, r.height);
  const double sx = static_cast<double>(side) / r.width, sy = static_cast<double>(side) / r.height;
  for (int y = 0; y < r.height; ++y) {
    const double fy = std::clamp(y0 + (y + 0.5) * sy - 0.5, 0.0, r.height - 1.0);
    const int iy = std::min(static_cast<int>(fy), r.height - 2 < 0 ? 0 : r.height - 2);
    const double ty = fy - iy;
    for (int x = 0; x < r.width; ++x) {
      const double fx = std::clamp(x0 + (x + 0.5) * sx - 0.5, 0.0, r.width - 1.0);
      const int ix = std::min(static_cast<int>(fx), r.width - 2 < 0 ? 0 : r.width - 2);
      const double tx = fx - ix;
      const int ix1 = std::min(ix + 1, r.width - 1), iy1 = std::min(iy + 1, r.height - 1);
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - tx) * r.at(ix, iy, c) + tx * r.at(ix1, iy, c);
        const double bottom = (1 - tx) * r.at(ix, iy1, c) + tx * r.at(ix1, iy1, c);
        out.at(x, y, c) = static_cast<std::uint8_t>(std::lround((1 - ty) * top + ty * bottom));
      }
    }
  }
  return out;
}

Raster random_crop(const Raster& r, double min_scale, RngStream& rng) {
  if (min_scale >= 1.0) return r;
  const double area = min_scale + (1.0 - min_scale) * rng.uniform();
  const int full = std::min(r.width, r.height);
  const int side = std::clamp(static_cast<int>(std::lround(full * std::sqrt(area))), 1, full);
  const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(r.width - side + 1)));
  const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(r.height - side + 1)));
  return crop_resize(r, x0, y0, side);
}

Raster one_view(const Raster& r, const SslConfig& cfg, RngStream& rng) {
  Raster v = random_crop(r, cfg.crop_min_scale, rng);
  if (cfg.stain_aug) v = stain_augment(v, cfg.stain, rng);
  if (cfg.flips) {
    const bool h = rng.uniform() < 0.5;
    const bool vflip = rng.uniform() < 0.5;
    v = flip(v, h, vflip);
  }
  return v;
}

}  // namespace

std::pair<Raster, Raster> make_views(const Raster& r, const SslConfig& cfg, RngStream& rng) {
  Raster a = one_view(r, cfg, rng);
  Raster b = one_view(r, cfg, rng);
  return {std::move(a), std::move(b)};
}

std::vector<bool> random_mask(int n, double fraction, RngStream& rng) {
  const int k = std::clamp(static_cast<int>(std::lround(fraction * n)), 1, n);
  std::vector<std::size_t> idx(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  shuffle_indices(idx, rng);
  std::vector<bool> mask(static_cast<std::size_t>(n), false);
  for (int i = 0; i < k; ++i) mask[idx[static_cast<std::size_t>(i)]] = true;
  return mask;
}

RngStream item_stream(const SslConfig& cfg, int step, std::size_t item) {
  return RngStream(cfg.seed, 0x57e9).child(static_cast<std::uint64_t>(step)).child(item);
}

namespace {

struct ViewWork {
  Mat patches;
  std::vector<bool> mask;
  std::vector<Eigen::Index> masked_rows;
  ForwardCache cache;
  Mat out;  // student Z_L
  ProjHeadCache dino_cache, ibot_cache;
  Mat s_cls_logits, s_patch_logits;  // patch logits only at masked rows
  Mat t_cls_logits, t_patch_logits;  // teacher, all patch rows
  Mat gram_patches;
};

struct ItemWork {
  ViewWork view[2];
};

struct StepResult {
  LossBreakdown loss;
  RowVec teacher_cls_mean;
  RowVec teacher_patch_mean;
};

Mat gather_rows(const Mat& m, const std::vector<Eigen::Index>& rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

void check_term(double v, const char* name) {
  if (!std::isfinite(v)) throw NumericError(std::string("ssl: non-finite ") + name + " loss");
}

StepResult run_objective(const SslState& st, const std::vector<Raster>& batch, Phase phase, SslModel* grads) {
  const SslConfig& cfg = st.cfg;
  const std::size_t b = batch.size();
  if (b < 2) throw ParameterError("train_step: batch needs at least two images");
  if (phase == Phase::POSTTRAIN && !st.gram_teacher) {
    throw ConfigError("train_step: POSTTRAIN requires a Gram teacher checkpoint");
  }
  const int n = cfg.encoder.num_patches();
  std::vector<ItemWork> work(b);

  parallel_for(b, [&](std::size_t i) {
    RngStream rng = item_stream(cfg, st.step, i);
    auto [v0, v1] = make_views(batch[i], cfg, rng);
    const Raster* views[2] = {&v0, &v1};
    for (int v = 0; v < 2; ++v) {
      ViewWork& w = work[i].view[v];
      w.patches = patchify(*views[v], cfg.encoder);
      w.mask = random_mask(n, cfg.mask_fraction, rng);
      for (int k = 0; k < n; ++k) {
        if (w.mask[static_cast<std::size_t>(k)]) w.masked_rows.push_back(k + 1);
      }
      const Mat t_out = encode(w.patches, st.teacher.encoder);
      w.t_cls_logits = proj_head_forward(t_out.topRows(1), st.teacher.dino_head);
      w.t_patch_logits = proj_head_forward(t_out.bottomRows(n), st.teacher.ibot_head);
      w.out = encode(w.patches, st.student.encoder, w.mask, grads ? &w.cache : nullptr);
      w.s_cls_logits = proj_head_forward(w.out.topRows(1), st.student.dino_head, &w.dino_cache);
      w.s_patch_logits = proj_head_forward(gather_rows(w.out, w.masked_rows), st.student.ibot_head, &w.ibot_cache);
      if (phase == Phase::POSTTRAIN) {
        w.gram_patches = encode(w.patches, *st.gram_teacher, w.mask).bottomRows(n);
      }
    }
  });

  const double inv_b = 1.0 / static_cast<double>(b);
  StepResult res;
  res.teacher_cls_mean = RowVec::Zero(cfg.prototypes);
  res.teacher_patch_mean = RowVec::Zero(cfg.prototypes);
  for (const ItemWork& item : work) {
    for (const ViewWork& w : item.view) {
      res.teacher_cls_mean += w.t_cls_logits.row(0) * (0.5 * inv_b);
      res.teacher_patch_mean += w.t_patch_logits.colwise().mean() * (0.5 * inv_b);
    }
  }
  // The running centers start at zero; undo that bias, and use the batch
  // mean itself before any update.
  RowVec center_cls = res.teacher_cls_mean, center_patch = res.teacher_patch_mean;
  if (st.step > 0) {
    const double correction = 1.0 - std::pow(cfg.center_momentum, st.step);
    center_cls = st.center_cls / correction;
    center_patch = st.center_patch / correction;
  }

  // Loss terms and their gradients w.r.t. student outputs, in item order.
  std::vector<std::array<Mat, 2>> d_cls_logits(b), d_patch_logits(b), d_out(b);
  double dino = 0.0, ibot = 0.0, gram = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    for (int v = 0; v < 2; ++v) {
      const ViewWork& w = work[i].view[v];
      const ViewWork& other = work[i].view[1 - v];
      Mat dcls, dpatch;
      // Student view v is scored against the teacher on the other view.
      dino += 0.5 * inv_b * prototype_cross_entropy(w.s_cls_logits, other.t_cls_logits, center_cls, cfg, &dcls);
      const Mat t_masked = gather_rows(w.t_patch_logits, [&] {
        std::vector<Eigen::Index> r;
        for (Eigen::Index k : w.masked_rows) r.push_back(k - 1);
        return r;
      }());
      ibot += 0.5 * inv_b * ibot_loss(w.s_patch_logits, t_masked, center_patch, cfg, &dpatch);
      d_cls_logits[i][v] = 0.5 * inv_b * dcls;
      d_patch_logits[i][v] = 0.5 * inv_b * dpatch;
      d_out[i][v] = Mat::Zero(w.out.rows(), w.out.cols());
      if (phase == Phase::POSTTRAIN) {
        Mat dg;
        gram += 0.5 * inv_b * gram_loss(w.out.bottomRows(n), w.gram_patches, &dg);
        d_out[i][v].bottomRows(n) += (0.5 * inv_b * cfg.gram_weight) * dg;
      }
    }
  }
  double koleo = 0.0;
  for (int v = 0; v < 2; ++v) {
    Mat feats(static_cast<Eigen::Index>(b), cfg.encoder.embed_dim);
    for (std::size_t i = 0; i < b; ++i) feats.row(static_cast<Eigen::Index>(i)) = work[i].view[v].out.row(0);
    Mat dk;
    koleo += 0.5 * koleo_loss(feats, &dk);
    for (std::size_t i = 0; i < b; ++i) {
      d_out[i][v].row(0) += (0.5 * cfg.koleo_weight) * dk.row(static_cast<Eigen::Index>(i));
    }
  }
  check_term(dino, "dino");
  check_term(ibot, "ibot");
  check_term(koleo, "koleo");
  check_term(gram, "gram");
  res.loss.dino = dino;
  res.loss.ibot = ibot;
  res.loss.koleo = koleo;
  res.loss.gram = gram;
  res.loss.total = dino + ibot + cfg.koleo_weight * koleo + cfg.gram_weight * gram;

  if (grads) {
    std::vector<SslModel> per_item(b);
    parallel_for(b, [&](std::size_t i) {
      SslModel g = zeros_like(st.student);
      for (int v = 0; v < 2; ++v) {
        ViewWork& w = work[i].view[v];
        Mat dz = std::move(d_out[i][v]);
        dz.topRows(1) += proj_head_backward(d_cls_logits[i][v], st.student.dino_head, w.dino_cache, g.dino_head);
        const Mat dmasked =
            proj_head_backward(d_patch_logits[i][v], st.student.ibot_head, w.ibot_cache, g.ibot_head);
        for (std::size_t k = 0; k < w.masked_rows.size(); ++k) {
          dz.row(w.masked_rows[k]) += dmasked.row(static_cast<Eigen::Index>(k));
        }
        axpy(g.encoder, 1.0, encoder_backward(dz, st.student.encoder, w.cache));
      }
      per_item[i] = std::move(g);
    });
    *grads = zeros_like(st.student);
    for (const auto& g : per_item) axpy(*grads, 1.0, g);
  }
  return res;
}

}  // namespace

LossBreakdown evaluate_objective(const SslState& state, const std::vector<Raster>& batch, Phase phase,
                                 SslModel* grads) {
  return run_objective(state, batch, phase, grads).loss;
}

LossBreakdown train_step(SslState& state, const std::vector<Raster>& batch, Phase phase) {
  SslModel grads;
  const StepResult res = run_objective(state, batch, phase, &grads);
  if (!all_finite(grads)) throw NumericError("ssl: non-finite gradients at step " + std::to_string(state.step));
  state.optimizer.step(state.student, grads);
  ema_update(state.teacher, state.student, state.cfg.ema_momentum);
  const double m = state.cfg.center_momentum;
  state.center_cls = m * state.center_cls + (1.0 - m) * res.teacher_cls_mean;
  state.center_patch = m * state.center_patch + (1.0 - m) * res.teacher_patch_mean;
  ++state.step;
  return res.loss;
}

void run_training(SslState& state, const std::vector<Raster>& corpus, int steps, Phase phase,
                  const StepCallback& on_step) {
  if (corpus.size() < 2) throw ParameterError("run_training: corpus needs at least two images");
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(state.cfg.batch_size), corpus.size());
  const std::size_t per_epoch = corpus.size() / bs;
  for (int s = 0; s < steps; ++s) {
    const auto epoch = static_cast<std::uint64_t>(state.step) / per_epoch;
    const std::size_t slot = static_cast<std::size_t>(state.step) % per_epoch;
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngStream shuffle_rng = RngStream(state.cfg.seed, 0xba7c).child(epoch);
    shuffle_indices(order, shuffle_rng);
    std::vector<Raster> batch;
    for (std::size_t k = 0; k < bs; ++k) batch.push_back(corpus[order[slot * bs + k]]);
    const int step_index = state.step;
    const LossBreakdown l = train_step(state, batch, phase);
    if (on_step) on_step(step_index, l);
  }
}

void anchor_gram_teacher(SslState& state) { state.gram_teacher = state.teacher.encoder; }

CheckpointFile ssl_checkpoint(const SslState& st) {
  CheckpointFile ck;
  ck.kind = "ssl";
  ck.meta["encoder"] = encoder_config_to_json(st.cfg.encoder);
  ck.meta["ssl"] = ssl_config_to_json(st.cfg);
  ck.meta["step"] = st.step;
  append_params(ck, "student.", st.student);
  append_params(ck, "teacher.", st.teacher);
  ck.names.push_back("center_cls");
  ck.tensors.push_back(st.center_cls);
  ck.names.push_back("center_patch");
  ck.tensors.push_back(st.center_patch);
  return ck;
}

void load_ssl_checkpoint(const CheckpointFile& ck, SslState& st) {
  if (ck.kind != "ssl") throw ConfigError("expected an ssl checkpoint, got '" + ck.kind + "'");
  const EncoderConfig enc = encoder_config_from_json(ck.meta.at("encoder"));
  if (!(enc == st.cfg.encoder)) throw ConfigError("ssl checkpoint encoder config differs from run config");
  const int prototypes = static_cast<int>(ck.get("center_cls").cols());
  if (prototypes != st.cfg.prototypes) throw ConfigError("ssl checkpoint prototype count differs from run config");
  load_params(ck, "student.", st.student);
  load_params(ck, "teacher.", st.teacher);
  st.center_cls = ck.get("center_cls");
  st.center_patch = ck.get("center_patch");
  st.step = ck.meta.value("step", 0);
}

}  // namespace tokenhier
