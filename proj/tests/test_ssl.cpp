#include <doctest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "support.hpp"
#include "tokenhier/ssl.hpp"

using namespace tokenhier;

namespace {

using LD = long double;

// Cross-entropy evaluated directly in extended precision.
LD ce_oracle(const RowVec& s, const RowVec& t, const RowVec& c, double ts, double tt) {
  const Eigen::Index k = s.size();
  LD ms = -std::numeric_limits<LD>::infinity(), mt = ms;
  for (Eigen::Index i = 0; i < k; ++i) {
    ms = std::max(ms, static_cast<LD>(s(i)) / ts);
    mt = std::max(mt, (static_cast<LD>(t(i)) - c(i)) / tt);
  }
  LD zs = 0, zt = 0;
  for (Eigen::Index i = 0; i < k; ++i) {
    zs += std::exp(static_cast<LD>(s(i)) / ts - ms);
    zt += std::exp((static_cast<LD>(t(i)) - c(i)) / tt - mt);
  }
  LD h = 0;
  for (Eigen::Index i = 0; i < k; ++i) {
    const LD pt = std::exp((static_cast<LD>(t(i)) - c(i)) / tt - mt) / zt;
    const LD ps = std::exp(static_cast<LD>(s(i)) / ts - ms) / zs;
    h -= pt * std::log(ps + static_cast<LD>(kLogEps));
  }
  return h;
}

LD gram_oracle(const Mat& a, const Mat& b) {
  auto unit = [](const Mat& m) {
    Mat u = m;
    for (Eigen::Index i = 0; i < m.rows(); ++i) u.row(i) /= m.row(i).norm();
    return u;
  };
  const Mat ua = unit(a), ub = unit(b);
  const Eigen::Index n = a.rows();
  LD sum = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      LD ga = 0, gb = 0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) {
        ga += static_cast<LD>(ua(i, k)) * ua(j, k);
        gb += static_cast<LD>(ub(i, k)) * ub(j, k);
      }
      sum += (ga - gb) * (ga - gb);
    }
  }
  return sum / (static_cast<LD>(n) * n);
}

SslConfig tiny_config() {
  SslConfig c;
  c.prototypes = 16;
  c.batch_size = 4;
  c.encoder.image_size = 32;
  c.encoder.token_size = 16;
  c.encoder.embed_dim = 16;
  c.encoder.depth = 1;
  c.encoder.num_heads = 2;
  c.seed = 3;
  return c;
}

std::vector<Raster> tiny_batch(std::uint64_t seed) {
  RngStream rng(seed, 0);
  std::vector<Raster> b;
  for (int i = 0; i < 4; ++i) b.push_back(testing::random_raster(32, 32, rng));
  return b;
}

bool same(const LossBreakdown& a, const LossBreakdown& b) {
  return a.dino == b.dino && a.ibot == b.ibot && a.koleo == b.koleo && a.gram == b.gram && a.total == b.total;
}

}  // namespace

TEST_CASE("dino loss examples") {
  SslConfig cfg;
  RngStream rng(1, 0);
  const RowVec zero = RowVec::Zero(3);

  SslConfig equal = cfg;
  equal.student_temp = equal.teacher_temp = 0.1;
  const RowVec t = testing::random_mat(1, 3, rng);
  const LD entropy = ce_oracle(t, t, zero, 0.1, 0.1);
  CHECK(std::abs(dino_loss(t, t, zero, equal) - static_cast<double>(entropy)) <= 1e-12);

  RowVec spike = RowVec::Zero(256);
  spike(5) = 100.0;
  CHECK(dino_loss(RowVec::Zero(256), spike, RowVec::Zero(256), cfg) == doctest::Approx(std::log(256.0)).epsilon(1e-9));

  const RowVec s{{0.3, -1.2, 2.0}}, tt{{1.0, 0.5, -0.25}}, c{{0.1, -0.2, 0.05}};
  CHECK(std::abs(dino_loss(s, tt, c, cfg) - static_cast<double>(ce_oracle(s, tt, c, 0.1, 0.04))) <= 1e-12);
}

TEST_CASE("cross-entropy is bounded below by the teacher entropy") {
  SslConfig cfg;
  RngStream rng(2, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const RowVec s = testing::random_mat(1, 8, rng), t = testing::random_mat(1, 8, rng) * 0.2;
    const RowVec c = testing::random_mat(1, 8, rng) * 0.05;
    // A student matching P_t has logits (t - c) * (ts / tt).
    const RowVec matched = (t - c) * (cfg.student_temp / cfg.teacher_temp);
    const double h = dino_loss(matched, t, c, cfg);
    CHECK(dino_loss(s, t, c, cfg) >= h - 1e-9);
    CHECK(h >= 0.0);
  }
}

TEST_CASE("ibot loss") {
  SslConfig cfg;
  RngStream rng(3, 0);
  const Mat s = testing::random_mat(4, 3, rng), t = testing::random_mat(4, 3, rng);
  const RowVec c = testing::random_mat(1, 3, rng) * 0.1;
  LD sum = 0;
  for (int i = 0; i < 4; ++i) sum += ce_oracle(s.row(i), t.row(i), c, 0.1, 0.04);
  CHECK(std::abs(ibot_loss(s, t, c, cfg) - static_cast<double>(sum / 4)) <= 1e-12);
  CHECK(ibot_loss(s.topRows(1), t.topRows(1), c, cfg) == dino_loss(s.row(0), t.row(0), c, cfg));
  CHECK_THROWS_AS(ibot_loss(Mat(0, 3), Mat(0, 3), c, cfg), ParameterError);
}

TEST_CASE("koleo loss") {
  const Mat anti{{1.0, 0.0}, {-1.0, 0.0}};
  CHECK(koleo_loss(anti) == doctest::Approx(-std::log(2.0)).epsilon(1e-14));
  const Mat dup{{0.3, 0.4, 0.5}, {0.3, 0.4, 0.5}, {0.6, 0.8, 1.0}};
  const double clamped = koleo_loss(dup);
  CHECK(std::isfinite(clamped));
  CHECK(clamped == doctest::Approx(-std::log(kKoleoEps)).epsilon(1e-6));
  CHECK_THROWS_AS(koleo_loss(Mat::Ones(1, 3)), ParameterError);

  RngStream rng(4, 0);
  for (int n : {2, 3, 10, 17, 33, 64}) {
    for (int trial = 0; trial < 5; ++trial) {
      const Mat f = testing::random_mat(n, 8, rng);
      CHECK(std::abs(koleo_loss(f) - static_cast<double>(testing::koleo_oracle(f))) <= 1e-12);
    }
  }
}

TEST_CASE("gram loss") {
  RngStream rng(5, 0);
  const Mat x = testing::random_mat(6, 5, rng);
  CHECK(gram_loss(x, x) == 0.0);

  Mat permuted = x;
  permuted.row(0) = x.row(3);
  permuted.row(3) = x.row(0);
  const double g = gram_loss(permuted, x);
  CHECK(g > 1e-6);
  CHECK(std::abs(g - static_cast<double>(gram_oracle(permuted, x))) <= 1e-12);

  const Mat ortho{{1.0, 0.0}, {0.0, 2.0}}, rank1{{3.0, 4.0}, {0.6, 0.8}};
  CHECK(gram_loss(ortho, rank1) == doctest::Approx(0.5).epsilon(1e-14));

  const Mat y = testing::random_mat(6, 5, rng);
  const Eigen::HouseholderQR<Mat> qr(testing::random_mat(5, 5, rng));
  const Mat q = qr.householderQ();
  CHECK(std::abs(gram_loss(x * q, y * q) - gram_loss(x, y)) <= 1e-10);

  CHECK_THROWS_AS(gram_loss(x, y.topRows(5)), ShapeError);
}

TEST_CASE("projection head logits are cosines") {
  RngStream rng(6, 0);
  const ProjHeadParams p = ProjHeadParams::init(16, 32, 24, rng);
  const Mat y = proj_head_forward(testing::random_mat(7, 16, rng) * 5.0, p);
  CHECK(y.rows() == 7);
  CHECK(y.cols() == 24);
  CHECK(y.cwiseAbs().maxCoeff() <= 1.0 + 1e-12);
}

TEST_CASE("masks and views") {
  RngStream rng(7, 0);
  const auto m = random_mask(16, 0.3, rng);
  CHECK(std::count(m.begin(), m.end(), true) == 5);
  RngStream r2(7, 1);
  const auto tiny = random_mask(4, 0.01, r2);
  CHECK(std::count(tiny.begin(), tiny.end(), true) == 1);

  const SslConfig cfg = tiny_config();
  const Raster img = tiny_batch(9)[0];
  RngStream a = item_stream(cfg, 3, 2), b = item_stream(cfg, 3, 2);
  const auto va = make_views(img, cfg, a), vb = make_views(img, cfg, b);
  CHECK(va.first == vb.first);
  CHECK(va.second == vb.second);
  CHECK(va.first.width == 32);
}

TEST_CASE("phase gating and frozen teacher") {
  SslConfig cfg = tiny_config();
  cfg.ema_momentum = 1.0;
  SslState st(cfg);
  const auto teacher_hash = hash_params(st.teacher);
  const auto student_hash = hash_params(st.student);
  for (int i = 0; i < 3; ++i) {
    const LossBreakdown l = train_step(st, tiny_batch(10 + i), Phase::PRETRAIN);
    CHECK(l.gram == 0.0);
    CHECK(l.dino >= 0.0);
    CHECK(l.ibot >= 0.0);
    CHECK(l.total == doctest::Approx(l.dino + l.ibot + cfg.koleo_weight * l.koleo));
  }
  CHECK(hash_params(st.teacher) == teacher_hash);
  CHECK(hash_params(st.student) != student_hash);
  CHECK(st.step == 3);

  CHECK_THROWS_AS(train_step(st, tiny_batch(20), Phase::POSTTRAIN), ConfigError);
}

TEST_CASE("gram term in post-training") {
  SslState st(tiny_config());
  anchor_gram_teacher(st);
  // Student and teacher start identical, so the anchor equals the student.
  CHECK(evaluate_objective(st, tiny_batch(30), Phase::POSTTRAIN, nullptr).gram == 0.0);
  for (int i = 0; i < 3; ++i) train_step(st, tiny_batch(31 + i), Phase::PRETRAIN);
  const LossBreakdown l = evaluate_objective(st, tiny_batch(30), Phase::POSTTRAIN, nullptr);
  CHECK(l.gram > 0.0);
  CHECK(l.total == doctest::Approx(l.dino + l.ibot + st.cfg.koleo_weight * l.koleo + st.cfg.gram_weight * l.gram));
}

TEST_CASE("training is independent of the thread count") {
  std::vector<std::vector<LossBreakdown>> runs;
  std::vector<std::uint64_t> hashes;
  for (int threads : {1, 4}) {
    set_thread_count(threads);
    SslState st(tiny_config());
    std::vector<LossBreakdown> seq;
    for (int i = 0; i < 3; ++i) seq.push_back(train_step(st, tiny_batch(40 + i), Phase::PRETRAIN));
    runs.push_back(seq);
    hashes.push_back(hash_params(st.student) ^ hash_params(st.teacher));
  }
  set_thread_count(1);
  for (int i = 0; i < 3; ++i) CHECK(same(runs[0][i], runs[1][i]));
  CHECK(hashes[0] == hashes[1]);
}

TEST_CASE("config serialization") {
  SslConfig c = tiny_config();
  c.koleo_weight = 0.25;
  c.stain_aug = false;
  c.crop_min_scale = 0.7;
  const auto j = ssl_config_to_json(c);
  CHECK(ssl_config_to_json(ssl_config_from_json(j)) == j);
  CHECK(ssl_config_from_json(nlohmann::json::object()).prototypes == 256);
  auto bad = j;
  bad["surprise"] = 1;
  CHECK_THROWS_AS(ssl_config_from_json(bad), ConfigError);
  SslConfig t = c;
  t.student_temp = 0.03;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = c;
  t.crop_min_scale = 0.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("ssl checkpoint round trip") {
  SslState st(tiny_config());
  train_step(st, tiny_batch(50), Phase::PRETRAIN);
  anchor_gram_teacher(st);
  testing::TempDir dir("ssl");
  write_checkpoint(dir / "s.ckpt", ssl_checkpoint(st));
  SslState back(tiny_config());
  load_ssl_checkpoint(read_checkpoint(dir / "s.ckpt"), back);
  CHECK(hash_params(back.student) == hash_params(st.student));
  CHECK(hash_params(back.teacher) == hash_params(st.teacher));
  CHECK(back.center_cls == st.center_cls);
  CHECK(back.step == st.step);
  CHECK(hash_params(encoder_from_checkpoint(read_checkpoint(dir / "s.ckpt"))) == hash_params(st.teacher.encoder));
}
