#include "tokenhier/gradcheck.hpp"

#include <functional>
#include <utility>

#include "tokenhier/encoder.hpp"
#include "tokenhier/heads.hpp"
#include "tokenhier/ssl.hpp"

namespace tokenhier {

double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  const double denom = std::max({analytic.norm(), numeric.norm(), 1e-4});
  return (analytic - numeric).norm() / denom;
}

namespace {

// Ad-hoc parameter set for checks on inputs rather than model weights.
struct NamedTensors {
  std::vector<std::pair<std::string, Mat>> items;

  Mat& operator[](const std::string& name) {
    for (auto& [n, m] : items) {
      if (n == name) return m;
    }
    items.emplace_back(name, Mat());
    return items.back().second;
  }

  template <class F>
  void visit(F&& f) {
    for (auto& [n, m] : items) f(n, m);
  }
  template <class F>
  void visit(F&& f) const {
    for (const auto& [n, m] : items) f(n, m);
  }
};

struct BlockHolder {
  BlockParams block;
  Mat x;

  template <class F>
  void visit(F&& f) {
    BlockParams::visit_impl(block, "", f);
    f("x", x);
  }
  template <class F>
  void visit(F&& f) const {
    BlockParams::visit_impl(block, "", f);
    f("x", x);
  }
};

struct HeadHolder {
  ProjHeadParams head;
  Mat x;

  template <class F>
  void visit(F&& f) {
    head.visit(f);
    f("x", x);
  }
  template <class F>
  void visit(F&& f) const {
    head.visit(f);
    f("x", x);
  }
};

Mat randn(int rows, int cols, double sigma, RngStream& rng) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sigma * rng.normal();
  return m;
}

template <class P>
void jitter(P& p, double sigma, RngStream& rng) {
  p.visit([&](const std::string&, Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += sigma * rng.normal();
  });
}

Raster random_raster(int size, RngStream& rng) {
  Raster r(size, size);
  for (auto& v : r.pixels) v = static_cast<std::uint8_t>(rng.below(256));
  return r;
}

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.image_size = 8;
  c.token_size = 4;
  c.embed_dim = 16;
  c.depth = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2.0;
  return c;
}

class Runner {
 public:
  explicit Runner(const GradcheckOptions& opt) : opt_(opt), rng_(opt.seed, 0x6763) {}

  template <class P, class Loss>
  void check(const std::string& component, P& params, P analytic, Loss&& loss) {
    if (component == opt_.fault_component) scale(analytic, 1.01);
    GradcheckResult r;
    r.component = component;
    r.worst_rel_error = finite_difference_check(params, analytic, loss, opt_, rng_, &r.worst_tensor);
    r.passed = r.worst_rel_error <= opt_.tolerance;
    results_.push_back(std::move(r));
  }

  RngStream& rng() { return rng_; }
  std::vector<GradcheckResult> take() { return std::move(results_); }

 private:
  GradcheckOptions opt_;
  RngStream rng_;
  std::vector<GradcheckResult> results_;
};

void check_layer_norm(Runner& run) {
  auto& rng = run.rng();
  NamedTensors p;
  p["x"] = randn(5, 8, 1.0, rng);
  p["gain"] = randn(1, 8, 1.0, rng);
  p["bias"] = randn(1, 8, 1.0, rng);
  const Mat w = randn(5, 8, 1.0, rng);
  auto loss = [&] { return layer_norm(p["x"], p["gain"], p["bias"], 1e-6).cwiseProduct(w).sum(); };
  LayerNormCache cache;
  layer_norm(p["x"], p["gain"], p["bias"], 1e-6, &cache);
  const auto g = layer_norm_backward(w, p["gain"], cache);
  NamedTensors a;
  a["x"] = g.dx;
  a["gain"] = g.dgain;
  a["bias"] = g.dbias;
  run.check("encoder.layer_norm", p, a, loss);
}

void check_block(Runner& run) {
  auto& rng = run.rng();
  const EncoderConfig cfg = tiny_encoder();
  BlockHolder h{EncoderParams::init(cfg, rng).blocks.front(), randn(cfg.seq_len(), cfg.embed_dim, 1.0, rng)};
  jitter(h, 0.3, rng);
  const Mat w = randn(cfg.seq_len(), cfg.embed_dim, 1.0, rng);
  auto loss = [&] { return block_forward(h.x, h.block, cfg).cwiseProduct(w).sum(); };
  BlockCache cache;
  block_forward(h.x, h.block, cfg, &cache);
  BlockHolder g = zeros_like(h);
  g.x = block_backward(w, h.block, cfg, cache, g.block);
  run.check("encoder.block", h, g, loss);
}

void check_encoder(Runner& run) {
  auto& rng = run.rng();
  const EncoderConfig cfg = tiny_encoder();
  EncoderParams p = EncoderParams::init(cfg, rng);
  jitter(p, 0.3, rng);
  const Mat patches = randn(cfg.num_patches(), cfg.patch_dim(), 1.0, rng);
  const std::vector<bool> mask{true, false, false, true};
  const Mat w = randn(cfg.seq_len(), cfg.embed_dim, 1.0, rng);
  auto loss = [&] { return encode(patches, p, mask).cwiseProduct(w).sum(); };
  ForwardCache cache;
  encode(patches, p, mask, &cache);
  run.check("encoder.full", p, encoder_backward(w, p, cache), loss);
}

SslConfig tiny_ssl() {
  SslConfig c;
  c.encoder = tiny_encoder();
  c.prototypes = 8;
  c.batch_size = 3;
  c.mask_fraction = 0.5;
  c.seed = 11;
  return c;
}

void check_losses(Runner& run) {
  auto& rng = run.rng();
  const SslConfig cfg = tiny_ssl();
  const int k = cfg.prototypes;
  {
    NamedTensors p;
    p["student"] = randn(1, k, 1.0, rng);
    const RowVec teacher = randn(1, k, 1.0, rng);
    const RowVec center = randn(1, k, 0.1, rng);
    RowVec g;
    dino_loss(p["student"], teacher, center, cfg, &g);
    NamedTensors a;
    a["student"] = g;
    run.check("ssl.dino", p, a, [&] { return dino_loss(p["student"], teacher, center, cfg); });
  }
  {
    NamedTensors p;
    p["student"] = randn(3, k, 1.0, rng);
    const Mat teacher = randn(3, k, 1.0, rng);
    const RowVec center = randn(1, k, 0.1, rng);
    Mat g;
    ibot_loss(p["student"], teacher, center, cfg, &g);
    NamedTensors a;
    a["student"] = g;
    run.check("ssl.ibot", p, a, [&] { return ibot_loss(p["student"], teacher, center, cfg); });
  }
  {
    NamedTensors p;
    p["features"] = randn(6, 5, 1.0, rng);
    Mat g;
    koleo_loss(p["features"], &g);
    NamedTensors a;
    a["features"] = g;
    run.check("ssl.koleo", p, a, [&] { return koleo_loss(p["features"]); });
  }
  {
    NamedTensors p;
    p["student"] = randn(5, 6, 1.0, rng);
    const Mat anchor = randn(5, 6, 1.0, rng);
    Mat g;
    gram_loss(p["student"], anchor, &g);
    NamedTensors a;
    a["student"] = g;
    run.check("ssl.gram", p, a, [&] { return gram_loss(p["student"], anchor); });
  }
  {
    HeadHolder h{ProjHeadParams::init(6, 12, k, rng), randn(4, 6, 1.0, rng)};
    jitter(h.head, 0.3, rng);
    const Mat w = randn(4, k, 1.0, rng);
    ProjHeadCache cache;
    proj_head_forward(h.x, h.head, &cache);
    HeadHolder g{zeros_like(h.head), Mat()};
    g.x = proj_head_backward(w, h.head, cache, g.head);
    run.check("ssl.proj_head", h, g, [&] { return proj_head_forward(h.x, h.head).cwiseProduct(w).sum(); });
  }
}

void check_objective(Runner& run, Phase phase, const std::string& name) {
  auto& rng = run.rng();
  SslState state(tiny_ssl());
  jitter(state.student, 0.05, rng);
  if (phase == Phase::POSTTRAIN) {
    EncoderParams anchor = state.teacher.encoder;
    jitter(anchor, 0.1, rng);
    state.gram_teacher = anchor;
  }
  std::vector<Raster> batch;
  for (int i = 0; i < state.cfg.batch_size; ++i) batch.push_back(random_raster(state.cfg.encoder.image_size, rng));
  SslModel grads = zeros_like(state.student);
  evaluate_objective(state, batch, phase, &grads);
  run.check(name, state.student, grads, [&] { return evaluate_objective(state, batch, phase, nullptr).total; });
}

std::vector<LabeledTokens> random_tokens(int items, int n, int d, int classes, RngStream& rng) {
  std::vector<LabeledTokens> out;
  for (int i = 0; i < items; ++i) {
    LabeledTokens t;
    t.seq.cls = randn(1, d, 1.0, rng);
    t.seq.patches = randn(n, d, 1.0, rng);
    t.label = i % classes;
    out.push_back(std::move(t));
  }
  return out;
}

void check_heads(Runner& run) {
  auto& rng = run.rng();
  const int d = 8, n = 4, c = 3;
  const auto data = random_tokens(5, n, d, c, rng);
  {
    ProbeParams p = ProbeParams::zeros(c, d);
    jitter(p, 0.5, rng);
    ProbeParams g = zeros_like(p);
    probe_gradients(data, p, g);
    ProbeParams scratch = zeros_like(p);
    run.check("heads.linear", p, g, [&] { return probe_gradients(data, p, scratch); });
  }
  {
    AttnPoolParams p = AttnPoolParams::init(c, d, 2, true, rng);
    jitter(p, 0.3, rng);
    AttnPoolParams g = zeros_like(p);
    attnpool_gradients(data, p, g);
    AttnPoolParams scratch = zeros_like(p);
    run.check("heads.attnpool", p, g, [&] { return attnpool_gradients(data, p, scratch); });
  }
  {
    // Frozen identity projections: only the classifier is trainable.
    AttnPoolParams p = AttnPoolParams::init(c, d, 2, false, rng);
    p.w = randn(c, d, 0.5, rng);
    AttnPoolParams g = zeros_like(p);
    attnpool_gradients(data, p, g);
    AttnPoolParams scratch = zeros_like(p);
    NamedTensors view, analytic;
    view["w"] = p.w;
    view["b"] = p.b;
    analytic["w"] = g.w;
    analytic["b"] = g.b;
    run.check("heads.attnpool_fixed", view, analytic, [&] {
      p.w = view["w"];
      p.b = view["b"];
      return attnpool_gradients(data, p, scratch);
    });
  }
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& opt) {
  Runner run(opt);
  check_layer_norm(run);
  check_block(run);
  check_encoder(run);
  check_losses(run);
  check_objective(run, Phase::PRETRAIN, "ssl.objective_pretrain");
  check_objective(run, Phase::POSTTRAIN, "ssl.objective_posttrain");
  check_heads(run);
  return run.take();
}

}  // namespace tokenhier
