#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokenhier/checkpoint.hpp"
#include "tokenhier/color.hpp"
#include "tokenhier/encoder.hpp"
#include "tokenhier/params.hpp"

namespace tokenhier {

struct SslConfig {
  int prototypes = 256;
  double student_temp = 0.1;
  double teacher_temp = 0.04;
  double center_momentum = 0.99;
  double ema_momentum = 0.996;
  double mask_fraction = 0.3;
  double koleo_weight = 0.1;
  double gram_weight = 1.0;
  std::string gram_teacher_checkpoint;

  double lr = 1e-3;
  int batch_size = 8;
  bool stain_aug = true;
  bool flips = true;
  /// Views are random crops covering [crop_min_scale, 1] of the image area,
  /// resized back to full size; 1 disables cropping.
  double crop_min_scale = 0.4;
  std::uint64_t seed = 0;
  EncoderConfig encoder;
  StainAugConfig stain;

  void validate() const;
};

nlohmann::json ssl_config_to_json(const SslConfig& c);
/// Missing fields keep their defaults; unknown fields are rejected.
SslConfig ssl_config_from_json(const nlohmann::json& j);

struct LossBreakdown {
  double dino = 0.0;
  double ibot = 0.0;
  double koleo = 0.0;
  double gram = 0.0;
  double total = 0.0;
};

nlohmann::json loss_to_json(int step, const LossBreakdown& l);

constexpr double kLogEps = 1e-12;
constexpr double kKoleoEps = 1e-8;

/// Mean over rows of H(P_t, P_s) = -sum_c P_t(c) log(P_s(c) + 1e-12), with
/// P_t = softmax((teacher - center) / teacher_temp) treated as a constant and
/// P_s = softmax(student / student_temp). Optional gradient w.r.t. student.
double prototype_cross_entropy(const Mat& student, const Mat& teacher, const RowVec& center,
                               const SslConfig& cfg, Mat* dstudent = nullptr);

/// Image-level term on class-token prototype logits.
double dino_loss(const RowVec& student, const RowVec& teacher, const RowVec& center, const SslConfig& cfg,
                 RowVec* dstudent = nullptr);

/// Masked-patch term: the same cross-entropy averaged over M >= 1 masked rows.
double ibot_loss(const Mat& student_masked, const Mat& teacher, const RowVec& center, const SslConfig& cfg,
                 Mat* dstudent = nullptr);

/// -(1/n) sum_i log(max(d_i, 1e-8)), d_i the distance from row i to its
/// nearest other row after l2 normalization. n >= 2.
double koleo_loss(const Mat& features, Mat* dfeatures = nullptr);

/// (1/N^2) || Xs Xs^T - Xg Xg^T ||_F^2 over l2-normalized rows. The Gram
/// teacher side is constant.
double gram_loss(const Mat& student, const Mat& gram_teacher, Mat* dstudent = nullptr);

/// Two-layer GELU MLP to an l2-normalized bottleneck, then cosine logits
/// against unit-norm prototype columns.
struct ProjHeadParams {
  Mat w1, b1;  // D x 2D
  Mat w2, b2;  // 2D x B, output l2-normalized
  Mat proto;   // B x K, columns used at unit norm

  static ProjHeadParams init(int dim, int hidden, int prototypes, RngStream& rng);

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
    f("w1", s.w1);
    f("b1", s.b1);
    f("w2", s.w2);
    f("b2", s.b2);
    f("proto", s.proto);
  }
};

struct ProjHeadCache {
  Mat x;
  Mat h_pre;
  Mat h_act;
  Mat u;       // normalized bottleneck
  Vec norms;   // bottleneck row norms
  Mat pn;      // normalized prototypes
  Vec pnorms;  // prototype column norms
};

Mat proj_head_forward(const Mat& x, const ProjHeadParams& p, ProjHeadCache* cache = nullptr);
/// Returns dL/dx and accumulates into grads.
Mat proj_head_backward(const Mat& dy, const ProjHeadParams& p, const ProjHeadCache& cache,
                       ProjHeadParams& grads);

/// Backbone plus the class-token (DINO) and patch (iBOT) projection heads.
struct SslModel {
  EncoderParams encoder;
  ProjHeadParams dino_head;
  ProjHeadParams ibot_head;

  static SslModel init(const SslConfig& cfg, RngStream& rng);

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
    s.encoder.visit([&](const std::string& n, auto& m) { f("encoder." + n, m); });
    s.dino_head.visit([&](const std::string& n, auto& m) { f("dino_head." + n, m); });
    s.ibot_head.visit([&](const std::string& n, auto& m) { f("ibot_head." + n, m); });
  }
};

enum class Phase { PRETRAIN, POSTTRAIN };

/// Student, EMA teacher, centers and optimizer state of one training run.
struct SslState {
  SslConfig cfg;
  SslModel student;
  SslModel teacher;
  RowVec center_cls;
  RowVec center_patch;
  std::optional<EncoderParams> gram_teacher;
  Adam optimizer;
  int step = 0;

  explicit SslState(const SslConfig& cfg);
};

/// The two augmented global views of one raster (stain jitter when enabled,
/// then random flips when enabled).
std::pair<Raster, Raster> make_views(const Raster& r, const SslConfig& cfg, RngStream& rng);
std::vector<bool> random_mask(int n, double fraction, RngStream& rng);

/// Stream for item `item` of step `step`; independent of execution order.
RngStream item_stream(const SslConfig& cfg, int step, std::size_t item);

/// Pretraining objective (dino + ibot + koleo) or post-training (adds gram).
/// Applies one Adam step to the student, the EMA to the teacher and the
/// momentum update to both centers. POSTTRAIN requires state.gram_teacher.
LossBreakdown train_step(SslState& state, const std::vector<Raster>& batch, Phase phase);

/// Same objective without any update; returns gradients of the student.
LossBreakdown evaluate_objective(const SslState& state, const std::vector<Raster>& batch, Phase phase,
                                 SslModel* grads);

using StepCallback = std::function<void(int, const LossBreakdown&)>;

/// Runs `steps` train steps drawing batches from `corpus` by seeded shuffles.
void run_training(SslState& state, const std::vector<Raster>& corpus, int steps, Phase phase,
                  const StepCallback& on_step = {});

/// Snapshot of the EMA teacher used as the Gram anchor.
void anchor_gram_teacher(SslState& state);

CheckpointFile ssl_checkpoint(const SslState& state);
void load_ssl_checkpoint(const CheckpointFile& ck, SslState& state);

}  // namespace tokenhier
