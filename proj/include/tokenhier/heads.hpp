#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokenhier/checkpoint.hpp"
#include "tokenhier/encoder.hpp"
#include "tokenhier/params.hpp"

namespace tokenhier {

enum class HeadMode { LINEAR, ATTNPOOL };

std::string to_string(HeadMode m);
HeadMode head_mode_from_string(const std::string& s);

/// softmax(W z_cls + b).
struct ProbeParams {
  Mat w;  // C x D
  Mat b;  // 1 x C

  static ProbeParams zeros(int classes, int dim);
  int classes() const { return static_cast<int>(w.rows()); }

  template <class F>
  void visit(F&& f) {
    f("w", w);
    f("b", b);
  }
  template <class F>
  void visit(F&& f) const {
    f("w", w);
    f("b", b);
  }
};

/// Class-token-queried multi-head attention over the patch tokens, then a
/// softmax classifier on the pooled vector. Projections map D -> D with the
/// head h occupying rows [h*Dh, (h+1)*Dh). With `projected` false the
/// projections are fixed identities (Q = z_cls, K = V = patches) and only the
/// classifier trains.
struct AttnPoolParams {
  int num_heads = 4;
  bool projected = true;
  Mat wq, bq;  // D x D, 1 x D
  Mat wk, bk;
  Mat wv, bv;
  Mat wo, bo;
  Mat w;  // C x D classifier
  Mat b;  // 1 x C

  /// Wq, Wk ~ N(0, 1/D); Wv = Wo = I; zero biases and classifier.
  static AttnPoolParams init(int classes, int dim, int num_heads, bool projected, RngStream& rng);
  int classes() const { return static_cast<int>(w.rows()); }
  int dim() const { return static_cast<int>(wq.rows()); }

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
    f("wq", s.wq);
    f("bq", s.bq);
    f("wk", s.wk);
    f("bk", s.bk);
    f("wv", s.wv);
    f("bv", s.bv);
    f("wo", s.wo);
    f("bo", s.bo);
    f("w", s.w);
    f("b", s.b);
  }
};

RowVec linear_probe_forward(const RowVec& cls, const ProbeParams& p);

struct AttnPoolOutput {
  RowVec h;                      // pooled D-vector
  std::vector<RowVec> weights;   // per head, N entries summing to one
  RowVec query;                  // projected query, D
  Mat keys, values;              // N x D
  RowVec context;                // concatenated head outputs, D
};

AttnPoolOutput attention_pool(const TokenSequence& seq, const AttnPoolParams& p);
RowVec attnpool_forward(const TokenSequence& seq, const AttnPoolParams& p);

struct LabeledTokens {
  TokenSequence seq;
  int label = 0;
};

/// Mean cross-entropy over the batch and its analytic gradient.
double probe_gradients(std::span<const LabeledTokens> batch, const ProbeParams& p, ProbeParams& grads);
double attnpool_gradients(std::span<const LabeledTokens> batch, const AttnPoolParams& p, AttnPoolParams& grads);

struct HeadTrainConfig {
  int epochs = 100;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int batch = 32;
  std::uint64_t seed = 0;
  int num_heads = 4;
  bool projected = true;

  void validate() const;
};

nlohmann::json head_config_to_json(const HeadTrainConfig& c);
/// Missing fields keep their defaults; unknown fields are rejected.
HeadTrainConfig head_config_from_json(const nlohmann::json& j);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_bacc = 0.0;
  double val_loss = 0.0;
};

struct TrainedHead {
  HeadMode mode = HeadMode::LINEAR;
  int classes = 0;
  ProbeParams linear;
  AttnPoolParams attn;
  std::vector<EpochStats> curve;
  int best_epoch = 0;
  double best_val_bacc = 0.0;
};

/// Probabilities from a trained head; LINEAR reads only the class token.
RowVec predict_proba(const TrainedHead& head, const TokenSequence& seq);
int predict(const TrainedHead& head, const TokenSequence& seq);

/// Mini-batch Adam on mean cross-entropy with weight decay. Returns the
/// parameters of the epoch with the best validation BACC; ties go to the
/// lower validation loss, then the earlier epoch.
/// An empty `val` selects on the training set. Needs >= 2 classes in `train`.
TrainedHead train_head(const std::vector<LabeledTokens>& train, const std::vector<LabeledTokens>& val,
                       int classes, HeadMode mode, const HeadTrainConfig& cfg);

CheckpointFile head_checkpoint(const TrainedHead& head);
TrainedHead head_from_checkpoint(const CheckpointFile& ck);

/// Per item, per head attention weights over the N patch tokens.
nlohmann::json attention_dump(const std::vector<LabeledTokens>& items, const AttnPoolParams& p);

}  // namespace tokenhier
