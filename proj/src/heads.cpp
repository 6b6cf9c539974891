#include "tokenhier/heads.hpp"

#include <cmath>
#include <limits>
#include <set>

#include "tokenhier/metrics.hpp"

namespace tokenhier {

using nlohmann::json;

std::string to_string(HeadMode m) { return m == HeadMode::LINEAR ? "linear" : "attnpool"; }

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "linear") return HeadMode::LINEAR;
  if (s == "attnpool") return HeadMode::ATTNPOOL;
  throw ConfigError("unknown head mode '" + s + "' (expected linear|attnpool)");
}

ProbeParams ProbeParams::zeros(int classes, int dim) {
  return {Mat::Zero(classes, dim), Mat::Zero(1, classes)};
}

AttnPoolParams AttnPoolParams::init(int classes, int dim, int num_heads, bool projected, RngStream& rng) {
  if (num_heads < 1 || dim % num_heads != 0) throw ConfigError("attention pool: dim must be divisible by num_heads");
  AttnPoolParams p;
  p.num_heads = num_heads;
  p.projected = projected;
  const double sigma = 1.0 / std::sqrt(static_cast<double>(dim));
  p.wq = projected ? Mat(sigma * Mat::NullaryExpr(dim, dim, [&] { return rng.normal(); }))
                   : Mat(Mat::Identity(dim, dim));
  p.wk = projected ? Mat(sigma * Mat::NullaryExpr(dim, dim, [&] { return rng.normal(); }))
                   : Mat(Mat::Identity(dim, dim));
  p.wv = Mat::Identity(dim, dim);
  p.wo = Mat::Identity(dim, dim);
  p.bq = p.bk = p.bv = p.bo = Mat::Zero(1, dim);
  p.w = Mat::Zero(classes, dim);
  p.b = Mat::Zero(1, classes);
  return p;
}

namespace {

RowVec classify(const RowVec& z, const Mat& w, const Mat& b) {
  if (w.cols() != z.size()) {
    throw ShapeError("classifier: weight " + shape_str(w.rows(), w.cols()) + " vs feature of size " +
                     std::to_string(z.size()));
  }
  Mat logits = (z * w.transpose()) + b;
  return softmax_rows(logits).row(0);
}

}  // namespace

RowVec linear_probe_forward(const RowVec& cls, const ProbeParams& p) { return classify(cls, p.w, p.b); }

AttnPoolOutput attention_pool(const TokenSequence& seq, const AttnPoolParams& p) {
  const Eigen::Index n = seq.patches.rows();
  if (n == 0) throw ParameterError("attention_pool: no patch tokens");
  const int d = p.dim();
  if (seq.cls.size() != d || seq.patches.cols() != d) {
    throw ShapeError("attention_pool: tokens of width " + std::to_string(seq.cls.size()) + " vs head width " +
                     std::to_string(d));
  }
  const int dh = d / p.num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  AttnPoolOutput out;
  out.query = seq.cls * p.wq.transpose() + p.bq;
  out.keys = seq.patches * p.wk.transpose();
  out.keys.rowwise() += p.bk.row(0);
  out.values = seq.patches * p.wv.transpose();
  out.values.rowwise() += p.bv.row(0);
  out.context.resize(d);
  for (int h = 0; h < p.num_heads; ++h) {
    const Mat scores = (out.query.segment(h * dh, dh) * out.keys.middleCols(h * dh, dh).transpose()) * scale;
    RowVec a = softmax_rows(scores).row(0);
    out.context.segment(h * dh, dh) = a * out.values.middleCols(h * dh, dh);
    out.weights.push_back(std::move(a));
  }
  out.h = out.context * p.wo.transpose() + p.bo;
  return out;
}

RowVec attnpool_forward(const TokenSequence& seq, const AttnPoolParams& p) {
  return classify(attention_pool(seq, p).h, p.w, p.b);
}

namespace {

void check_label(int label, int classes) {
  if (label < 0 || label >= classes) {
    throw ParameterError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
  }
}

// Cross-entropy of one item; writes d(loss)/d(logits).
double item_loss(const RowVec& probs, int label, RowVec& dlogits) {
  dlogits = probs;
  dlogits(label) -= 1.0;
  return -std::log(std::max(probs(label), 1e-300));
}

template <class P, class ItemFn>
double batch_gradients(std::span<const LabeledTokens> batch, const P& p, P& grads, ItemFn&& item_fn) {
  if (batch.empty()) throw ParameterError("head gradients: empty batch");
  std::vector<P> per_item(batch.size());
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    P g = zeros_like(p);
    losses[i] = item_fn(batch[i], g);
    per_item[i] = std::move(g);
  });
  grads = zeros_like(p);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    axpy(grads, 1.0, per_item[i]);
    loss += losses[i];
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  scale(grads, inv);
  return loss * inv;
}

}  // namespace

double probe_gradients(std::span<const LabeledTokens> batch, const ProbeParams& p, ProbeParams& grads) {
  return batch_gradients(batch, p, grads, [&](const LabeledTokens& item, ProbeParams& g) {
    check_label(item.label, p.classes());
    RowVec dlogits;
    const double loss = item_loss(linear_probe_forward(item.seq.cls, p), item.label, dlogits);
    g.w += dlogits.transpose() * item.seq.cls;
    g.b += dlogits;
    return loss;
  });
}

double attnpool_gradients(std::span<const LabeledTokens> batch, const AttnPoolParams& p, AttnPoolParams& grads) {
  return batch_gradients(batch, p, grads, [&](const LabeledTokens& item, AttnPoolParams& g) {
    check_label(item.label, p.classes());
    const AttnPoolOutput fwd = attention_pool(item.seq, p);
    RowVec dlogits;
    const double loss = item_loss(classify(fwd.h, p.w, p.b), item.label, dlogits);
    g.w += dlogits.transpose() * fwd.h;
    g.b += dlogits;
    if (!p.projected) return loss;

    const int d = p.dim(), dh = d / p.num_heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const RowVec dh_vec = dlogits * p.w;
    g.wo += dh_vec.transpose() * fwd.context;
    g.bo += dh_vec;
    const RowVec dctx = dh_vec * p.wo;
    RowVec dq(d);
    Mat dk(fwd.keys.rows(), d), dv(fwd.values.rows(), d);
    for (int h = 0; h < p.num_heads; ++h) {
      const RowVec& a = fwd.weights[static_cast<std::size_t>(h)];
      const auto vh = fwd.values.middleCols(h * dh, dh);
      const auto kh = fwd.keys.middleCols(h * dh, dh);
      const RowVec dc = dctx.segment(h * dh, dh);
      const RowVec da = dc * vh.transpose();
      dv.middleCols(h * dh, dh) = a.transpose() * dc;
      RowVec ds = a.cwiseProduct(da);
      ds -= a * ds.sum();
      ds *= sc;
      dq.segment(h * dh, dh) = ds * kh;
      dk.middleCols(h * dh, dh) = ds.transpose() * fwd.query.segment(h * dh, dh);
    }
    g.wq += dq.transpose() * item.seq.cls;
    g.bq += dq;
    g.wk += dk.transpose() * item.seq.patches;
    g.bk += dk.colwise().sum();
    g.wv += dv.transpose() * item.seq.patches;
    g.bv += dv.colwise().sum();
    return loss;
  });
}

void HeadTrainConfig::validate() const {
  if (!(lr >= 0)) throw ConfigError("head: lr must be >= 0");
  if (epochs < 1) throw ConfigError("head: epochs must be >= 1");
  if (batch < 1) throw ConfigError("head: batch must be >= 1");
  if (!(weight_decay >= 0)) throw ConfigError("head: weight_decay must be >= 0");
  if (num_heads < 1) throw ConfigError("head: num_heads must be >= 1");
}

json head_config_to_json(const HeadTrainConfig& c) {
  return {{"epochs", c.epochs}, {"lr", c.lr},       {"weight_decay", c.weight_decay}, {"batch", c.batch},
          {"seed", c.seed},     {"num_heads", c.num_heads}, {"projected", c.projected}};
}

HeadTrainConfig head_config_from_json(const json& j) {
  static const std::set<std::string> known = {"epochs", "lr", "weight_decay", "batch", "seed", "num_heads", "projected"};
  if (!j.is_object()) throw ConfigError("head config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ConfigError("head config: unknown field '" + k + "'");
  }
  HeadTrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch = j.value("batch", c.batch);
    c.seed = j.value("seed", c.seed);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.projected = j.value("projected", c.projected);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("head config: ") + e.what());
  }
  c.validate();
  return c;
}

RowVec predict_proba(const TrainedHead& head, const TokenSequence& seq) {
  return head.mode == HeadMode::LINEAR ? linear_probe_forward(seq.cls, head.linear) : attnpool_forward(seq, head.attn);
}

int predict(const TrainedHead& head, const TokenSequence& seq) { return argmax(predict_proba(head, seq)); }

namespace {

double evaluate_bacc(const TrainedHead& head, const std::vector<LabeledTokens>& data) {
  std::vector<int> truth(data.size()), pred(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    truth[i] = data[i].label;
    pred[i] = predict(head, data[i].seq);
  });
  return balanced_accuracy(truth, pred, head.classes).bacc;
}

double selection_loss(const TrainedHead& head, const std::vector<LabeledTokens>& items) {
  if (head.mode == HeadMode::LINEAR) {
    ProbeParams g;
    return probe_gradients(items, head.linear, g);
  }
  AttnPoolParams g;
  return attnpool_gradients(items, head.attn, g);
}

}  // namespace

TrainedHead train_head(const std::vector<LabeledTokens>& train, const std::vector<LabeledTokens>& val, int classes,
                       HeadMode mode, const HeadTrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ParameterError("train_head: empty training set");
  std::vector<bool> seen(static_cast<std::size_t>(std::max(classes, 0)), false);
  int distinct = 0;
  for (const auto& item : train) {
    check_label(item.label, classes);
    if (!seen[static_cast<std::size_t>(item.label)]) {
      seen[static_cast<std::size_t>(item.label)] = true;
      ++distinct;
    }
  }
  if (distinct < 2) throw ParameterError("train_head: training data holds a single class");

  const int dim = static_cast<int>(train.front().seq.cls.size());
  TrainedHead head;
  head.mode = mode;
  head.classes = classes;
  RngStream init_rng(cfg.seed, 0x4ead);
  if (mode == HeadMode::LINEAR) {
    head.linear = ProbeParams::zeros(classes, dim);
  } else {
    head.attn = AttnPoolParams::init(classes, dim, cfg.num_heads, cfg.projected, init_rng);
  }
  const std::vector<LabeledTokens>& selection = val.empty() ? train : val;

  Adam opt(cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay);
  TrainedHead best = head;
  best.best_val_bacc = -1.0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train.size());
  std::vector<LabeledTokens> batch;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngStream shuffle_rng = RngStream(cfg.seed, 0x5bf1).child(static_cast<std::uint64_t>(epoch));
    shuffle_indices(order, shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      batch.clear();
      for (std::size_t k = start; k < end; ++k) batch.push_back(train[order[k]]);
      double loss;
      if (mode == HeadMode::LINEAR) {
        ProbeParams g;
        loss = probe_gradients(batch, head.linear, g);
        opt.step(head.linear, g);
      } else {
        AttnPoolParams g;
        loss = attnpool_gradients(batch, head.attn, g);
        opt.step(head.attn, g);
      }
      loss_sum += loss * static_cast<double>(end - start);
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(train.size());
    std::vector<int> truth(train.size()), pred(train.size());
    parallel_for(train.size(), [&](std::size_t i) {
      truth[i] = train[i].label;
      pred[i] = predict(head, train[i].seq);
    });
    stats.train_accuracy = balanced_accuracy(truth, pred, classes).accuracy;
    stats.val_bacc = evaluate_bacc(head, selection);
    stats.val_loss = selection_loss(head, selection);
    head.curve.push_back(stats);
    // Ties on BACC go to the lower validation loss: a saturated BACC says
    // nothing about the margin.
    if (stats.val_bacc > best.best_val_bacc ||
        (stats.val_bacc == best.best_val_bacc && stats.val_loss < best_val_loss)) {
      best_val_loss = stats.val_loss;
      best.linear = head.linear;
      best.attn = head.attn;
      best.best_val_bacc = stats.val_bacc;
      best.best_epoch = epoch;
    }
  }
  best.curve = head.curve;
  return best;
}

CheckpointFile head_checkpoint(const TrainedHead& head) {
  CheckpointFile ck;
  ck.kind = "head";
  ck.meta = {{"mode", to_string(head.mode)}, {"classes", head.classes}, {"best_epoch", head.best_epoch},
             {"best_val_bacc", head.best_val_bacc}};
  if (head.mode == HeadMode::LINEAR) {
    append_params(ck, "linear.", head.linear);
  } else {
    ck.meta["num_heads"] = head.attn.num_heads;
    ck.meta["projected"] = head.attn.projected;
    append_params(ck, "attn.", head.attn);
  }
  return ck;
}

TrainedHead head_from_checkpoint(const CheckpointFile& ck) {
  if (ck.kind != "head") throw ConfigError("expected a head checkpoint, got '" + ck.kind + "'");
  TrainedHead head;
  head.mode = head_mode_from_string(ck.meta.at("mode").get<std::string>());
  head.classes = ck.meta.at("classes").get<int>();
  head.best_epoch = ck.meta.value("best_epoch", 0);
  head.best_val_bacc = ck.meta.value("best_val_bacc", 0.0);
  if (head.mode == HeadMode::LINEAR) {
    const Mat& w = ck.get("linear.w");
    head.linear = ProbeParams::zeros(static_cast<int>(w.rows()), static_cast<int>(w.cols()));
    load_params(ck, "linear.", head.linear);
  } else {
    const Mat& w = ck.get("attn.w");
    RngStream rng(0, 0);
    head.attn = AttnPoolParams::init(static_cast<int>(w.rows()), static_cast<int>(w.cols()),
                                     ck.meta.at("num_heads").get<int>(), ck.meta.at("projected").get<bool>(), rng);
    load_params(ck, "attn.", head.attn);
  }
  return head;
}

json attention_dump(const std::vector<LabeledTokens>& items, const AttnPoolParams& p) {
  json out = json::array();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const AttnPoolOutput fwd = attention_pool(items[i].seq, p);
    json heads = json::array();
    for (const RowVec& a : fwd.weights) heads.push_back(std::vector<double>(a.data(), a.data() + a.size()));
    out.push_back({{"item", i}, {"label", items[i].label}, {"weights", heads}});
  }
  return out;
}

}  // namespace tokenhier
