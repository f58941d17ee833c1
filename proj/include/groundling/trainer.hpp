#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "groundling/adam.hpp"
#include "groundling/checkpoint.hpp"
#include "groundling/config.hpp"
#include "groundling/dataset_io.hpp"
#include "groundling/losses.hpp"
#include "groundling/model.hpp"
#include "groundling/rng.hpp"

namespace groundling {

inline const StageConfig& stage_settings(const RunConfig& cfg,
                                         const std::string& stage) {
  if (stage == "classify") return cfg.classify;
  if (stage == "mask") return cfg.mask;
  if (stage == "ground") return cfg.ground;
  if (stage == "relate") return cfg.relate;
  if (stage == "search-heads") return cfg.search;
  throw UsageError("unknown stage: " + stage);
}

// The tensors a given stage's model carries. Later stages attach their own
// modules; the grounding projection heads exist only during stage "ground"
// and are dropped afterwards.
template <typename S>
ParamStore<S> build_stage_params(const RunConfig& cfg, const std::string& stage,
                                 int vocab_size) {
  ModelDims dims = ModelDims::from(cfg);
  ParamStore<S> ps;
  init_backbone_params(ps, dims, vocab_size, cfg.seed_init);
  if (stage == "ground") {
    init_grounding_params(ps, dims, cfg.seed_init);
  } else if (stage == "relate") {
    init_relational_params(ps, dims, cfg.seed_init);
  } else if (stage == "search-heads") {
    init_relational_params(ps, dims, cfg.seed_init);
    init_search_params(ps, dims, cfg.seed_init);
  } else if (stage != "classify" && stage != "mask") {
    throw UsageError("unknown stage: " + stage);
  }
  return ps;
}

// Scene subset a stage trains on: classification wants single-object scenes,
// relation stages want scenes that carry a triplet.
inline std::vector<int> stage_scene_filter(const std::string& stage,
                                           const std::vector<Scene>& scenes) {
  std::vector<int> out;
  for (size_t i = 0; i < scenes.size(); ++i) {
    bool ok = true;
    if (stage == "classify") ok = scenes[i].objects.size() == 1;
    if (stage == "relate") ok = !scenes[i].triplets.empty();
    if (ok) out.push_back(int(i));
  }
  return out;
}

struct StepOutcome {
  double loss = 0;
  bool applied = true;     // false: nothing to learn from (no masked tokens)
  int anchors_skipped = 0; // which-pair anchors that found no negative
};

template <typename S>
class StageTrainer {
 public:
  StageTrainer(const RunConfig& cfg, std::string stage,
               const std::string& from_checkpoint)
      : cfg_(cfg),
        stage_(std::move(stage)),
        dims_(ModelDims::from(cfg)),
        settings_(stage_settings(cfg_, stage_)) {
    train_ = read_dataset(cfg_.data_dir + "/train");
    heldout_ = read_dataset(cfg_.data_dir + "/heldout");
    usable_ = stage_scene_filter(stage_, train_.scenes);
    if (usable_.empty())
      throw DataError("no usable training scenes for stage " + stage_);
    batch_ = std::min(settings_.batch, int(usable_.size()));
    steps_per_epoch_ = int(usable_.size()) / batch_;

    ps_ = build_stage_params<S>(cfg_, stage_, train_.vocab.size());
    if (!from_checkpoint.empty()) {
      Checkpoint c = load_checkpoint(from_checkpoint);
      if (c.stage == stage_) {
        restore_resume(c);
      } else {
        std::vector<std::string> required = {"vis.", "cls.", "lang.", "mlm."};
        if (stage_ == "search-heads") required.push_back("rel.");
        merge_params_partial(ps_, c.params, required);
      }
    }
    apply_stage_freeze(ps_, stage_, dims_, cfg_.trainable_top_lang);
    adam_.cfg.lr = settings_.lr;
    adam_.cfg.beta1 = cfg_.beta1;
    adam_.cfg.beta2 = cfg_.beta2;
    adam_.cfg.eps = cfg_.adam_eps;
    adam_.cfg.weight_decay = cfg_.weight_decay;
    if (resumed_adam_t_ >= 0) adam_.t = resumed_adam_t_;
    cache_images();
  }

  int epochs_total() const { return settings_.epochs; }
  int steps_per_epoch() const { return steps_per_epoch_; }
  int epoch() const { return epoch_; }
  bool finished() const { return epoch_ >= settings_.epochs; }
  ParamStore<S>& params() { return ps_; }
  const Dataset& heldout() const { return heldout_; }
  const Dataset& train_data() const { return train_; }

  StepOutcome step_once() {
    std::vector<int> batch = batch_indices();
    int64_t global_step = int64_t(epoch_) * steps_per_epoch_ + step_;
    StepOutcome out;
    if (stage_ == "classify") out = classify_step(batch);
    else if (stage_ == "mask") out = mask_step(batch, global_step);
    else if (stage_ == "ground") out = ground_step(batch);
    else if (stage_ == "relate") out = relate_step(batch);
    else out = search_step(batch);
    ++step_;
    if (step_ >= steps_per_epoch_) {
      step_ = 0;
      ++epoch_;
    }
    return out;
  }

  // Remaining epochs; appends one line per epoch to `log`.
  void run(std::ostream& log) {
    while (!finished()) {
      int at_epoch = epoch_;
      double sum = 0;
      int n = 0, skipped = 0, idle = 0;
      while (epoch_ == at_epoch && !finished()) {
        StepOutcome o = step_once();
        sum += o.loss;
        ++n;
        skipped += o.anchors_skipped;
        if (!o.applied) ++idle;
      }
      char line[160];
      std::snprintf(line, sizeof line,
                    "epoch %d/%d  mean_loss %.6f  steps %d  idle %d  "
                    "anchors_skipped %d",
                    at_epoch + 1, settings_.epochs, n ? sum / n : 0.0, n, idle,
                    skipped);
      log << line << "\n";
      log.flush();
    }
  }

  Checkpoint snapshot() const {
    Checkpoint c;
    c.stage = stage_;
    c.params = ps_.template cast<float>();
    for (const auto& [name, arr] : adam_.m) {
      Tensor<float> t;
      t.shape = ps_.get(name).shape;
      t.data.resize(arr.size());
      for (int64_t i = 0; i < arr.size(); ++i) t.data[i] = float(arr[i]);
      c.params.put("opt.m." + name, std::move(t));
    }
    for (const auto& [name, arr] : adam_.v) {
      Tensor<float> t;
      t.shape = ps_.get(name).shape;
      t.data.resize(arr.size());
      for (int64_t i = 0; i < arr.size(); ++i) t.data[i] = float(arr[i]);
      c.params.put("opt.v." + name, std::move(t));
    }
    c.params.put("opt.t", Tensor<float>::scalar(float(adam_.t)));
    c.config_text = emit_config(cfg_);
    c.rng_states["epoch"] = uint64_t(epoch_);
    c.rng_states["step"] = uint64_t(step_);
    c.rng_states["adam_t"] = uint64_t(adam_.t);
    return c;
  }

  // Fraction of held-out single-object scenes whose class logits argmax to
  // the true label.
  double heldout_class_accuracy() {
    std::vector<int> ids = stage_scene_filter("classify", heldout_.scenes);
    if (ids.empty()) return 0.0;
    int hit = 0;
    const int chunk = 16;
    for (size_t at = 0; at < ids.size(); at += chunk) {
      int B = int(std::min(ids.size() - at, size_t(chunk)));
      std::vector<Tensor<float>> imgs;
      for (int b = 0; b < B; ++b)
        imgs.push_back(heldout_image(ids[at + b]));
      Graph<S> g;
      Net<S> net(g, ps_, dims_);
      Var<S> v3 = visual_encode(net, g.constant(batch_image_rows<S>(imgs)), B);
      Var<S> logits = class_logits(net, visual_pool(net, v3, B));
      const Tensor<S>& lv = logits.val();
      for (int b = 0; b < B; ++b) {
        int best = 0;
        for (int c = 1; c < kNumObjectClasses; ++c)
          if (lv.data[b * kNumObjectClasses + c] >
              lv.data[b * kNumObjectClasses + best])
            best = c;
        if (best == heldout_.scenes[size_t(ids[at + b])].objects[0]
                        .object_class())
          ++hit;
      }
    }
    return double(hit) / double(ids.size());
  }

 private:
  void restore_resume(const Checkpoint& c) {
    merge_params(ps_, c.params);  // same stage: every model tensor required
    for (const auto& [name, t] : ps_.tensors) {
      if (c.params.has("opt.m." + name)) {
        const auto& src = c.params.get("opt.m." + name);
        auto& dst = adam_.m[name];
        dst.resize(src.numel());
        for (int64_t i = 0; i < src.numel(); ++i) dst[i] = S(src.data[i]);
      }
      if (c.params.has("opt.v." + name)) {
        const auto& src = c.params.get("opt.v." + name);
        auto& dst = adam_.v[name];
        dst.resize(src.numel());
        for (int64_t i = 0; i < src.numel(); ++i) dst[i] = S(src.data[i]);
      }
    }
    auto it = c.rng_states.find("epoch");
    if (it != c.rng_states.end()) epoch_ = int(it->second);
    it = c.rng_states.find("step");
    if (it != c.rng_states.end()) step_ = int(it->second);
    it = c.rng_states.find("adam_t");
    if (it != c.rng_states.end()) resumed_adam_t_ = int64_t(it->second);
  }

  void cache_images() {
    bool needs_images = stage_ != "mask";
    if (!needs_images) return;
    for (int idx : usable_) {
      const Scene& s = train_.scenes[size_t(idx)];
      train_images_[idx] = image_rows<S>(
          read_ppm(image_path(cfg_.data_dir + "/train", s.id)));
    }
  }

  Tensor<float> heldout_image(int idx) {
    const Scene& s = heldout_.scenes[size_t(idx)];
    return read_ppm(image_path(cfg_.data_dir + "/heldout", s.id));
  }

  std::vector<int> batch_indices() {
    if (perm_epoch_ != epoch_) {
      perm_ = usable_;
      SplitMix64 r(mix_seed(cfg_.seed_shuffle, uint64_t(epoch_)));
      r.shuffle(perm_);
      perm_epoch_ = epoch_;
    }
    std::vector<int> out(perm_.begin() + size_t(step_) * batch_,
                         perm_.begin() + size_t(step_ + 1) * batch_);
    return out;
  }

  Tensor<S> batch_images(const std::vector<int>& batch) {
    Tensor<S> out = Tensor<S>::zeros({int(batch.size()) * 1024, 3});
    int64_t per = int64_t(1024) * 3;
    for (size_t b = 0; b < batch.size(); ++b) {
      const Tensor<S>& one = train_images_.at(batch[b]);
      for (int64_t i = 0; i < per; ++i) out.data[int64_t(b) * per + i] = one.data[i];
    }
    return out;
  }

  std::vector<int64_t> batch_tokens(const std::vector<int>& batch) const {
    std::vector<int64_t> toks;
    toks.reserve(batch.size() * size_t(kMaxTokens));
    for (int idx : batch)
      for (int t : train_.scenes[size_t(idx)].tokens) toks.push_back(t);
    return toks;
  }

  void apply_grads(Graph<S>& g, Var<S> loss) {
    auto grads = g.backpropagate(loss);
    adam_.step(ps_.tensors, grads, ps_.trainable);
  }

  // Unit Frobenius projection, accumulated in double. A norm already within
  // a few ulps of 1 is left alone: dividing would only churn low bits, and a
  // zero-gradient step must leave every parameter byte untouched.
  void renormalize_relations() {
    for (int p = 0; p < kNumPredicates; ++p) {
      Tensor<S>& R = ps_.get("rel.R" + std::to_string(p));
      double n = 0;
      for (int64_t i = 0; i < R.numel(); ++i)
        n += double(R.data[i]) * double(R.data[i]);
      n = std::sqrt(n);
      if (n == 0) throw ZeroVector("relation matrix collapsed to zero");
      if (std::abs(n - 1.0) <= 4 * double(std::numeric_limits<S>::epsilon()))
        continue;
      for (int64_t i = 0; i < R.numel(); ++i)
        R.data[i] = S(double(R.data[i]) / n);
    }
  }

  StepOutcome classify_step(const std::vector<int>& batch) {
    int B = int(batch.size());
    std::vector<int64_t> labels;
    for (int idx : batch)
      labels.push_back(train_.scenes[size_t(idx)].objects[0].object_class());
    Graph<S> g;
    Net<S> net(g, ps_, dims_);
    Var<S> v3 = visual_encode(net, g.constant(batch_images(batch)), B);
    Var<S> loss =
        ce_mean(net, class_logits(net, visual_pool(net, v3, B)), labels);
    double lv = double(loss.val().item());
    apply_grads(g, loss);
    return {lv, true, 0};
  }

  StepOutcome mask_step(const std::vector<int>& batch, int64_t global_step) {
    int B = int(batch.size());
    std::vector<int64_t> tokens = batch_tokens(batch);
    SplitMix64 r(mix_seed(cfg_.seed_mask, uint64_t(global_step)));
    std::vector<int64_t> positions, targets;
    for (int64_t i = 0; i < int64_t(tokens.size()); ++i) {
      if (tokens[size_t(i)] < 4) continue;
      if (r.bernoulli(cfg_.mask_prob)) {
        positions.push_back(i);
        targets.push_back(tokens[size_t(i)]);
        tokens[size_t(i)] = Vocab::kMask;
      }
    }
    if (positions.empty()) return {0.0, false, 0};
    Graph<S> g;
    Net<S> net(g, ps_, dims_);
    Var<S> am = g.constant(pad_mask_tensor<S>(tokens, B, kMaxTokens));
    Var<S> l3 = language_encode(net, tokens, B, kMaxTokens, am);
    Var<S> loss =
        masked_ce(net, mlm_logits(net, l3, B, kMaxTokens), positions, targets);
    double lv = double(loss.val().item());
    apply_grads(g, loss);
    return {lv, true, 0};
  }

  StepOutcome ground_step(const std::vector<int>& batch) {
    int B = int(batch.size());
    std::vector<int64_t> tokens = batch_tokens(batch);
    Graph<S> g;
    Net<S> net(g, ps_, dims_);
    Var<S> v3 = visual_encode(net, g.constant(batch_images(batch)), B);
    Var<S> am = g.constant(pad_mask_tensor<S>(tokens, B, kMaxTokens));
    Var<S> l3 = language_encode(net, tokens, B, kMaxTokens, am);
    Tensor<S> mask = scoring_token_mask<S>(tokens, B, kMaxTokens,
                                           cfg_.cls_in_scores);
    Var<S> scores = grounding_score_matrix(net, v3, l3, mask, B, kMaxTokens);
    Var<S> loss = grounding_loss(net, scores, cfg_.ground_tau, cfg_.loss_l,
                                 cfg_.loss_v);
    double lv = double(loss.val().item());
    apply_grads(g, loss);
    return {lv, true, 0};
  }

  StepOutcome relate_step(const std::vector<int>& batch) {
    int B = int(batch.size());
    std::vector<int64_t> tokens = batch_tokens(batch);
    std::vector<std::pair<int, int>> subj, obj;
    std::vector<int64_t> preds, subj_cls, obj_cls;
    for (int idx : batch) {
      const Scene& s = train_.scenes[size_t(idx)];
      const Triplet& t = s.triplets[0];
      const Mention *ms = nullptr, *mo = nullptr;
      for (const Mention& m : s.mentions) {
        if (m.object == t.subject && !ms) ms = &m;
        else if (m.object == t.object) mo = &m;
      }
      if (!ms || !mo)
        throw DataError("scene " + std::to_string(s.id) +
                        " lacks subject/object mentions");
      subj.push_back({ms->tok_begin, ms->tok_end});
      obj.push_back({mo->tok_begin, mo->tok_end});
      preds.push_back(int64_t(t.predicate));
      subj_cls.push_back(s.objects[size_t(t.subject)].object_class());
      obj_cls.push_back(s.objects[size_t(t.object)].object_class());
    }

    Graph<S> g;
    Net<S> net(g, ps_, dims_);
    Var<S> v3 = visual_encode(net, g.constant(batch_images(batch)), B);
    Var<S> am = g.constant(pad_mask_tensor<S>(tokens, B, kMaxTokens));
    Var<S> l3 = language_encode(net, tokens, B, kMaxTokens, am);
    Var<S> qs = reshape(
        matmul(g.constant(span_pool_weights<S>(subj, B, kMaxTokens)), l3),
        {B, dims_.d_model});
    Var<S> qo = reshape(
        matmul(g.constant(span_pool_weights<S>(obj, B, kMaxTokens)), l3),
        {B, dims_.d_model});
    Var<S> rs = cross_attend(net, v3, qs, B);
    Var<S> ro = cross_attend(net, v3, qo, B);
    Var<S> u_all = net.linear(rs, "rel.wrel");
    Var<S> v_all = net.linear(ro, "rel.wrel");
    std::vector<Var<S>> us, vs;
    for (int i = 0; i < B; ++i) {
      us.push_back(slice(u_all, i, i + 1, 0, dims_.d_rel));
      vs.push_back(slice(v_all, i, i + 1, 0, dims_.d_rel));
    }

    bool all_skipped = false;
    std::vector<int> classes;
    if (cfg_.relation_negatives_in_batch) {
      for (int64_t p : preds)
        if (std::find(classes.begin(), classes.end(), int(p)) == classes.end())
          classes.push_back(int(p));
      std::sort(classes.begin(), classes.end());
    } else {
      for (int p = 0; p < kNumPredicates; ++p) classes.push_back(p);
    }
    Var<S> lrel = relation_loss_over(net, us, vs, preds, cfg_.relate_tau,
                                     classes);
    Var<S> lobj =
        object_contrast_loss(net, us, vs, preds, &all_skipped, cfg_.relate_tau);
    std::vector<int64_t> cls = subj_cls;
    cls.insert(cls.end(), obj_cls.begin(), obj_cls.end());
    Var<S> readouts = concat_rows<S>({rs, ro});
    Var<S> aux = ce_mean(net, object_logits(net, readouts), cls);
    Var<S> total = add(add(scale(lrel, cfg_.w_rel), scale(lobj, cfg_.w_obj)),
                       scale(aux, cfg_.w_aux));
    double lv = double(total.val().item());
    apply_grads(g, total);
    renormalize_relations();

    StepOutcome out{lv, true, 0};
    int with_neg = 0;
    for (size_t a = 0; a < preds.size(); ++a) {
      bool has = false;
      for (size_t b = 0; b < preds.size(); ++b)
        if (preds[b] != preds[a]) has = true;
      if (has) ++with_neg;
    }
    out.anchors_skipped = B - with_neg;
    return out;
  }

  StepOutcome search_step(const std::vector<int>& batch) {
    int B = int(batch.size());
    std::vector<int64_t> tokens = batch_tokens(batch);
    Graph<S> g;
    Net<S> net(g, ps_, dims_);
    Var<S> v3 = visual_encode(net, g.constant(batch_images(batch)), B);
    Var<S> am = g.constant(pad_mask_tensor<S>(tokens, B, kMaxTokens));
    Var<S> l3 = language_encode(net, tokens, B, kMaxTokens, am);
    Var<S> qi = search_image_query(net, v3, B);
    Var<S> qw = search_text_query(
        net, l3, g.constant(content_pool_weights<S>(tokens, B, kMaxTokens)), B,
        kMaxTokens);
    Var<S> loss = search_pair_loss(net, qi, qw, cfg_.search_tau);
    double lv = double(loss.val().item());
    apply_grads(g, loss);
    return {lv, true, 0};
  }

  RunConfig cfg_;
  std::string stage_;
  ModelDims dims_;
  StageConfig settings_;
  Dataset train_, heldout_;
  std::vector<int> usable_;
  std::map<int, Tensor<S>> train_images_;
  ParamStore<S> ps_;
  AdamState<S> adam_;
  int batch_ = 1;
  int steps_per_epoch_ = 1;
  int epoch_ = 0;
  int step_ = 0;
  int64_t resumed_adam_t_ = -1;
  std::vector<int> perm_;
  int perm_epoch_ = -1;
};

}  // namespace groundling
