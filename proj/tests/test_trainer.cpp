#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "doctest.h"
#include "groundling/losses.hpp"
#include "groundling/trainer.hpp"

using namespace groundling;
namespace fs = std::filesystem;

namespace {

// One shared on-disk dataset for the whole suite. 28 training scenes give a
// usable mix: roughly a third single-object, the rest carrying a triplet.
struct SharedData {
  std::string root;
  SharedData() {
    root = (fs::temp_directory_path() /
            ("groundling_trainer_" + std::to_string(getpid())))
               .string();
    Vocab vocab = Vocab::standard();
    Dataset train;
    train.vocab = vocab;
    train.scenes = generate_dataset(vocab, {7, 28, 0.5, 0});
    train.word_counts = count_words(vocab, train.scenes);
    write_dataset(root + "/train", train);
    Dataset held;
    held.vocab = vocab;
    held.scenes = generate_dataset(vocab, {8, 12, 0.5, 1000});
    held.word_counts = count_words(vocab, held.scenes);
    write_dataset(root + "/heldout", held);

    Dataset solo;
    solo.vocab = vocab;
    solo.scenes = generate_dataset(vocab, {9, 1, 0.5, 2000});
    solo.word_counts = count_words(vocab, solo.scenes);
    write_dataset(root + "/solo/train", solo);
    write_dataset(root + "/solo/heldout", solo);
  }
  ~SharedData() {
    std::error_code ec;
    fs::remove_all(root, ec);
  }
};

const std::string& data_root() {
  static SharedData d;
  return d.root;
}

RunConfig tiny_cfg() {
  RunConfig cfg;
  cfg.data_dir = data_root();
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.lang_layers = 2;
  cfg.ffn = 16;
  cfg.d_rel = 4;
  cfg.d_common = 8;
  cfg.trainable_top_lang = 1;
  // batch 999 collapses every stage to one full-dataset step per epoch, so a
  // "fixed batch" in the examples below is simply the whole usable set.
  cfg.classify = {1, 1e-3, 999};
  cfg.mask = {1, 1e-3, 999};
  cfg.ground = {1, 1e-3, 999};
  cfg.relate = {1, 1e-3, 999};
  cfg.search = {1, 1e-3, 999};
  return cfg;
}

template <typename S>
std::map<std::string, Tensor<S>> copy_tensors(const ParamStore<S>& ps) {
  return ps.tensors;
}

template <typename S>
bool same_bytes(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape) return false;
  return std::memcmp(a.data.data(), b.data.data(),
                     sizeof(S) * size_t(a.numel())) == 0;
}

double frob_err(const Tensor<float>& R) {
  double n = 0;
  for (int64_t i = 0; i < R.numel(); ++i)
    n += double(R.data[i]) * double(R.data[i]);
  return std::abs(std::sqrt(n) - 1.0);
}

}  // namespace

TEST_CASE("classification stage improves on its fixed batch") {
  RunConfig cfg = tiny_cfg();
  cfg.classify.epochs = 25;
  StageTrainer<float> t(cfg, "classify", "");
  CHECK(t.steps_per_epoch() == 1);
  double first = t.step_once().loss;
  CHECK(first == doctest::Approx(std::log(20.0)).epsilon(0.5));
  double last = first;
  while (!t.finished()) last = t.step_once().loss;
  CHECK(std::isfinite(last));
  CHECK(last < first);
}

TEST_CASE("masked prediction loss strictly decreases on a fixed batch") {
  Dataset train = read_dataset(data_root() + "/train");
  RunConfig cfg = tiny_cfg();
  ModelDims dims = ModelDims::from(cfg);
  ParamStore<float> ps = build_stage_params<float>(cfg, "mask", train.vocab.size());
  apply_stage_freeze(ps, "mask", dims, cfg.trainable_top_lang);

  int B = 8;
  std::vector<int64_t> base;
  for (int b = 0; b < B; ++b)
    for (int tok : train.scenes[size_t(b)].tokens) base.push_back(tok);
  // Mask every third content token; the set is fixed across all steps.
  std::vector<int64_t> tokens = base, positions, targets;
  int seen = 0;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 4) continue;
    if (seen++ % 3 == 0) {
      positions.push_back(int64_t(i));
      targets.push_back(tokens[i]);
      tokens[i] = Vocab::kMask;
    }
  }
  REQUIRE(positions.size() > 4);

  AdamState<float> adam;
  adam.cfg.lr = 1e-3;
  double prev = 1e30;
  for (int it = 0; it < 50; ++it) {
    Graph<float> g;
    Net<float> net(g, ps, dims);
    Var<float> am = g.constant(pad_mask_tensor<float>(tokens, B, kMaxTokens));
    Var<float> l3 = language_encode(net, tokens, B, kMaxTokens, am);
    Var<float> loss = masked_ce(net, mlm_logits(net, l3, B, kMaxTokens),
                                positions, targets);
    double lv = double(loss.val().item());
    CHECK(lv < prev);
    prev = lv;
    auto grads = g.backpropagate(loss);
    adam.step(ps.tensors, grads, ps.trainable);
  }
  CHECK(prev < std::log(double(train.vocab.size())));
}

TEST_CASE("mask stage skips a batch with nothing masked") {
  RunConfig cfg = tiny_cfg();
  cfg.mask_prob = 0.0;
  StageTrainer<float> t(cfg, "mask", "");
  auto before = copy_tensors(t.params());
  StepOutcome o = t.step_once();
  CHECK(!o.applied);
  CHECK(o.loss == 0.0);
  for (const auto& [name, tensor] : t.params().tensors)
    CHECK(same_bytes(tensor, before.at(name)));
}

TEST_CASE("mask stage trains through the step loop") {
  RunConfig cfg = tiny_cfg();
  cfg.mask.epochs = 40;
  StageTrainer<float> t(cfg, "mask", "");
  double first = t.step_once().loss;
  double last = first;
  while (!t.finished()) last = t.step_once().loss;
  CHECK(last < first);
}

TEST_CASE("grounding stage freeze plan holds frozen bytes while heads move") {
  RunConfig cfg = tiny_cfg();
  StageTrainer<float> t(cfg, "ground", "");
  auto before = copy_tensors(t.params());
  StepOutcome o = t.step_once();
  CHECK(std::isfinite(o.loss));

  // Untouched: convolutions, embedders, position tables, every query/key
  // projection, the untrained bottom language layer, and heads of other
  // stages.
  for (const char* name :
       {"vis.conv1.w", "vis.conv2.w", "vis.conv3.w", "vis.embed.w", "vis.pos",
        "vis.attn.q.w", "vis.attn.q.b", "vis.attn.k.w", "vis.attn.k.b",
        "lang.tok", "lang.pos", "lang.L0.attn.v.w", "lang.L0.ffn.1.w",
        "lang.L1.attn.q.w", "lang.L1.attn.k.w", "mlm.w", "cls.w"})
    CHECK_MESSAGE(same_bytes(t.params().get(name), before.at(name)), name);

  // Moved: grounding heads, visual attention values/output, the top language
  // layer outside its query/key projections.
  for (const char* name :
       {"ground.pv.w", "ground.pl.w", "ground.pl.b", "vis.attn.v.w",
        "vis.attn.o.w", "lang.L1.attn.v.w", "lang.L1.ffn.1.w"})
    CHECK_MESSAGE(!same_bytes(t.params().get(name), before.at(name)), name);
}

TEST_CASE("grounding stage loss decreases over repeated steps") {
  RunConfig cfg = tiny_cfg();
  cfg.ground.epochs = 60;
  StageTrainer<float> t(cfg, "ground", "");
  double first = t.step_once().loss;
  double last = first;
  while (!t.finished()) last = t.step_once().loss;
  CHECK(last < first);
}

TEST_CASE("one-sided grounding configuration still trains") {
  RunConfig cfg = tiny_cfg();
  cfg.loss_v = false;
  cfg.ground.epochs = 5;
  StageTrainer<float> t(cfg, "ground", "");
  double first = t.step_once().loss;
  double last = first;
  while (!t.finished()) last = t.step_once().loss;
  CHECK(std::isfinite(last));
  CHECK(last < first);
}

TEST_CASE("duplicate images in a grounding batch keep the loss finite") {
  Dataset train = read_dataset(data_root() + "/train");
  RunConfig cfg = tiny_cfg();
  ModelDims dims = ModelDims::from(cfg);
  ParamStore<float> ps = build_stage_params<float>(cfg, "ground", train.vocab.size());

  Tensor<float> img = read_ppm(image_path(data_root() + "/train",
                                          train.scenes[0].id));
  std::vector<Tensor<float>> imgs = {img, img};
  std::vector<int64_t> tokens;
  for (int tok : train.scenes[0].tokens) tokens.push_back(tok);
  for (int tok : train.scenes[1].tokens) tokens.push_back(tok);

  Graph<float> g;
  Net<float> net(g, ps, dims);
  Var<float> v3 = visual_encode(net, g.constant(batch_image_rows<float>(imgs)), 2);
  Var<float> am = g.constant(pad_mask_tensor<float>(tokens, 2, kMaxTokens));
  Var<float> l3 = language_encode(net, tokens, 2, kMaxTokens, am);
  Tensor<float> mask = scoring_token_mask<float>(tokens, 2, kMaxTokens, false);
  Var<float> scores = grounding_score_matrix(net, v3, l3, mask, 2, kMaxTokens);
  Var<float> loss = grounding_loss(net, scores, 0.1, true, true);
  CHECK(std::isfinite(double(loss.val().item())));
}

TEST_CASE("relate stage with zero loss weights applies a no-op step") {
  RunConfig cfg = tiny_cfg();
  cfg.w_rel = 0.0;
  cfg.w_obj = 0.0;
  cfg.w_aux = 0.0;
  StageTrainer<float> t(cfg, "relate", "");
  auto before = copy_tensors(t.params());
  StepOutcome o = t.step_once();
  CHECK(o.loss == 0.0);
  for (const auto& [name, tensor] : t.params().tensors)
    CHECK_MESSAGE(same_bytes(tensor, before.at(name)), name);
}

TEST_CASE("relate stage trains and keeps relation matrices unit norm") {
  RunConfig cfg = tiny_cfg();
  cfg.relate.epochs = 200;
  StageTrainer<float> t(cfg, "relate", "");
  double first = t.step_once().loss;
  for (int p = 0; p < kNumPredicates; ++p)
    CHECK(frob_err(t.params().get("rel.R" + std::to_string(p))) <= 1e-6);
  double last = first;
  while (!t.finished()) {
    last = t.step_once().loss;
    for (int p = 0; p < kNumPredicates; ++p)
      CHECK(frob_err(t.params().get("rel.R" + std::to_string(p))) <= 1e-6);
  }
  CHECK(last < first);
}

TEST_CASE("single-predicate class set scores zero which-relation loss") {
  RunConfig cfg = tiny_cfg();
  ModelDims dims = ModelDims::from(cfg);
  ParamStore<float> ps = build_stage_params<float>(cfg, "relate", 59);
  Graph<float> g;
  Net<float> net(g, ps, dims);
  Var<float> u = g.constant(Tensor<float>::from({1, 4}, {1.f, 2.f, 0.f, -1.f}));
  Var<float> v = g.constant(Tensor<float>::from({1, 4}, {0.5f, 0.f, 1.f, 2.f}));
  Var<float> loss =
      relation_loss_over(net, {u, u}, {v, v}, {3, 3}, 1.0, {3});
  CHECK(double(loss.val().item()) == 0.0);
  CHECK_THROWS_AS(relation_loss_over(net, {u}, {v}, {3}, 1.0, {1, 2}),
                  UnknownPredicate);
}

TEST_CASE("search heads stage trains only the heads") {
  RunConfig cfg = tiny_cfg();
  cfg.search.epochs = 100;
  // A search-heads run normally starts from a relate checkpoint; training
  // against the fresh random backbone exercises the same freeze contract.
  StageTrainer<float> t(cfg, "search-heads", "");
  auto before = copy_tensors(t.params());
  double first = t.step_once().loss;
  double last = first;
  while (!t.finished()) last = t.step_once().loss;
  CHECK(last < first);
  bool head_moved = false;
  for (const auto& [name, tensor] : t.params().tensors) {
    if (name.rfind("search.", 0) == 0) {
      if (!same_bytes(tensor, before.at(name))) head_moved = true;
    } else {
      CHECK_MESSAGE(same_bytes(tensor, before.at(name)), name);
    }
  }
  CHECK(head_moved);
}

TEST_CASE("search step on a single pair is exactly zero") {
  RunConfig cfg = tiny_cfg();
  cfg.data_dir = data_root() + "/solo";
  StageTrainer<float> t(cfg, "search-heads", "");
  StepOutcome o = t.step_once();
  CHECK(o.loss == 0.0);
}

TEST_CASE("resume continues the exact trajectory") {
  RunConfig cfg = tiny_cfg();
  cfg.classify.epochs = 15;
  std::string mid = data_root() + "/mid.ckpt";
  std::string a_path = data_root() + "/a.ckpt";
  std::string b_path = data_root() + "/b.ckpt";
  std::string c_path = data_root() + "/c.ckpt";

  StageTrainer<float> a(cfg, "classify", "");
  for (int i = 0; i < 5; ++i) a.step_once();
  save_checkpoint(mid, a.snapshot());
  for (int i = 0; i < 10; ++i) a.step_once();
  save_checkpoint(a_path, a.snapshot());

  StageTrainer<float> b(cfg, "classify", mid);
  CHECK(b.epoch() == 5);
  for (int i = 0; i < 10; ++i) b.step_once();
  save_checkpoint(b_path, b.snapshot());

  StageTrainer<float> c(cfg, "classify", "");
  for (int i = 0; i < 15; ++i) c.step_once();
  save_checkpoint(c_path, c.snapshot());

  std::string bytes_a = read_file(a_path);
  CHECK(bytes_a == read_file(b_path));
  CHECK(bytes_a == read_file(c_path));
}

TEST_CASE("stage transition inherits the trunk and swaps heads") {
  RunConfig cfg = tiny_cfg();
  std::string cls_path = data_root() + "/cls.ckpt";
  std::string rel_path = data_root() + "/rel.ckpt";

  StageTrainer<float> cls(cfg, "classify", "");
  cls.step_once();
  Checkpoint cls_ck = cls.snapshot();
  save_checkpoint(cls_path, cls_ck);

  StageTrainer<float> gnd(cfg, "ground", cls_path);
  CHECK(same_bytes(gnd.params().get("vis.conv1.w"),
                   cls_ck.params.get("vis.conv1.w")));
  CHECK(gnd.params().has("ground.pv.w"));
  CHECK(!gnd.params().has("rel.R0"));

  StageTrainer<float> rel(cfg, "relate", cls_path);
  CHECK(rel.params().names_with_prefix("ground.").empty());
  CHECK(rel.params().has("rel.R0"));
  CHECK(frob_err(rel.params().get("rel.R0")) <= 1e-6);
  rel.step_once();
  save_checkpoint(rel_path, rel.snapshot());

  // Search heads need the relational trunk, so a classify checkpoint is not
  // enough.
  CHECK_THROWS_AS(StageTrainer<float>(cfg, "search-heads", cls_path),
                  FormatError);
  StageTrainer<float> sh(cfg, "search-heads", rel_path);
  CHECK(same_bytes(sh.params().get("rel.cross.q.w"),
                   rel.snapshot().params.get("rel.cross.q.w")));
}

TEST_CASE("held-out accuracy helper scores single-object scenes") {
  RunConfig cfg = tiny_cfg();
  cfg.classify.epochs = 1;
  StageTrainer<float> t(cfg, "classify", "");
  double acc = t.heldout_class_accuracy();
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
}
