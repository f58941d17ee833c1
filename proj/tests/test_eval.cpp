#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <unistd.h>
#include <vector>

#include "doctest.h"
#include "groundling/eval.hpp"

using namespace groundling;
namespace fs = std::filesystem;

namespace {

struct SharedData {
  std::string root;
  SharedData() {
    root = (fs::temp_directory_path() /
            ("groundling_eval_" + std::to_string(getpid())))
               .string();
    Vocab vocab = Vocab::standard();
    Dataset train;
    train.vocab = vocab;
    train.scenes = generate_dataset(vocab, {11, 10, 0.5, 0});
    train.word_counts = count_words(vocab, train.scenes);
    write_dataset(root + "/train", train);
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
  return cfg;
}

}  // namespace

TEST_CASE("zero projections give a zero score") {
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(3, 2);
  Eigen::MatrixXd l(4, 2);
  l << 1, 2, -3, 4, 0.5, -0.25, 7, 8;
  MatchMap mm = match_map(v, l, {1, 0, 1, 1});
  CHECK(mm.score == 0.0);
  CHECK(mm.m.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("a single location recovers the squared norm") {
  Eigen::MatrixXd v(1, 3);
  v << 0.3, -1.2, 2.0;
  MatchMap mm = match_map(v, v, {1});
  CHECK(mm.score == doctest::Approx(v.squaredNorm()).epsilon(1e-12));
}

TEST_CASE("each token keeps its best location") {
  Eigen::MatrixXd v(2, 2);
  v << 1, 0, 0, -2;
  Eigen::MatrixXd l(2, 2);
  l << 2, 0, 0, 1;
  // Token 0 matches location 0 at 2; token 1 peaks at location 0 with 0,
  // since location 1 scores -2.
  MatchMap mm = match_map(v, l, {1, 1});
  CHECK(mm.score == doctest::Approx(2.0).epsilon(1e-12));

  Eigen::MatrixXd basis = Eigen::MatrixXd::Identity(2, 2);
  CHECK(match_map(basis, basis, {1, 1}).score ==
        doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("the reported score equals a recomputation from the map") {
  Eigen::MatrixXd v(4, 3), l(5, 3);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 3; ++c) v(r, c) = std::sin(3.1 * r + c);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 3; ++c) l(r, c) = std::cos(1.7 * r - 2 * c);
  std::vector<uint8_t> keep = {1, 0, 1, 1, 0};
  MatchMap mm = match_map(v, l, keep);
  double again = 0;
  for (int k = 0; k < 5; ++k)
    if (keep[size_t(k)]) again += mm.m.col(k).maxCoeff();
  CHECK(mm.score == again);
}

TEST_CASE("match_map validates shapes and masks") {
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(2, 3);
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(2, 2);
  CHECK_THROWS_AS(match_map(v, l, {1, 1}), ShapeMismatch);
  Eigen::MatrixXd l2 = Eigen::MatrixXd::Zero(2, 3);
  CHECK_THROWS_AS(match_map(v, l2, {1, 1, 1}), ShapeMismatch);
  CHECK_THROWS_AS(match_map(v, l2, {0, 0}), EmptyMask);
}

TEST_CASE("caption masks keep words and optionally the leading special") {
  std::vector<int> tokens = {Vocab::kCls, 5, 7, Vocab::kSep,
                             Vocab::kPad, Vocab::kPad};
  std::vector<uint8_t> plain = caption_keep_mask(tokens, false);
  CHECK(plain == std::vector<uint8_t>({0, 1, 1, 0, 0, 0}));
  std::vector<uint8_t> with_cls = caption_keep_mask(tokens, true);
  CHECK(with_cls == std::vector<uint8_t>({1, 1, 1, 0, 0, 0}));
}

TEST_CASE("rank_of breaks ties toward the earlier index") {
  Eigen::VectorXd row(4);
  row << 1, 2, 2, 0;
  CHECK(rank_of(row, 1) == 1);
  CHECK(rank_of(row, 2) == 2);
  CHECK(rank_of(row, 0) == 3);
  CHECK(rank_of(row, 3) == 4);
}

TEST_CASE("a single pair retrieves itself") {
  Eigen::MatrixXd v(1, 2);
  v << 1, 0;
  RetrievalResult r = retrieval_eval({v}, {v}, {{1}});
  CHECK(r.i2t_r1 == 1.0);
  CHECK(r.i2t_r5 == 1.0);
  CHECK(r.t2i_r1 == 1.0);
  CHECK(r.t2i_r5 == 1.0);
}

TEST_CASE("an oracle feature map retrieves every pair") {
  const int n = 6;
  std::vector<Eigen::MatrixXd> images, captions;
  std::vector<std::vector<uint8_t>> keeps;
  for (int i = 0; i < n; ++i) {
    Eigen::MatrixXd f = Eigen::MatrixXd::Zero(1, n);
    f(0, i) = 1;
    images.push_back(f);
    captions.push_back(f);
    keeps.push_back({1});
  }
  RetrievalResult r = retrieval_eval(images, captions, keeps);
  CHECK(r.i2t_r1 == 1.0);
  CHECK(r.t2i_r1 == 1.0);
  CHECK(r.i2t_r5 == 1.0);
  CHECK(r.t2i_r5 == 1.0);
  CHECK_THROWS_AS(retrieval_eval({}, {}, {}), InvalidCount);
}

TEST_CASE("plain feature scoring agrees with the differentiable path") {
  RunConfig cfg = tiny_cfg();
  Vocab vocab = Vocab::standard();
  Dataset ds = read_dataset(data_root() + "/train");
  ParamStore<double> ps =
      build_stage_params<double>(cfg, "ground", vocab.size());
  std::vector<int> rows = {0, 1, 2, 3, 4, 5};
  const int B = int(rows.size());

  auto imgs = grounded_image_features(cfg, ps, ds, data_root() + "/train", rows);
  auto caps = grounded_caption_features(cfg, ps, ds, rows);
  std::vector<std::vector<uint8_t>> keeps;
  for (int r : rows)
    keeps.push_back(caption_keep_mask(ds.scenes[size_t(r)].tokens, false));
  RetrievalResult plain = retrieval_eval(imgs, caps, keeps);

  ModelDims dims = ModelDims::from(cfg);
  std::vector<Tensor<float>> pix;
  for (int r : rows)
    pix.push_back(
        read_ppm(image_path(data_root() + "/train", ds.scenes[size_t(r)].id)));
  std::vector<int64_t> tokens = detail::chunk_tokens(ds, rows, 0, B);
  Graph<double> g;
  Net<double> net(g, ps, dims);
  Var<double> v3 =
      visual_encode(net, g.constant(batch_image_rows<double>(pix)), B);
  Var<double> am = g.constant(pad_mask_tensor<double>(tokens, B, kMaxTokens));
  Var<double> l3 = language_encode(net, tokens, B, kMaxTokens, am);
  Tensor<double> tm = scoring_token_mask<double>(tokens, B, kMaxTokens, false);
  Var<double> scores = grounding_score_matrix(net, v3, l3, tm, B, kMaxTokens);

  for (int i = 0; i < B; ++i)
    for (int j = 0; j < B; ++j)
      CHECK(plain.scores(i, j) ==
            doctest::Approx(scores.val().data[i * B + j]).epsilon(1e-9));
}

TEST_CASE("tied predicate scores rank in id order") {
  Eigen::MatrixXd same(2, 2);
  same << 0.5, -0.25, 1.0, 0.75;
  std::vector<Eigen::MatrixXd> relations(6, same);
  Eigen::VectorXd u(2), v(2);
  u << 1, 2;
  v << -1, 3;
  auto ranked = rank_predicates(u, v, relations);
  for (int p = 0; p < 6; ++p) CHECK(ranked[size_t(p)].first == p);
  CHECK_THROWS_AS(rank_predicates(u, v, {}), UnknownPredicate);
}

TEST_CASE("the aligned matrix outranks its negation") {
  std::vector<Eigen::MatrixXd> relations = {
      Eigen::MatrixXd::Identity(2, 2), -Eigen::MatrixXd::Identity(2, 2)};
  Eigen::VectorXd u(2);
  u << 1, 1;
  auto ranked = rank_predicates(u, u, relations);
  CHECK(ranked[0].first == 0);
  CHECK(ranked[0].second == doctest::Approx(2.0));
  CHECK(ranked[1].second == doctest::Approx(-2.0));
}

TEST_CASE("unknown gold ids are rejected") {
  RelationExtract ex;
  ex.scene_rows = {0};
  ex.subj_rel = Eigen::MatrixXd::Ones(1, 2);
  ex.obj_rel = Eigen::MatrixXd::Ones(1, 2);
  ex.gold = {7};
  std::vector<Eigen::MatrixXd> relations(6, Eigen::MatrixXd::Identity(2, 2));
  CHECK_THROWS_AS(relations_top1(ex, relations), UnknownPredicate);
}

TEST_CASE("relation extraction covers exactly the triplet scenes") {
  RunConfig cfg = tiny_cfg();
  Vocab vocab = Vocab::standard();
  Dataset ds = read_dataset(data_root() + "/train");
  ParamStore<double> ps =
      build_stage_params<double>(cfg, "relate", vocab.size());
  RelationExtract ex = extract_relations(cfg, ps, ds, data_root() + "/train");
  size_t expect = 0;
  for (const Scene& s : ds.scenes)
    if (!s.triplets.empty()) ++expect;
  CHECK(ex.scene_rows.size() == expect);
  CHECK(ex.gold.size() == expect);
  REQUIRE(expect > 0);
  auto relations = relation_matrices(ps, cfg.d_rel);
  double acc = relations_top1(ex, relations);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  double oacc = objects_top1(ex, ps);
  CHECK(oacc >= 0.0);
  CHECK(oacc <= 1.0);
}

TEST_CASE("cross-stage evaluation keeps the trunk and refreshes the heads") {
  RunConfig cfg = tiny_cfg();
  Vocab vocab = Vocab::standard();
  Checkpoint ck;
  ck.stage = "classify";
  ck.params = build_stage_params<float>(cfg, "classify", vocab.size());
  ck.config_text = emit_config(cfg);

  ParamStore<float> ground =
      params_for_eval<float>(cfg, ck, "ground", vocab.size());
  const Tensor<float>& a = ground.get("vis.conv1.w");
  const Tensor<float>& b = ck.params.get("vis.conv1.w");
  CHECK(std::memcmp(a.data.data(), b.data.data(),
                    sizeof(float) * size_t(a.numel())) == 0);
  CHECK(ground.has("ground.pv.w"));

  Checkpoint same;
  same.stage = "ground";
  same.params = build_stage_params<float>(cfg, "ground", vocab.size());
  ParamStore<float> strict =
      params_for_eval<float>(cfg, same, "ground", vocab.size());
  const Tensor<float>& c = strict.get("ground.pv.w");
  const Tensor<float>& d = same.params.get("ground.pv.w");
  CHECK(std::memcmp(c.data.data(), d.data.data(),
                    sizeof(float) * size_t(c.numel())) == 0);
}
