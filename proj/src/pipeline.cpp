#include "groundling/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "groundling/analysis.hpp"
#include "groundling/search.hpp"

namespace groundling {
namespace {

namespace fs = std::filesystem;

std::string g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_report(const std::string& out_dir, const std::string& name,
                  const std::string& body) {
  fs::create_directories(out_dir);
  write_file_atomic(out_dir + "/" + name, body);
}

Eigen::VectorXd first_row(const Tensor<double>& t, int d) {
  Eigen::VectorXd out(d);
  for (int c = 0; c < d; ++c) out[c] = t.data[c];
  return out;
}

// ---------------------------------------------------------------------------
// train

template <typename S>
void train_stage_impl(const RunConfig& cfg, const std::string& stage,
                      const std::string& from, const std::string& out_dir) {
  StageTrainer<S> tr(cfg, stage, from);
  std::ostringstream csv;
  csv << "epoch,mean_loss,steps,idle,anchors_skipped\n";
  while (!tr.finished()) {
    int at_epoch = tr.epoch();
    double sum = 0;
    int n = 0, skipped = 0, idle = 0;
    while (tr.epoch() == at_epoch && !tr.finished()) {
      StepOutcome o = tr.step_once();
      sum += o.loss;
      ++n;
      skipped += o.anchors_skipped;
      if (!o.applied) ++idle;
    }
    double mean = n ? sum / n : 0.0;
    std::printf("epoch %d/%d  mean_loss %.6f  steps %d  idle %d  "
                "anchors_skipped %d\n",
                at_epoch + 1, tr.epochs_total(), mean, n, idle, skipped);
    std::fflush(stdout);
    csv << (at_epoch + 1) << ',' << g9(mean) << ',' << n << ',' << idle << ','
        << skipped << '\n';
  }
  write_report(out_dir, "steps.csv", csv.str());
  save_checkpoint(out_dir + "/checkpoint.ckpt", tr.snapshot());
  std::printf("train: wrote %s/checkpoint.ckpt\n", out_dir.c_str());
  if (stage == "classify")
    std::printf("heldout_accuracy %.6f\n", tr.heldout_class_accuracy());
}

// ---------------------------------------------------------------------------
// eval

std::vector<int> all_rows(const Dataset& ds) {
  std::vector<int> rows(ds.scenes.size());
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

void eval_retrieval(const RunConfig& cfg, const Checkpoint& ck,
                    const std::string& out_dir) {
  Vocab vocab = Vocab::standard();
  std::string dir = cfg.data_dir + "/heldout";
  Dataset ds = read_dataset(dir);
  ParamStore<double> ps =
      params_for_eval<double>(cfg, ck, "ground", vocab.size());
  std::vector<int> rows = all_rows(ds);
  auto imgs = grounded_image_features(cfg, ps, ds, dir, rows);
  auto caps = grounded_caption_features(cfg, ps, ds, rows);
  std::vector<std::vector<uint8_t>> keeps;
  for (int r : rows)
    keeps.push_back(
        caption_keep_mask(ds.scenes[size_t(r)].tokens, cfg.cls_in_scores));
  RetrievalResult r = retrieval_eval(imgs, caps, keeps);
  std::ostringstream csv;
  csv << "metric,value\n"
      << "n," << r.n << '\n'
      << "i2t_r1," << g9(r.i2t_r1) << '\n'
      << "i2t_r5," << g9(r.i2t_r5) << '\n'
      << "t2i_r1," << g9(r.t2i_r1) << '\n'
      << "t2i_r5," << g9(r.t2i_r5) << '\n';
  write_report(out_dir, "retrieval.csv", csv.str());
  std::printf("retrieval  n %d  i2t_r1 %.4f  i2t_r5 %.4f  t2i_r1 %.4f  "
              "t2i_r5 %.4f\n",
              r.n, r.i2t_r1, r.i2t_r5, r.t2i_r1, r.t2i_r5);
}

void eval_relations(const RunConfig& cfg, const Checkpoint& ck,
                    const std::string& out_dir, bool objects) {
  Vocab vocab = Vocab::standard();
  std::string dir = cfg.data_dir + "/heldout";
  Dataset ds = read_dataset(dir);
  ParamStore<double> ps =
      params_for_eval<double>(cfg, ck, "relate", vocab.size());
  RelationExtract ex = extract_relations(cfg, ps, ds, dir);
  std::ostringstream csv;
  csv << "metric,value\n";
  csv << "n," << ex.gold.size() << '\n';
  if (objects) {
    double acc = objects_top1(ex, ps);
    csv << "objects_top1," << g9(acc) << '\n';
    write_report(out_dir, "objects.csv", csv.str());
    std::printf("objects  n %zu  top1 %.4f\n", ex.gold.size(), acc);
  } else {
    double acc = relations_top1(ex, relation_matrices(ps, cfg.d_rel));
    csv << "relations_top1," << g9(acc) << '\n';
    write_report(out_dir, "relations.csv", csv.str());
    std::printf("relations  n %zu  top1 %.4f\n", ex.gold.size(), acc);
  }
}

// ---------------------------------------------------------------------------
// analyze

struct EmbedContext {
  ParamStore<double> ps;
  EmbeddingTable table;
};

EmbedContext embeddings_for(const RunConfig& cfg, const Checkpoint& ck,
                            const Vocab& vocab) {
  EmbedContext ctx{params_for_eval<double>(cfg, ck, "mask", vocab.size()), {}};
  ctx.table = vocabulary_embeddings(cfg, ctx.ps, vocab);
  return ctx;
}

Eigen::VectorXd pc1_scores(const EmbeddingTable& table) {
  PcaModel m = pca_fit(table.x);
  return pca_project(m, table.x).col(0);
}

void analyze_pca(const RunConfig& cfg, const Checkpoint& ck,
                 const std::string& out_dir) {
  Vocab vocab = Vocab::standard();
  EmbedContext ctx = embeddings_for(cfg, ck, vocab);
  PcaModel m = pca_fit(ctx.table.x);
  double total = m.eigenvalues.sum();
  std::ostringstream csv;
  csv << "component,eigenvalue,explained_fraction\n";
  for (int k = 0; k < m.eigenvalues.size(); ++k)
    csv << (k + 1) << ',' << g9(m.eigenvalues[k]) << ','
        << g9(m.eigenvalues[k] / total) << '\n';
  write_report(out_dir, "pca.csv", csv.str());
  std::ostringstream txt;
  txt << "principal components over " << ctx.table.x.rows()
      << " standardized word embeddings\n";
  txt << "total variance " << g9(total) << "\n";
  for (int k = 0; k < std::min<int>(5, int(m.eigenvalues.size())); ++k)
    txt << "pc" << (k + 1) << " eigenvalue " << g9(m.eigenvalues[k])
        << " explains " << g9(m.eigenvalues[k] / total) << "\n";
  write_report(out_dir, "pca.txt", txt.str());
  std::printf("pca  pc1 explains %.4f of variance\n", m.eigenvalues[0] / total);
}

// Correlation of PC1 scores against a per-word series. The PC1 sign is a
// convention, so the magnitude is what a comparison should use.
void analyze_correlation(const RunConfig& cfg, const Checkpoint& ck,
                         const std::string& baseline,
                         const std::string& out_dir, bool concreteness) {
  Vocab vocab = Vocab::standard();
  EmbedContext ctx = embeddings_for(cfg, ck, vocab);
  Eigen::VectorXd pc1 = pc1_scores(ctx.table);
  const int n = int(ctx.table.token_ids.size());
  Eigen::VectorXd series(n);
  std::vector<int64_t> counts;
  if (!concreteness) {
    Dataset train = read_dataset(cfg.data_dir + "/train");
    counts = train.word_counts;
  }
  for (int i = 0; i < n; ++i) {
    int id = ctx.table.token_ids[size_t(i)];
    series[i] = concreteness ? double(vocab.entry(id).concreteness)
                             : double(counts[size_t(id)]);
  }
  double r = pearson_r(pc1, series);

  const char* series_name = concreteness ? "concreteness" : "count";
  std::ostringstream csv;
  csv << "word,token_id," << series_name << ",pc1\n";
  for (int i = 0; i < n; ++i) {
    int id = ctx.table.token_ids[size_t(i)];
    csv << vocab.entry(id).text << ',' << id << ',' << g9(series[i]) << ','
        << g9(pc1[i]) << '\n';
  }
  std::string task = concreteness ? "concreteness" : "frequency";
  write_report(out_dir, task + ".csv", csv.str());

  std::ostringstream txt;
  txt << "pearson r between pc1 and " << series_name << ": " << g9(r)
      << "  |r| " << g9(std::abs(r)) << "\n";
  if (!baseline.empty()) {
    Checkpoint base = load_checkpoint(baseline);
    EmbedContext bctx = embeddings_for(cfg, base, vocab);
    double rb = pearson_r(pc1_scores(bctx.table), series);
    txt << "baseline |r| " << g9(std::abs(rb)) << "  gain "
        << g9(std::abs(r) - std::abs(rb)) << "\n";
  }
  write_report(out_dir, task + ".txt", txt.str());
  std::printf("%s  |r| %.4f\n", task.c_str(), std::abs(r));
}

void analyze_silhouette(const RunConfig& cfg, const Checkpoint& ck,
                        const std::string& baseline,
                        const std::string& out_dir) {
  Vocab vocab = Vocab::standard();
  EmbedContext ctx = embeddings_for(cfg, ck, vocab);
  std::vector<std::string> cats;
  for (int id : ctx.table.token_ids) cats.push_back(vocab.entry(id).category());
  SilhouetteResult r = silhouette(ctx.table.x, cats);

  std::ostringstream csv;
  csv << "word,category,silhouette\n";
  for (size_t i = 0; i < ctx.table.token_ids.size(); ++i)
    csv << vocab.entry(ctx.table.token_ids[i]).text << ',' << cats[i] << ','
        << g9(r.s[i]) << '\n';
  write_report(out_dir, "silhouette.csv", csv.str());

  std::ostringstream txt;
  txt << "mean silhouette " << g9(r.mean) << "\n";
  for (const auto& [cat, mean] : r.category_mean)
    txt << cat << " " << g9(mean) << "\n";
  if (!baseline.empty()) {
    Checkpoint base = load_checkpoint(baseline);
    EmbedContext bctx = embeddings_for(cfg, base, vocab);
    SilhouetteResult rb = silhouette(bctx.table.x, cats);
    txt << "baseline mean " << g9(rb.mean) << "  gain " << g9(r.mean - rb.mean)
        << "\n";
  }
  write_report(out_dir, "silhouette.txt", txt.str());
  std::printf("silhouette  mean %.4f\n", r.mean);
}

struct NormsRow {
  std::string feature;
  bool fitted = false;
  double lambda = 0, f1 = 0;
  int positives = 0;
};

std::vector<NormsRow> fit_all_norms(const Vocab& vocab,
                                    const EmbeddingTable& table) {
  std::vector<std::string> features = Vocab::feature_names();
  const int n = int(table.token_ids.size());
  std::vector<NormsRow> rows(features.size());
  parallel_for(int64_t(features.size()), [&](int64_t fi) {
    NormsRow& row = rows[size_t(fi)];
    row.feature = features[size_t(fi)];
    std::vector<int> labels(size_t(n), 0);
    for (int i = 0; i < n; ++i) {
      const VocabEntry& e = vocab.entry(table.token_ids[size_t(i)]);
      for (const std::string& f : e.features())
        if (f == row.feature) labels[size_t(i)] = 1;
    }
    int pos = 0;
    for (int v : labels) pos += v;
    row.positives = pos;
    if (pos < 5) return;
    row.lambda = select_lambda_loo(table.x, labels, default_lambda_grid());
    NormClassifier c = fit_norm_classifier(table.x, labels, row.lambda);
    int64_t tp = 0, fp = 0, fn = 0;
    for (int i = 0; i < n; ++i) {
      bool hit = logistic_predict(c, table.x.row(i)) > 0.5;
      if (hit && labels[size_t(i)]) ++tp;
      if (hit && !labels[size_t(i)]) ++fp;
      if (!hit && labels[size_t(i)]) ++fn;
    }
    row.f1 = (tp + fp + fn) == 0 ? 0.0 : f1_score(tp, fp, fn);
    row.fitted = true;
  });
  return rows;
}

double mean_f1(const std::vector<NormsRow>& rows) {
  double sum = 0;
  int n = 0;
  for (const NormsRow& r : rows)
    if (r.fitted) {
      sum += r.f1;
      ++n;
    }
  return n ? sum / n : 0.0;
}

void analyze_norms(const RunConfig& cfg, const Checkpoint& ck,
                   const std::string& baseline, const std::string& out_dir) {
  Vocab vocab = Vocab::standard();
  EmbedContext ctx = embeddings_for(cfg, ck, vocab);
  std::vector<NormsRow> rows = fit_all_norms(vocab, ctx.table);

  std::ostringstream csv;
  csv << "feature,positives,lambda,f1\n";
  for (const NormsRow& r : rows) {
    csv << r.feature << ',' << r.positives << ',';
    if (r.fitted)
      csv << g9(r.lambda) << ',' << g9(r.f1) << '\n';
    else
      csv << ",\n";
  }
  write_report(out_dir, "norms.csv", csv.str());

  std::ostringstream txt;
  int skipped = 0;
  for (const NormsRow& r : rows) skipped += r.fitted ? 0 : 1;
  double f1 = mean_f1(rows);
  txt << "mean f1 over fitted features " << g9(f1) << "\n";
  txt << "features skipped for too few positives: " << skipped << "\n";
  if (!baseline.empty()) {
    Checkpoint base = load_checkpoint(baseline);
    EmbedContext bctx = embeddings_for(cfg, base, vocab);
    double bf1 = mean_f1(fit_all_norms(vocab, bctx.table));
    txt << "baseline mean f1 " << g9(bf1) << "  gain " << g9(f1 - bf1) << "\n";
  }
  write_report(out_dir, "norms.txt", txt.str());
  std::printf("norms  mean f1 %.4f\n", f1);
}

struct ComposeProbe {
  int alias_id = 0;
  std::vector<int> phrase;
  std::string phrase_text;
};

std::vector<ComposeProbe> compose_probes(const Vocab& vocab) {
  std::vector<ComposeProbe> probes;
  for (int id = 4; id < vocab.size(); ++id) {
    const VocabEntry& e = vocab.entry(id);
    if (e.alias_shape < 0) continue;
    ComposeProbe p;
    p.alias_id = id;
    int attr = e.alias_texture >= 0
                   ? vocab.texture_word(Texture(e.alias_texture))
                   : vocab.color_word(Color(e.alias_color));
    int shape = vocab.shape_word(Shape(e.alias_shape));
    p.phrase = {attr, shape};
    p.phrase_text =
        vocab.entry(attr).text + " " + vocab.entry(shape).text;
    probes.push_back(std::move(p));
  }
  return probes;
}

std::vector<int> compose_ranks(const RunConfig& cfg, EmbedContext& ctx,
                               const std::vector<ComposeProbe>& probes) {
  std::vector<int> ranks;
  for (const ComposeProbe& p : probes) {
    Eigen::VectorXd q = standardize_with(
        ctx.table, phrase_embedding_raw(cfg, ctx.ps, p.phrase));
    ranks.push_back(rank_of_token(rank_by_cosine(q, ctx.table), p.alias_id));
  }
  return ranks;
}

void analyze_compose(const RunConfig& cfg, const Checkpoint& ck,
                     const std::string& baseline, const std::string& out_dir) {
  Vocab vocab = Vocab::standard();
  EmbedContext ctx = embeddings_for(cfg, ck, vocab);
  std::vector<ComposeProbe> probes = compose_probes(vocab);
  std::vector<int> ranks = compose_ranks(cfg, ctx, probes);
  std::vector<int> base_ranks;
  if (!baseline.empty()) {
    Checkpoint base = load_checkpoint(baseline);
    EmbedContext bctx = embeddings_for(cfg, base, vocab);
    base_ranks = compose_ranks(cfg, bctx, probes);
  }

  std::ostringstream csv;
  csv << "alias,phrase,rank" << (base_ranks.empty() ? "" : ",rank_baseline")
      << "\n";
  double sum = 0;
  int improved = 0;
  for (size_t i = 0; i < probes.size(); ++i) {
    csv << vocab.entry(probes[i].alias_id).text << ',' << probes[i].phrase_text
        << ',' << ranks[i];
    if (!base_ranks.empty()) {
      csv << ',' << base_ranks[i];
      if (ranks[i] < base_ranks[i]) ++improved;
    }
    csv << '\n';
    sum += ranks[i];
  }
  write_report(out_dir, "compose.csv", csv.str());

  std::ostringstream txt;
  txt << "alias probes " << probes.size() << "  mean rank "
      << g9(sum / double(probes.size())) << "\n";
  if (!base_ranks.empty())
    txt << "probes ranking strictly better than baseline: " << improved
        << "\n";
  write_report(out_dir, "compose.txt", txt.str());
  std::printf("compose  mean rank %.2f over %zu probes\n",
              sum / double(probes.size()), probes.size());
}

void analyze_occlude(const RunConfig& cfg, const Checkpoint& ck,
                     const std::string& out_dir) {
  Vocab vocab = Vocab::standard();
  std::string dir = cfg.data_dir + "/heldout";
  Dataset ds = read_dataset(dir);
  ParamStore<double> ps =
      params_for_eval<double>(cfg, ck, "classify", vocab.size());

  std::vector<int> singles;
  for (size_t i = 0; i < ds.scenes.size(); ++i)
    if (ds.scenes[i].objects.size() == 1) singles.push_back(int(i));
  if (int(singles.size()) > 50) singles.resize(50);
  if (singles.empty()) throw DataError("no single-object scenes to probe");

  std::ostringstream csv;
  csv << "scene_id,true_class,p_clean,p_occluded,reduced\n";
  int reduced = 0;
  for (int row : singles) {
    const Scene& s = ds.scenes[size_t(row)];
    Tensor<float> img = read_ppm(image_path(dir, s.id));
    const ObjectSpec& obj = s.objects[0];
    int cls = obj.object_class();
    Tensor<float> blocked = img;
    int r = obj.radius();
    for (int c = 0; c < 3; ++c)
      for (int y = std::max(0, obj.y - r); y <= std::min(31, obj.y + r); ++y)
        for (int x = std::max(0, obj.x - r); x <= std::min(31, obj.x + r); ++x)
          blocked.data[(int64_t(c) * kCanvas + y) * kCanvas + x] = 0.5f;
    Eigen::MatrixXd probs = classify_probabilities(cfg, ps, {img, blocked});
    bool drop = probs(1, cls) < probs(0, cls);
    reduced += drop ? 1 : 0;
    csv << s.id << ',' << cls << ',' << g9(probs(0, cls)) << ','
        << g9(probs(1, cls)) << ',' << (drop ? 1 : 0) << '\n';
  }
  write_report(out_dir, "occlude.csv", csv.str());

  // Full sliding map for the first probe, for inspection.
  const Scene& first = ds.scenes[size_t(singles[0])];
  Tensor<float> img = read_ppm(image_path(dir, first.id));
  Eigen::MatrixXd map = occlusion_heatmap(
      cfg, ps, img, first.objects[0].object_class(), 8, 2, 0.5f);
  std::ostringstream hm;
  hm << "row,col,p_true\n";
  for (int y = 0; y < map.rows(); ++y)
    for (int x = 0; x < map.cols(); ++x)
      hm << y << ',' << x << ',' << g9(map(y, x)) << '\n';
  write_report(out_dir, "occlude_heatmap.csv", hm.str());

  double frac = double(reduced) / double(singles.size());
  std::ostringstream txt;
  txt << "scenes probed " << singles.size() << "\n";
  txt << "fraction with reduced true-class probability " << g9(frac) << "\n";
  txt << "heatmap for scene " << first.id << ": " << map.rows() << "x"
      << map.cols() << " cells, min " << g9(map.minCoeff()) << " max "
      << g9(map.maxCoeff()) << "\n";
  write_report(out_dir, "occlude.txt", txt.str());
  std::printf("occlude  reduced in %.0f%% of %zu scenes\n", 100 * frac,
              singles.size());
}

}  // namespace

// ---------------------------------------------------------------------------

void run_train_stage(const RunConfig& cfg, const std::string& stage,
                     const std::string& from, const std::string& out_dir) {
  fs::create_directories(out_dir);
  write_file_atomic(out_dir + "/config.resolved", emit_config(cfg));
  if (cfg.precision == "f32")
    train_stage_impl<float>(cfg, stage, from, out_dir);
  else if (cfg.precision == "f64")
    train_stage_impl<double>(cfg, stage, from, out_dir);
  else
    throw ConfigError("precision must be f32 or f64, got '" + cfg.precision +
                      "'");
}

void run_eval_task(const RunConfig& cfg, const std::string& task,
                   const std::string& checkpoint, const std::string& out_dir) {
  Checkpoint ck = load_checkpoint(checkpoint);
  if (task == "retrieval")
    eval_retrieval(cfg, ck, out_dir);
  else if (task == "relations")
    eval_relations(cfg, ck, out_dir, false);
  else if (task == "objects")
    eval_relations(cfg, ck, out_dir, true);
  else
    throw UsageError("unknown eval task '" + task + "'");
}

void run_analyze_task(const RunConfig& cfg, const std::string& task,
                      const std::string& checkpoint,
                      const std::string& baseline,
                      const std::string& out_dir) {
  Checkpoint ck = load_checkpoint(checkpoint);
  if (task == "pca")
    analyze_pca(cfg, ck, out_dir);
  else if (task == "concreteness")
    analyze_correlation(cfg, ck, baseline, out_dir, true);
  else if (task == "frequency")
    analyze_correlation(cfg, ck, baseline, out_dir, false);
  else if (task == "silhouette")
    analyze_silhouette(cfg, ck, baseline, out_dir);
  else if (task == "norms")
    analyze_norms(cfg, ck, baseline, out_dir);
  else if (task == "compose")
    analyze_compose(cfg, ck, baseline, out_dir);
  else if (task == "occlude")
    analyze_occlude(cfg, ck, out_dir);
  else
    throw UsageError("unknown analyze task '" + task + "'");
}

void run_search(const RunConfig& cfg, const std::string& checkpoint,
                const std::string& db, const std::string& image_file,
                const std::string& text, double alpha, int topk) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw AlphaOutOfRange("alpha " + std::to_string(alpha) +
                          " outside the valid range [0, 1]");
  if (image_file.empty() && text.empty())
    throw UsageError("search needs --image and/or --text");
  if (topk < 1) throw UsageError("topk must be positive");

  Checkpoint ck = load_checkpoint(checkpoint);
  Vocab vocab = Vocab::standard();
  ParamStore<double> ps =
      params_for_eval<double>(cfg, ck, "search-heads", vocab.size());
  ModelDims dims = ModelDims::from(cfg);
  SearchIndex index = read_index(db);

  Eigen::VectorXd qi, qw;
  if (!image_file.empty()) {
    Tensor<float> img = read_ppm(image_file);
    Graph<double> g;
    Net<double> net(g, ps, dims);
    Var<double> v3 =
        visual_encode(net, g.constant(batch_image_rows<double>({img})), 1);
    Var<double> q = search_image_query(net, v3, 1);
    qi = first_row(q.val(), dims.d_model);
  }
  if (!text.empty()) {
    std::istringstream words(text);
    std::string word;
    std::vector<int64_t> tokens = {Vocab::kCls};
    while (words >> word) tokens.push_back(vocab.id(word));
    tokens.push_back(Vocab::kSep);
    if (int(tokens.size()) > kMaxTokens)
      throw UsageError("query text longer than " +
                       std::to_string(kMaxTokens - 2) + " words");
    while (int(tokens.size()) < kMaxTokens) tokens.push_back(Vocab::kPad);
    Graph<double> g;
    Net<double> net(g, ps, dims);
    Var<double> am =
        g.constant(pad_mask_tensor<double>(tokens, 1, kMaxTokens));
    Var<double> l3 = language_encode(net, tokens, 1, kMaxTokens, am);
    Var<double> cw =
        g.constant(content_pool_weights<double>(tokens, 1, kMaxTokens));
    Var<double> q = search_text_query(net, l3, cw, 1, kMaxTokens);
    qw = first_row(q.val(), dims.d_model);
  }

  Eigen::VectorXd q = text.empty()  ? qi
                      : image_file.empty() ? qw
                                           : combine_query(qi, qw, alpha);
  std::vector<SearchHit> hits = search_rank(q, index);
  int shown = std::min<int>(topk, int(hits.size()));
  for (int i = 0; i < shown; ++i)
    std::printf("%2d. scene %llu  score %s\n", i + 1,
                (unsigned long long)hits[size_t(i)].id,
                g9(hits[size_t(i)].score).c_str());
}

void run_index(const RunConfig& cfg, const std::string& checkpoint,
               const std::string& dataset_dir, const std::string& out_path) {
  Checkpoint ck = load_checkpoint(checkpoint);
  Vocab vocab = Vocab::standard();
  ParamStore<double> ps =
      params_for_eval<double>(cfg, ck, "search-heads", vocab.size());
  ModelDims dims = ModelDims::from(cfg);
  Dataset ds = read_dataset(dataset_dir);

  SearchIndex index;
  index.vectors.resize(int64_t(ds.scenes.size()), dims.d_model);
  const int chunk = 16;
  for (size_t at = 0; at < ds.scenes.size(); at += chunk) {
    int B = int(std::min(ds.scenes.size() - at, size_t(chunk)));
    std::vector<Tensor<float>> imgs;
    for (int b = 0; b < B; ++b)
      imgs.push_back(read_ppm(
          image_path(dataset_dir, ds.scenes[at + size_t(b)].id)));
    Graph<double> g;
    Net<double> net(g, ps, dims);
    Var<double> v3 =
        visual_encode(net, g.constant(batch_image_rows<double>(imgs)), B);
    Var<double> q = search_image_query(net, v3, B);
    const Tensor<double>& val = q.val();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < dims.d_model; ++c)
        index.vectors(int64_t(at) + b, c) =
            float(val.data[int64_t(b) * dims.d_model + c]);
  }
  for (const Scene& s : ds.scenes) index.ids.push_back(uint64_t(s.id));
  write_index(out_path, index);
  std::printf("index: wrote %zu vectors of dim %d to %s\n", index.ids.size(),
              dims.d_model, out_path.c_str());
}

}  // namespace groundling
