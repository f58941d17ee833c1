#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "groundling/world.hpp"

using namespace groundling;

namespace {

Scene two_objects(ObjectSpec a, ObjectSpec b) {
  Scene s;
  s.objects = {a, b};
  return s;
}

ObjectSpec obj(Shape sh, Color c, Texture t, SizeClass z, int x, int y) {
  return ObjectSpec{sh, c, t, z, x, y};
}

bool has(const std::vector<Predicate>& v, Predicate p) {
  return std::find(v.begin(), v.end(), p) != v.end();
}

std::string untokenize(const Vocab& v, const Scene& s) {
  std::string out;
  for (int id : s.tokens) {
    const VocabEntry& e = v.entry(id);
    if (e.is_special()) continue;
    if (!out.empty()) out += ' ';
    out += e.text;
  }
  return out;
}

}  // namespace

TEST_CASE("vocabulary layout is pinned") {
  Vocab v = Vocab::standard();
  CHECK(v.size() == 59);
  CHECK(v.entry(Vocab::kPad).text == "[PAD]");
  CHECK(v.entry(Vocab::kCls).text == "[CLS]");
  CHECK(v.entry(Vocab::kSep).text == "[SEP]");
  CHECK(v.entry(Vocab::kMask).text == "[MASK]");
  CHECK(v.id("a") == 4);
  CHECK(v.id("the") == 5);
  CHECK(v.id("is") == 6);
  CHECK(v.id("small") == 7);
  CHECK(v.id("large") == 8);
  CHECK(v.id("solid") == 9);
  CHECK(v.id("striped") == 10);
  CHECK(v.id("dotted") == 11);
  CHECK(v.id("red") == 12);
  CHECK(v.id("white") == 16);
  CHECK(v.id("circle") == 17);
  CHECK(v.id("star") == 20);
  CHECK(v.id("left-of") == 21);
  CHECK(v.id("larger-than") == 26);
  CHECK_THROWS_AS(v.id("function"), UnknownToken);

  // Alias words combine a texture or color with a shape.
  int zeb = v.tex_shape_alias(Texture::Striped, Shape::Circle);
  CHECK(v.entry(zeb).text == "zeb");
  CHECK(v.entry(zeb).alias_texture == int(Texture::Striped));
  CHECK(v.entry(zeb).alias_shape == int(Shape::Circle));
  int roc = v.color_shape_alias(Color::Red, Shape::Circle);
  CHECK(v.entry(roc).text == "roc");
  CHECK(v.entry(roc).alias_color == int(Color::Red));

  // 12 texture-shape aliases, 20 color-shape ones, all distinct words.
  std::set<std::string> words;
  for (const auto& e : v.entries()) CHECK(words.insert(e.text).second);

  // Concreteness: content and alias words 5, predicates 2, function words 1,
  // specials 0.
  CHECK(v.entry(v.id("red")).concreteness == 5);
  CHECK(v.entry(zeb).concreteness == 5);
  CHECK(v.entry(v.id("left-of")).concreteness == 2);
  CHECK(v.entry(v.id("a")).concreteness == 1);
  CHECK(v.entry(Vocab::kPad).concreteness == 0);
}

TEST_CASE("word features name visual attributes") {
  Vocab v = Vocab::standard();
  auto feats = [&](const std::string& w) { return v.entry(v.id(w)).features(); };
  CHECK(feats("red") == std::vector<std::string>{"is_red"});
  CHECK(feats("striped") == std::vector<std::string>{"has_stripes"});
  CHECK(feats("circle") == std::vector<std::string>{"is_round"});
  auto zeb = feats("zeb");
  CHECK(std::find(zeb.begin(), zeb.end(), "has_stripes") != zeb.end());
  CHECK(std::find(zeb.begin(), zeb.end(), "is_round") != zeb.end());
  CHECK(feats("is").empty());
  auto names = Vocab::feature_names();
  CHECK(names.size() == 14);
  for (const auto& e : v.entries())
    for (const auto& f : e.features())
      CHECK(std::find(names.begin(), names.end(), f) != names.end());
}

TEST_CASE("geometric predicates") {
  auto small = SizeClass::Small;
  auto large = SizeClass::Large;

  // Margins: left-of needs x+4 < x', above needs y+4 < y'.
  Scene s = two_objects(obj(Shape::Circle, Color::Red, Texture::Solid, small, 5, 16),
                        obj(Shape::Square, Color::Blue, Texture::Solid, small, 10, 16));
  auto p = geometric_predicates(s, 0, 1);
  CHECK(has(p, Predicate::LeftOf));
  CHECK(has(geometric_predicates(s, 1, 0), Predicate::RightOf));
  CHECK_FALSE(has(p, Predicate::Above));
  CHECK(has(p, Predicate::Near));  // distance 5 < 12

  // Margin boundary: dx = 4 is not enough.
  s = two_objects(obj(Shape::Circle, Color::Red, Texture::Solid, small, 5, 16),
                  obj(Shape::Square, Color::Blue, Texture::Solid, small, 9, 16));
  CHECK_FALSE(has(geometric_predicates(s, 0, 1), Predicate::LeftOf));

  // Distance 12.04 just misses near; size pair gives larger-than.
  s = two_objects(obj(Shape::Circle, Color::Red, Texture::Solid, large, 5, 5),
                  obj(Shape::Square, Color::Blue, Texture::Solid, small, 14, 13));
  p = geometric_predicates(s, 0, 1);
  CHECK(has(p, Predicate::LeftOf));
  CHECK(has(p, Predicate::Above));
  CHECK(has(p, Predicate::LargerThan));
  CHECK_FALSE(has(p, Predicate::Near));
  CHECK_FALSE(has(geometric_predicates(s, 1, 0), Predicate::LargerThan));

  // Exactly 12 is not near, just under is.
  s = two_objects(obj(Shape::Circle, Color::Red, Texture::Solid, small, 10, 10),
                  obj(Shape::Square, Color::Blue, Texture::Solid, small, 22, 10));
  CHECK_FALSE(has(geometric_predicates(s, 0, 1), Predicate::Near));
  s = two_objects(obj(Shape::Circle, Color::Red, Texture::Solid, small, 10, 10),
                  obj(Shape::Square, Color::Blue, Texture::Solid, small, 21, 10));
  CHECK(has(geometric_predicates(s, 0, 1), Predicate::Near));

  CHECK_THROWS_AS(geometric_predicates(s, 0, 2), IndexError);
  CHECK_THROWS_AS(geometric_predicates(s, 0, 0), IndexError);
}

TEST_CASE("generation is deterministic and offset shifts the stream") {
  Vocab v = Vocab::standard();
  GenConfig cfg{11, 50, 0.5, 0};
  auto a = generate_dataset(v, cfg);
  auto b = generate_dataset(v, cfg);
  REQUIRE(a.size() == 50);
  for (int i = 0; i < 50; ++i) {
    CHECK(a[i].id == i);
    CHECK(a[i].tokens == b[i].tokens);
    CHECK(a[i].caption == b[i].caption);
    REQUIRE(a[i].objects.size() == b[i].objects.size());
    for (size_t k = 0; k < a[i].objects.size(); ++k) {
      CHECK(a[i].objects[k].x == b[i].objects[k].x);
      CHECK(a[i].objects[k].y == b[i].objects[k].y);
    }
  }
  // A split generated at an id offset never repeats the base scenes.
  GenConfig shifted{11, 50, 0.5, 50};
  auto c = generate_dataset(v, shifted);
  CHECK(c[0].id == 50);
  int same = 0;
  for (int i = 0; i < 50; ++i)
    if (c[i].caption == a[i].caption) ++same;
  CHECK(same < 50);
}

TEST_CASE("scenes are sound: stored label is visibly true") {
  Vocab v = Vocab::standard();
  auto scenes = generate_dataset(v, {1, 400, 0.5, 0});
  int multi = 0;
  for (const auto& s : scenes) {
    REQUIRE(s.objects.size() >= 1);
    REQUIRE(s.objects.size() <= 3);
    for (const auto& o : s.objects) {
      CHECK(o.x - o.radius() >= 0);
      CHECK(o.x + o.radius() < kCanvas);
      CHECK(o.y - o.radius() >= 0);
      CHECK(o.y + o.radius() < kCanvas);
    }
    if (s.objects.size() == 1) {
      CHECK(s.triplets.empty());
      continue;
    }
    ++multi;
    REQUIRE(s.triplets.size() == 1);
    const Triplet& t = s.triplets[0];
    CHECK(t.subject == 0);
    CHECK(t.object == 1);
    auto p = geometric_predicates(s, t.subject, t.object);
    CHECK(has(p, t.predicate));
    // The caption names the stored predicate.
    CHECK(std::count(s.tokens.begin(), s.tokens.end(),
                     v.predicate_word(t.predicate)) == 1);
  }
  CHECK(multi > 100);
}

TEST_CASE("described objects in a pair are distinguishable") {
  Vocab v = Vocab::standard();
  auto scenes = generate_dataset(v, {2, 400, 0.5, 0});
  for (const auto& s : scenes) {
    if (s.triplets.empty()) continue;
    const ObjectSpec& a = s.objects[0];
    const ObjectSpec& b = s.objects[1];
    bool same_look = a.shape == b.shape && a.color == b.color &&
                     a.texture == b.texture;
    Predicate p = s.triplets[0].predicate;
    bool identical = same_look && a.size == b.size;
    if (p != Predicate::Near) CHECK_FALSE(identical);
  }
}

TEST_CASE("stored predicates are roughly uniform") {
  Vocab v = Vocab::standard();
  auto scenes = generate_dataset(v, {1, 1000, 0.5, 0});
  std::map<Predicate, int> counts;
  int total = 0;
  for (const auto& s : scenes)
    for (const auto& t : s.triplets) {
      ++counts[t.predicate];
      ++total;
    }
  REQUIRE(total > 400);
  for (int i = 0; i < kNumPredicates; ++i) {
    double frac = double(counts[Predicate(i)]) / total;
    CHECK(frac > (1.0 / 6) * 0.8);
    CHECK(frac < (1.0 / 6) * 1.2);
  }
}

TEST_CASE("captions follow the template and mentions cover them") {
  Vocab v = Vocab::standard();
  auto scenes = generate_dataset(v, {3, 300, 0.5, 0});
  for (const auto& s : scenes) {
    REQUIRE(int(s.tokens.size()) == kMaxTokens);
    CHECK(s.tokens[0] == Vocab::kCls);
    auto sep = std::find(s.tokens.begin(), s.tokens.end(), Vocab::kSep);
    REQUIRE(sep != s.tokens.end());
    for (auto it = sep + 1; it != s.tokens.end(); ++it)
      CHECK(*it == Vocab::kPad);
    CHECK(untokenize(v, s) == s.caption);
    CHECK(s.tokens[1] == v.word_a());

    int described = s.triplets.empty() ? 1 : 2;
    REQUIRE(int(s.mentions.size()) == described);
    for (const Mention& m : s.mentions) {
      CHECK(m.tok_begin >= 1);
      CHECK(m.tok_end <= int(sep - s.tokens.begin()));
      CHECK(m.tok_begin < m.tok_end);
      // First mention starts with "a", second with "the".
      int art = s.tokens[size_t(m.tok_begin)];
      CHECK((m.object == 0 ? art == v.word_a() : art == v.word_the()));
    }
    if (described == 2) {
      // a <desc1> is <pred> the <desc2>
      int is_pos = s.mentions[0].tok_end;
      CHECK(s.tokens[size_t(is_pos)] == v.word_is());
      const VocabEntry& pe = v.entry(s.tokens[size_t(is_pos) + 1]);
      CHECK(pe.kind == TokenKind::PredicateWord);
      CHECK(s.mentions[1].tok_begin == is_pos + 2);
    }
  }
}

TEST_CASE("alias mode applies to every description in a scene") {
  Vocab v = Vocab::standard();
  auto scenes = generate_dataset(v, {4, 400, 0.5, 0});
  int aliased = 0, plain = 0;
  for (const auto& s : scenes) {
    std::vector<TokenKind> kinds;
    for (int id : s.tokens) kinds.push_back(v.entry(id).kind);
    bool has_tex_alias =
        std::count(kinds.begin(), kinds.end(), TokenKind::AliasTexShape) > 0;
    bool has_col_alias =
        std::count(kinds.begin(), kinds.end(), TokenKind::AliasColorShape) > 0;
    CHECK_FALSE((has_tex_alias && has_col_alias));
    bool has_shape_word =
        std::count(kinds.begin(), kinds.end(), TokenKind::ShapeWord) > 0;
    if (has_tex_alias || has_col_alias) {
      ++aliased;
      // Alias replaces the shape word in every description.
      CHECK_FALSE(has_shape_word);
      // The words the alias absorbs never co-occur with it.
      for (const Mention& m : s.mentions) {
        const VocabEntry* alias = nullptr;
        for (int t = m.tok_begin; t < m.tok_end; ++t) {
          const VocabEntry& e = v.entry(s.tokens[size_t(t)]);
          if (e.kind == TokenKind::AliasTexShape ||
              e.kind == TokenKind::AliasColorShape)
            alias = &e;
        }
        REQUIRE(alias != nullptr);
        for (int t = m.tok_begin; t < m.tok_end; ++t) {
          const VocabEntry& e = v.entry(s.tokens[size_t(t)]);
          if (alias->alias_texture >= 0)
            CHECK(e.kind != TokenKind::TextureWord);
          if (alias->alias_color >= 0) CHECK(e.kind != TokenKind::ColorWord);
        }
      }
    } else {
      ++plain;
      CHECK(has_shape_word);
    }
  }
  // alias_fraction 0.5 splits the corpus.
  CHECK(aliased > 100);
  CHECK(plain > 100);
}

TEST_CASE("alias words describe the drawn object") {
  Vocab v = Vocab::standard();
  auto scenes = generate_dataset(v, {5, 300, 1.0, 0});
  for (const auto& s : scenes) {
    for (const Mention& m : s.mentions) {
      const ObjectSpec& o = s.objects[size_t(m.object)];
      for (int t = m.tok_begin; t < m.tok_end; ++t) {
        const VocabEntry& e = v.entry(s.tokens[size_t(t)]);
        if (e.alias_shape >= 0) CHECK(e.alias_shape == int(o.shape));
        if (e.alias_color >= 0) CHECK(e.alias_color == int(o.color));
        if (e.alias_texture >= 0) CHECK(e.alias_texture == int(o.texture));
        if (e.kind == TokenKind::ColorWord)
          CHECK(e.text == name(o.color));
        if (e.kind == TokenKind::SizeWord) CHECK(e.text == name(o.size));
      }
    }
  }
}

TEST_CASE("word counts recount the captions") {
  Vocab v = Vocab::standard();
  auto scenes = generate_dataset(v, {6, 200, 0.5, 0});
  auto counts = count_words(v, scenes);
  REQUIRE(int(counts.size()) == v.size());
  std::vector<int64_t> manual(size_t(v.size()), 0);
  for (const auto& s : scenes)
    for (int id : s.tokens)
      if (!v.entry(id).is_special()) ++manual[size_t(id)];
  CHECK(counts == manual);
  CHECK(counts[size_t(Vocab::kPad)] == 0);
  CHECK(counts[size_t(v.word_a())] > 0);
}

TEST_CASE("renderer: background and solid shapes") {
  Scene s;
  s.objects = {obj(Shape::Circle, Color::Red, Texture::Solid, SizeClass::Large,
                   16, 16)};
  auto img = render_scene(s);
  REQUIRE(img.shape == std::vector<int>{3, kCanvas, kCanvas});
  // Background corner.
  CHECK(img.at({0, 0, 0}) == 0.25f);
  CHECK(img.at({1, 0, 0}) == 0.25f);
  CHECK(img.at({2, 0, 0}) == 0.25f);
  // Center of a red circle.
  CHECK(img.at({0, 16, 16}) == 1.0f);
  CHECK(img.at({1, 16, 16}) == 0.0f);
  CHECK(img.at({2, 16, 16}) == 0.0f);
  // Just outside radius 6 on the x axis.
  CHECK(img.at({0, 16, 23}) == 0.25f);
}

TEST_CASE("renderer: stripe bands anchor at the top of the box") {
  Scene s;
  s.objects = {obj(Shape::Square, Color::Green, Texture::Striped,
                   SizeClass::Large, 16, 16)};
  auto img = render_scene(s);
  int top = 16 - kLargeRadius;  // first row of the bounding box
  // 2-pixel color band, then 2-pixel white band.
  for (int dy : {0, 1}) {
    CHECK(img.at({1, top + dy, 16}) == 1.0f);
    CHECK(img.at({0, top + dy, 16}) == 0.0f);
  }
  for (int dy : {2, 3}) {
    CHECK(img.at({0, top + dy, 16}) == 1.0f);
    CHECK(img.at({1, top + dy, 16}) == 1.0f);
    CHECK(img.at({2, top + dy, 16}) == 1.0f);
  }
  CHECK(img.at({1, top + 4, 16}) == 1.0f);
}

TEST_CASE("renderer: dot lattice anchors at the box corner") {
  Scene s;
  s.objects = {obj(Shape::Square, Color::Blue, Texture::Dotted,
                   SizeClass::Large, 16, 16)};
  auto img = render_scene(s);
  int left = 16 - kLargeRadius, top = 16 - kLargeRadius;
  // Lattice point: the color shows.
  CHECK(img.at({2, top, left}) == 1.0f);
  CHECK(img.at({0, top, left}) == 0.0f);
  // Off-lattice inside the shape: white.
  CHECK(img.at({0, top, left + 1}) == 1.0f);
  CHECK(img.at({1, top, left + 1}) == 1.0f);
  CHECK(img.at({2, top, left + 1}) == 1.0f);
  CHECK(img.at({2, top, left + 3}) == 1.0f);  // next lattice column
  CHECK(img.at({0, top, left + 3}) == 0.0f);
}

TEST_CASE("renderer: later objects draw on top") {
  Scene s;
  s.objects = {obj(Shape::Square, Color::Red, Texture::Solid, SizeClass::Large,
                   16, 16),
               obj(Shape::Square, Color::Blue, Texture::Solid, SizeClass::Small,
                   16, 16)};
  auto img = render_scene(s);
  CHECK(img.at({2, 16, 16}) == 1.0f);  // blue wins at the shared center
  CHECK(img.at({0, 16, 16}) == 0.0f);
  CHECK(img.at({0, 16, 21}) == 1.0f);  // red still visible outside the overlap
}

TEST_CASE("renderer: shape masks") {
  // Triangle: apex up, base at the bottom of the box.
  Scene s;
  s.objects = {obj(Shape::Triangle, Color::Yellow, Texture::Solid,
                   SizeClass::Large, 16, 16)};
  auto img = render_scene(s);
  CHECK(img.at({0, 10, 16}) == 1.0f);   // apex row
  CHECK(img.at({0, 10, 13}) == 0.25f);  // apex row corners stay background
  CHECK(img.at({0, 22, 11}) == 1.0f);   // base spans the full width
  CHECK(img.at({1, 22, 11}) == 1.0f);   // yellow = red+green
  CHECK(img.at({2, 22, 11}) == 0.0f);

  // Star: diamond core plus cross arms reach the box edge.
  s.objects = {obj(Shape::Star, Color::White, Texture::Solid, SizeClass::Large,
                   16, 16)};
  img = render_scene(s);
  CHECK(img.at({0, 16, 10}) == 1.0f);   // left arm tip
  CHECK(img.at({0, 10, 16}) == 1.0f);   // top arm tip
  CHECK(img.at({0, 11, 11}) == 0.25f);  // box corner is empty
}
