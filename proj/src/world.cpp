#include "groundling/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

namespace groundling {

const char* name(Shape s) {
  switch (s) {
    case Shape::Circle: return "circle";
    case Shape::Square: return "square";
    case Shape::Triangle: return "triangle";
    case Shape::Star: return "star";
  }
  return "?";
}
const char* name(Color c) {
  switch (c) {
    case Color::Red: return "red";
    case Color::Green: return "green";
    case Color::Blue: return "blue";
    case Color::Yellow: return "yellow";
    case Color::White: return "white";
  }
  return "?";
}
const char* name(Texture t) {
  switch (t) {
    case Texture::Solid: return "solid";
    case Texture::Striped: return "striped";
    case Texture::Dotted: return "dotted";
  }
  return "?";
}
const char* name(SizeClass s) {
  return s == SizeClass::Small ? "small" : "large";
}
const char* name(Predicate p) {
  switch (p) {
    case Predicate::LeftOf: return "left-of";
    case Predicate::RightOf: return "right-of";
    case Predicate::Above: return "above";
    case Predicate::Below: return "below";
    case Predicate::Near: return "near";
    case Predicate::LargerThan: return "larger-than";
  }
  return "?";
}
const char* name(TokenKind k) {
  switch (k) {
    case TokenKind::Special: return "special";
    case TokenKind::Function: return "function";
    case TokenKind::SizeWord: return "size";
    case TokenKind::TextureWord: return "texture";
    case TokenKind::ColorWord: return "color";
    case TokenKind::ShapeWord: return "shape";
    case TokenKind::PredicateWord: return "predicate";
    case TokenKind::AliasTexShape: return "alias_texture_shape";
    case TokenKind::AliasColorShape: return "alias_color_shape";
  }
  return "?";
}

template <typename E, int N>
static E parse_enum(const std::string& s, const char* what) {
  for (int i = 0; i < N; ++i)
    if (s == name(E(i))) return E(i);
  throw FormatError(std::string("unknown ") + what + " '" + s + "'");
}

Shape parse_shape(const std::string& s) {
  return parse_enum<Shape, kNumShapes>(s, "shape");
}
Color parse_color(const std::string& s) {
  return parse_enum<Color, kNumColors>(s, "color");
}
Texture parse_texture(const std::string& s) {
  return parse_enum<Texture, kNumTextures>(s, "texture");
}
SizeClass parse_size(const std::string& s) {
  return parse_enum<SizeClass, 2>(s, "size");
}
Predicate parse_predicate(const std::string& s) {
  return parse_enum<Predicate, kNumPredicates>(s, "predicate");
}
TokenKind parse_token_kind(const std::string& s) {
  return parse_enum<TokenKind, 9>(s, "token kind");
}

std::string VocabEntry::category() const {
  return name(kind);
}

std::vector<std::string> VocabEntry::features() const {
  std::vector<std::string> f;
  auto color_feature = [&](int c) {
    f.push_back(std::string("is_") + name(Color(c)));
  };
  auto shape_feature = [&](int s) {
    switch (Shape(s)) {
      case Shape::Circle: f.push_back("is_round"); break;
      case Shape::Square: f.push_back("is_square"); break;
      case Shape::Triangle: f.push_back("is_triangle"); break;
      case Shape::Star: f.push_back("is_star"); break;
    }
  };
  auto texture_feature = [&](int t) {
    switch (Texture(t)) {
      case Texture::Solid: f.push_back("is_solid"); break;
      case Texture::Striped: f.push_back("has_stripes"); break;
      case Texture::Dotted: f.push_back("has_dots"); break;
    }
  };
  switch (kind) {
    case TokenKind::ColorWord: color_feature(int(parse_color(text))); break;
    case TokenKind::ShapeWord: shape_feature(int(parse_shape(text))); break;
    case TokenKind::TextureWord: texture_feature(int(parse_texture(text))); break;
    case TokenKind::SizeWord:
      f.push_back(text == "small" ? "is_small" : "is_large");
      break;
    case TokenKind::AliasTexShape:
      texture_feature(alias_texture);
      shape_feature(alias_shape);
      break;
    case TokenKind::AliasColorShape:
      color_feature(alias_color);
      shape_feature(alias_shape);
      break;
    default: break;
  }
  return f;
}

std::vector<std::string> Vocab::feature_names() {
  std::vector<std::string> f;
  for (int c = 0; c < kNumColors; ++c)
    f.push_back(std::string("is_") + name(Color(c)));
  f.insert(f.end(), {"is_round", "is_square", "is_triangle", "is_star"});
  f.insert(f.end(), {"is_solid", "has_stripes", "has_dots"});
  f.insert(f.end(), {"is_small", "is_large"});
  return f;
}

int Vocab::add(VocabEntry e) {
  int id = int(entries_.size());
  index_[e.text] = id;
  entries_.push_back(std::move(e));
  return id;
}

Vocab Vocab::standard() {
  Vocab v;
  for (const char* t : {"[PAD]", "[CLS]", "[SEP]", "[MASK]"})
    v.add({t, TokenKind::Special, 0, -1, -1, -1});
  v.a_ = v.add({"a", TokenKind::Function, 1, -1, -1, -1});
  v.the_ = v.add({"the", TokenKind::Function, 1, -1, -1, -1});
  v.is_ = v.add({"is", TokenKind::Function, 1, -1, -1, -1});
  for (int i = 0; i < 2; ++i)
    v.size_.push_back(v.add({name(SizeClass(i)), TokenKind::SizeWord, 5, -1, -1, -1}));
  for (int i = 0; i < kNumTextures; ++i)
    v.texture_.push_back(
        v.add({name(Texture(i)), TokenKind::TextureWord, 5, -1, -1, -1}));
  for (int i = 0; i < kNumColors; ++i)
    v.color_.push_back(v.add({name(Color(i)), TokenKind::ColorWord, 5, -1, -1, -1}));
  for (int i = 0; i < kNumShapes; ++i)
    v.shape_.push_back(v.add({name(Shape(i)), TokenKind::ShapeWord, 5, -1, -1, -1}));
  for (int i = 0; i < kNumPredicates; ++i)
    v.predicate_.push_back(
        v.add({name(Predicate(i)), TokenKind::PredicateWord, 2, -1, -1, -1}));

  // Alias words are short invented nouns naming one attribute pair, the toy
  // analog of words like "zebra".  First consonant encodes texture or color,
  // the tail encodes the shape.
  static const char* tex_head[kNumTextures] = {"l", "z", "d"};  // solid/striped/dotted
  static const char* color_head[kNumColors] = {"r", "g", "b", "y", "w"};
  static const char* shape_tail_tex[kNumShapes] = {"eb", "orn", "il", "ay"};
  static const char* shape_tail_col[kNumShapes] = {"oc", "us", "it", "ar"};
  v.tex_shape_.resize(size_t(kNumTextures * kNumShapes));
  for (int t = 0; t < kNumTextures; ++t)
    for (int s = 0; s < kNumShapes; ++s) {
      VocabEntry e{std::string(tex_head[t]) + shape_tail_tex[s],
                   TokenKind::AliasTexShape, 5, s, -1, t};
      v.tex_shape_[size_t(t * kNumShapes + s)] = v.add(std::move(e));
    }
  v.color_shape_.resize(size_t(kNumColors * kNumShapes));
  for (int c = 0; c < kNumColors; ++c)
    for (int s = 0; s < kNumShapes; ++s) {
      VocabEntry e{std::string(color_head[c]) + shape_tail_col[s],
                   TokenKind::AliasColorShape, 5, s, c, -1};
      v.color_shape_[size_t(c * kNumShapes + s)] = v.add(std::move(e));
    }
  return v;
}

const VocabEntry& Vocab::entry(int id) const {
  if (id < 0 || id >= size())
    throw UnknownToken("token id " + std::to_string(id) + " out of range");
  return entries_[size_t(id)];
}

int Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw UnknownToken("unknown token '" + word + "'");
  return it->second;
}

bool Vocab::contains(const std::string& word) const {
  return index_.count(word) != 0;
}

int Vocab::size_word(SizeClass s) const { return size_[size_t(s)]; }
int Vocab::texture_word(Texture t) const { return texture_[size_t(t)]; }
int Vocab::color_word(Color c) const { return color_[size_t(c)]; }
int Vocab::shape_word(Shape s) const { return shape_[size_t(s)]; }
int Vocab::predicate_word(Predicate p) const { return predicate_[size_t(p)]; }
int Vocab::tex_shape_alias(Texture t, Shape s) const {
  return tex_shape_[size_t(int(t) * kNumShapes + int(s))];
}
int Vocab::color_shape_alias(Color c, Shape s) const {
  return color_shape_[size_t(int(c) * kNumShapes + int(s))];
}

std::vector<Predicate> geometric_predicates(const Scene& scene, int i, int j) {
  int n = int(scene.objects.size());
  if (i < 0 || i >= n || j < 0 || j >= n || i == j)
    throw IndexError("bad object pair (" + std::to_string(i) + "," +
                     std::to_string(j) + ") in a scene of " + std::to_string(n));
  const ObjectSpec& a = scene.objects[size_t(i)];
  const ObjectSpec& b = scene.objects[size_t(j)];
  std::vector<Predicate> out;
  if (a.x + 4 < b.x) out.push_back(Predicate::LeftOf);
  if (b.x + 4 < a.x) out.push_back(Predicate::RightOf);
  if (a.y + 4 < b.y) out.push_back(Predicate::Above);
  if (b.y + 4 < a.y) out.push_back(Predicate::Below);
  double dx = a.x - b.x, dy = a.y - b.y;
  if (std::sqrt(dx * dx + dy * dy) < 12.0) out.push_back(Predicate::Near);
  if (a.size == SizeClass::Large && b.size == SizeClass::Small)
    out.push_back(Predicate::LargerThan);
  return out;
}

namespace {

int coord_in(SplitMix64& r, int radius) {
  return radius + int(r.below(uint64_t(kCanvas - 2 * radius)));
}

struct Looks {
  Shape shape;
  Color color;
  Texture texture;
  bool operator==(const Looks& o) const {
    return shape == o.shape && color == o.color && texture == o.texture;
  }
};

Looks random_looks(SplitMix64& r) {
  return {Shape(r.below(kNumShapes)), Color(r.below(kNumColors)),
          Texture(r.below(kNumTextures))};
}

constexpr int kMaxDraws = 10000;

[[noreturn]] void sampling_exhausted() {
  throw DataError("scene sampling failed to satisfy constraints");
}

bool boxes_clear(const ObjectSpec& a, const ObjectSpec& b) {
  int need = a.radius() + b.radius() + 1;
  return std::abs(a.x - b.x) > need || std::abs(a.y - b.y) > need;
}

// Places the ordered pair so that the stored predicate is the one a viewer
// would name: directional pairs are axis-aligned, far apart and equally sized;
// near pairs are two small objects in contact range; size pairs sit close
// together.  A pair's sizes alone then separate near from larger-than.
void place_pair(SplitMix64& r, Predicate p, ObjectSpec& a, ObjectSpec& b) {
  switch (p) {
    case Predicate::LeftOf:
    case Predicate::RightOf:
    case Predicate::Above:
    case Predicate::Below: {
      SizeClass s = SizeClass(r.below(2));
      a.size = b.size = s;
      int rad = a.radius();
      int lo = 0, hi = 0;
      for (int it = 0;; ++it) {
        if (it >= kMaxDraws) sampling_exhausted();
        lo = coord_in(r, rad);
        hi = coord_in(r, rad);
        if (hi - lo >= 13) break;
      }
      int ca = 0, cb = 0;
      for (int it = 0;; ++it) {
        if (it >= kMaxDraws) sampling_exhausted();
        ca = coord_in(r, rad);
        cb = ca + int(r.below(9)) - 4;
        if (cb >= rad && cb < kCanvas - rad) break;
      }
      if (p == Predicate::LeftOf) {
        a.x = lo; b.x = hi; a.y = ca; b.y = cb;
      } else if (p == Predicate::RightOf) {
        a.x = hi; b.x = lo; a.y = ca; b.y = cb;
      } else if (p == Predicate::Above) {
        a.y = lo; b.y = hi; a.x = ca; b.x = cb;
      } else {
        a.y = hi; b.y = lo; a.x = ca; b.x = cb;
      }
      return;
    }
    case Predicate::Near: {
      a.size = b.size = SizeClass::Small;
      int rad = kSmallRadius;
      for (int it = 0;; ++it) {
        if (it >= kMaxDraws) sampling_exhausted();
        a.x = coord_in(r, rad);
        a.y = coord_in(r, rad);
        int dx = int(r.below(9)) - 4;
        int dy = int(r.below(9)) - 4;
        if (std::abs(dx) + std::abs(dy) < 3) continue;
        b.x = a.x + dx;
        b.y = a.y + dy;
        if (b.x >= rad && b.x < kCanvas - rad && b.y >= rad &&
            b.y < kCanvas - rad)
          break;
      }
      return;
    }
    case Predicate::LargerThan: {
      a.size = SizeClass::Large;
      b.size = SizeClass::Small;
      for (int it = 0;; ++it) {
        if (it >= kMaxDraws) sampling_exhausted();
        a.x = coord_in(r, kLargeRadius);
        a.y = coord_in(r, kLargeRadius);
        int dx = int(r.below(9)) - 4;
        int dy = int(r.below(9)) - 4;
        b.x = a.x + dx;
        b.y = a.y + dy;
        if (b.x >= kSmallRadius && b.x < kCanvas - kSmallRadius &&
            b.y >= kSmallRadius && b.y < kCanvas - kSmallRadius)
          break;
      }
      return;
    }
  }
}

enum class AliasMode { None, TexShape, ColorShape };

// Appends the tokens describing one object, prefixed by an article.  The
// mention span covers the article through the head noun.
void describe(const Vocab& v, const ObjectSpec& o, int article, AliasMode mode,
              int obj_index, std::vector<int>& toks,
              std::vector<Mention>& mentions) {
  int begin = int(toks.size());
  toks.push_back(article);
  toks.push_back(v.size_word(o.size));
  switch (mode) {
    case AliasMode::None:
      toks.push_back(v.texture_word(o.texture));
      toks.push_back(v.color_word(o.color));
      toks.push_back(v.shape_word(o.shape));
      break;
    case AliasMode::TexShape:
      toks.push_back(v.color_word(o.color));
      toks.push_back(v.tex_shape_alias(o.texture, o.shape));
      break;
    case AliasMode::ColorShape:
      toks.push_back(v.texture_word(o.texture));
      toks.push_back(v.color_shape_alias(o.color, o.shape));
      break;
  }
  mentions.push_back({obj_index, begin, int(toks.size())});
}

}  // namespace

Scene generate_scene(const Vocab& vocab, const GenConfig& cfg, int index) {
  Scene scene;
  scene.id = cfg.id_offset + index;
  SplitMix64 r(mix_seed(cfg.seed, uint64_t(scene.id)));

  int n_obj = 1 + int(r.below(3));
  if (n_obj == 1) {
    ObjectSpec o;
    Looks lk = random_looks(r);
    o.shape = lk.shape;
    o.color = lk.color;
    o.texture = lk.texture;
    o.size = SizeClass(r.below(2));
    o.x = coord_in(r, o.radius());
    o.y = coord_in(r, o.radius());
    scene.objects.push_back(o);
  } else {
    Predicate p = Predicate(r.below(kNumPredicates));
    ObjectSpec a{}, b{};
    Looks la = random_looks(r);
    Looks lb = random_looks(r);
    if (p != Predicate::Near && p != Predicate::LargerThan) {
      // Directional labels need distinguishable endpoints, or the caption
      // cannot say which object is which.
      for (int it = 0; la == lb; ++it) {
        if (it >= kMaxDraws) sampling_exhausted();
        lb = random_looks(r);
      }
    }
    a.shape = la.shape; a.color = la.color; a.texture = la.texture;
    b.shape = lb.shape; b.color = lb.color; b.texture = lb.texture;
    place_pair(r, p, a, b);
    scene.objects.push_back(a);
    scene.objects.push_back(b);
    scene.triplets.push_back({0, p, 1});

    if (n_obj == 3) {
      ObjectSpec d{};
      for (int it = 0;; ++it) {
        if (it >= kMaxDraws) sampling_exhausted();
        Looks ld = random_looks(r);
        if (ld == la || ld == lb) continue;
        d.shape = ld.shape; d.color = ld.color; d.texture = ld.texture;
        d.size = SizeClass(r.below(2));
        d.x = coord_in(r, d.radius());
        d.y = coord_in(r, d.radius());
        if (boxes_clear(d, a) && boxes_clear(d, b)) break;
      }
      scene.objects.push_back(d);
    }
  }

  AliasMode mode = AliasMode::None;
  if (r.bernoulli(cfg.alias_fraction))
    mode = r.below(2) == 0 ? AliasMode::TexShape : AliasMode::ColorShape;

  std::vector<int> toks;
  toks.push_back(Vocab::kCls);
  if (scene.triplets.empty()) {
    describe(vocab, scene.objects[0], vocab.word_a(), mode, 0, toks,
             scene.mentions);
  } else {
    const Triplet& t = scene.triplets[0];
    describe(vocab, scene.objects[size_t(t.subject)], vocab.word_a(), mode,
             t.subject, toks, scene.mentions);
    toks.push_back(vocab.word_is());
    toks.push_back(vocab.predicate_word(t.predicate));
    describe(vocab, scene.objects[size_t(t.object)], vocab.word_the(), mode,
             t.object, toks, scene.mentions);
  }
  toks.push_back(Vocab::kSep);
  if (int(toks.size()) > kMaxTokens)
    throw DataError("caption exceeds the token budget");
  for (size_t i = 1; i + 1 < toks.size(); ++i) {
    if (i > 1) scene.caption += ' ';
    scene.caption += vocab.entry(toks[i]).text;
  }
  while (int(toks.size()) < kMaxTokens) toks.push_back(Vocab::kPad);
  scene.tokens = std::move(toks);

  // The construction above must never store an untrue label.
  for (const Triplet& t : scene.triplets) {
    auto preds = geometric_predicates(scene, t.subject, t.object);
    if (std::find(preds.begin(), preds.end(), t.predicate) == preds.end())
      throw DataError("generated triplet fails its geometric definition");
  }
  return scene;
}

std::vector<Scene> generate_dataset(const Vocab& vocab, const GenConfig& cfg) {
  if (cfg.n_scenes < 1)
    throw InvalidCount("n_scenes must be >= 1, got " +
                       std::to_string(cfg.n_scenes));
  std::vector<Scene> scenes;
  scenes.reserve(size_t(cfg.n_scenes));
  for (int i = 0; i < cfg.n_scenes; ++i)
    scenes.push_back(generate_scene(vocab, cfg, i));
  return scenes;
}

std::vector<int64_t> count_words(const Vocab& vocab,
                                 const std::vector<Scene>& scenes) {
  std::vector<int64_t> counts(size_t(vocab.size()), 0);
  for (const Scene& s : scenes)
    for (int t : s.tokens)
      if (!vocab.entry(t).is_special()) ++counts[size_t(t)];
  return counts;
}

namespace {

bool in_shape(const ObjectSpec& o, int x, int y) {
  int dx = x - o.x, dy = y - o.y, r = o.radius();
  switch (o.shape) {
    case Shape::Circle: return dx * dx + dy * dy <= r * r;
    case Shape::Square: return std::max(std::abs(dx), std::abs(dy)) <= r;
    case Shape::Triangle:
      // Apex at the top, base at the bottom of the box.
      return dy >= -r && dy <= r && 2 * std::abs(dx) <= dy + r;
    case Shape::Star: {
      int arm = std::max(1, r / 3);
      bool diamond = std::abs(dx) + std::abs(dy) <= r;
      bool vbar = std::abs(dx) <= arm && std::abs(dy) <= r;
      bool hbar = std::abs(dy) <= arm && std::abs(dx) <= r;
      return diamond || vbar || hbar;
    }
  }
  return false;
}

void base_color(Color c, float rgb[3]) {
  switch (c) {
    case Color::Red: rgb[0] = 1; rgb[1] = 0; rgb[2] = 0; break;
    case Color::Green: rgb[0] = 0; rgb[1] = 1; rgb[2] = 0; break;
    case Color::Blue: rgb[0] = 0; rgb[1] = 0; rgb[2] = 1; break;
    case Color::Yellow: rgb[0] = 1; rgb[1] = 1; rgb[2] = 0; break;
    case Color::White: rgb[0] = 1; rgb[1] = 1; rgb[2] = 1; break;
  }
}

}  // namespace

Tensor<float> render_scene(const Scene& scene) {
  Tensor<float> img = Tensor<float>::full({3, kCanvas, kCanvas}, 0.25f);
  for (const ObjectSpec& o : scene.objects) {
    float rgb[3];
    base_color(o.color, rgb);
    int r = o.radius();
    for (int y = std::max(0, o.y - r); y <= std::min(kCanvas - 1, o.y + r); ++y) {
      for (int x = std::max(0, o.x - r); x <= std::min(kCanvas - 1, o.x + r);
           ++x) {
        if (!in_shape(o, x, y)) continue;
        bool white = false;
        if (o.texture == Texture::Striped) {
          white = ((y - (o.y - r)) / 2) % 2 != 0;
        } else if (o.texture == Texture::Dotted) {
          white = (x - (o.x - r)) % 3 != 0 || (y - (o.y - r)) % 3 != 0;
        }
        for (int c = 0; c < 3; ++c)
          img.at({c, y, x}) = white ? 1.0f : rgb[c];
      }
    }
  }
  return img;
}

}  // namespace groundling
