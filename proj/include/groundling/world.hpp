#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "groundling/errors.hpp"
#include "groundling/rng.hpp"
#include "groundling/tensor.hpp"

namespace groundling {

// Synthetic scene corpus: 32x32 canvas, 1-3 objects per scene, captions over a
// 59-token vocabulary, geometric relation labels.  Everything here is a pure
// function of (seed, index), so datasets are bit-reproducible.

constexpr int kCanvas = 32;
constexpr int kSmallRadius = 3;
constexpr int kLargeRadius = 6;
constexpr int kMaxTokens = 14;  // [CLS] + longest caption + [SEP]

enum class Shape : uint8_t { Circle, Square, Triangle, Star };
enum class Color : uint8_t { Red, Green, Blue, Yellow, White };
enum class Texture : uint8_t { Solid, Striped, Dotted };
enum class SizeClass : uint8_t { Small, Large };
enum class Predicate : uint8_t { LeftOf, RightOf, Above, Below, Near, LargerThan };

constexpr int kNumShapes = 4;
constexpr int kNumColors = 5;
constexpr int kNumTextures = 3;
constexpr int kNumPredicates = 6;
constexpr int kNumObjectClasses = kNumShapes * kNumColors;  // shape x color

const char* name(Shape s);
const char* name(Color c);
const char* name(Texture t);
const char* name(SizeClass s);
const char* name(Predicate p);

// Throw FormatError if the text is not a known value.
Shape parse_shape(const std::string& s);
Color parse_color(const std::string& s);
Texture parse_texture(const std::string& s);
SizeClass parse_size(const std::string& s);
Predicate parse_predicate(const std::string& s);

struct ObjectSpec {
  Shape shape;
  Color color;
  Texture texture;
  SizeClass size;
  int x, y;  // center, y grows downward

  int radius() const {
    return size == SizeClass::Small ? kSmallRadius : kLargeRadius;
  }
  int object_class() const {
    return int(shape) * kNumColors + int(color);
  }
};

struct Triplet {
  int subject;
  Predicate predicate;
  int object;
};

// Token span of one object description inside the caption, [begin, end) over
// the padded token sequence ([CLS] at position 0).
struct Mention {
  int object;
  int tok_begin;
  int tok_end;
};

struct Scene {
  int id = 0;
  std::vector<ObjectSpec> objects;
  std::vector<Triplet> triplets;  // stored labels; empty for 1-object scenes
  std::vector<int> tokens;        // padded to kMaxTokens
  std::string caption;            // the words only, space separated
  std::vector<Mention> mentions;
};

enum class TokenKind : uint8_t {
  Special,
  Function,
  SizeWord,
  TextureWord,
  ColorWord,
  ShapeWord,
  PredicateWord,
  AliasTexShape,
  AliasColorShape,
};

const char* name(TokenKind k);
TokenKind parse_token_kind(const std::string& s);

struct VocabEntry {
  std::string text;
  TokenKind kind;
  int concreteness = 0;  // 1 abstract .. 5 concrete; 0 for specials
  // Composition of alias words; -1 where not applicable.
  int alias_shape = -1;
  int alias_color = -1;
  int alias_texture = -1;

  bool is_special() const { return kind == TokenKind::Special; }
  // Silhouette grouping.
  std::string category() const;
  // Binary feature names this word is positive for (is_red, has_stripes, ...).
  std::vector<std::string> features() const;
};

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kSep = 2;
  static constexpr int kMask = 3;

  static Vocab standard();

  int size() const { return int(entries_.size()); }
  const VocabEntry& entry(int id) const;
  const std::vector<VocabEntry>& entries() const { return entries_; }
  int id(const std::string& word) const;  // throws UnknownToken
  bool contains(const std::string& word) const;

  int size_word(SizeClass s) const;
  int texture_word(Texture t) const;
  int color_word(Color c) const;
  int shape_word(Shape s) const;
  int predicate_word(Predicate p) const;
  int tex_shape_alias(Texture t, Shape s) const;
  int color_shape_alias(Color c, Shape s) const;
  int word_a() const { return a_; }
  int word_the() const { return the_; }
  int word_is() const { return is_; }

  // All binary feature names, in a fixed order.
  static std::vector<std::string> feature_names();

 private:
  std::vector<VocabEntry> entries_;
  std::vector<int> size_, texture_, color_, shape_, predicate_;
  std::vector<int> tex_shape_, color_shape_;
  int a_ = 0, the_ = 0, is_ = 0;
  std::unordered_map<std::string, int> index_;

  int add(VocabEntry e);
};

// True predicates for the ordered pair (i, j) under the geometric definitions,
// in enum order.  Throws IndexError for bad indices.
std::vector<Predicate> geometric_predicates(const Scene& scene, int i, int j);

struct GenConfig {
  uint64_t seed = 7;
  int n_scenes = 0;
  double alias_fraction = 0.5;  // fraction of scenes captioned with alias words
  int id_offset = 0;            // first scene id
};

// One scene as a pure function of (seed, index).
Scene generate_scene(const Vocab& vocab, const GenConfig& cfg, int index);
std::vector<Scene> generate_dataset(const Vocab& vocab, const GenConfig& cfg);

// Word occurrence counts over the emitted captions (indexed by token id;
// specials stay 0).
std::vector<int64_t> count_words(const Vocab& vocab,
                                 const std::vector<Scene>& scenes);

// Rasterize to floats in [0,1], shape {3, 32, 32} (channel, row, col).
// Background is 0.25 grey; stripes alternate 2-pixel horizontal bands of the
// object color and white; dots are single color pixels on a 3-pixel lattice
// over white.
Tensor<float> render_scene(const Scene& scene);

}  // namespace groundling
