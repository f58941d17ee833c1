#include "groundling/dataset_io.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace groundling {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  if (in.bad()) throw IoError("read failed for '" + path + "'");
  return os.str();
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp + "' for writing");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("rename '" + tmp + "' -> '" + path + "': " + ec.message());
}

std::vector<uint8_t> ppm_bytes(const Tensor<float>& img) {
  img.require_rank(3, "ppm_bytes");
  if (img.shape[0] != 3)
    throw ShapeMismatch("ppm needs {3,H,W}, got " + shape_str(img.shape));
  int h = img.shape[1], w = img.shape[2];
  std::string header =
      "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + size_t(3 * h * w));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = img.at({c, y, x});
        int q = int(std::lround(255.0f * std::min(1.0f, std::max(0.0f, v))));
        out.push_back(uint8_t(q));
      }
  return out;
}

void write_ppm(const std::string& path, const Tensor<float>& img) {
  auto bytes = ppm_bytes(img);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

namespace {

// Reads one whitespace-delimited ASCII token from the header region.
std::string next_token(const std::string& s, size_t& pos, const std::string& what) {
  while (pos < s.size() && std::isspace(uint8_t(s[pos]))) ++pos;
  size_t start = pos;
  while (pos < s.size() && !std::isspace(uint8_t(s[pos]))) ++pos;
  if (start == pos)
    throw FormatError("truncated ppm header in " + what);
  return s.substr(start, pos - start);
}

int parse_int_token(const std::string& s, size_t& pos, const std::string& what) {
  std::string t = next_token(s, pos, what);
  try {
    size_t used = 0;
    int v = std::stoi(t, &used);
    if (used != t.size() || v <= 0) throw std::invalid_argument(t);
    return v;
  } catch (const std::exception&) {
    throw FormatError("bad ppm header field '" + t + "' in " + what);
  }
}

}  // namespace

Tensor<float> decode_ppm(const std::string& bytes, const std::string& what) {
  size_t pos = 0;
  if (next_token(bytes, pos, what) != "P6")
    throw FormatError("not a P6 ppm: " + what);
  int w = parse_int_token(bytes, pos, what);
  int h = parse_int_token(bytes, pos, what);
  int maxval = parse_int_token(bytes, pos, what);
  if (maxval != 255)
    throw FormatError("unsupported ppm maxval " + std::to_string(maxval) +
                      " in " + what);
  ++pos;  // single whitespace byte after the header
  size_t need = size_t(3 * w * h);
  if (pos + need > bytes.size())
    throw FormatError("truncated ppm pixel data in " + what);
  Tensor<float> img = Tensor<float>::zeros({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at({c, y, x}) = float(uint8_t(bytes[pos++])) / 255.0f;
  return img;
}

Tensor<float> read_ppm(const std::string& path) {
  return decode_ppm(read_file(path), "'" + path + "'");
}

std::string image_path(const std::string& dir, int scene_id) {
  return dir + "/images/" + std::to_string(scene_id) + ".ppm";
}

namespace {

json scene_to_json(const Vocab& vocab, const Scene& s) {
  json objs = json::array();
  for (const ObjectSpec& o : s.objects)
    objs.push_back({{"shape", name(o.shape)},
                    {"color", name(o.color)},
                    {"texture", name(o.texture)},
                    {"size", name(o.size)},
                    {"x", o.x},
                    {"y", o.y}});
  json trips = json::array();
  for (const Triplet& t : s.triplets)
    trips.push_back(
        {{"s", t.subject}, {"p", name(t.predicate)}, {"o", t.object}});
  json mens = json::array();
  for (const Mention& m : s.mentions)
    mens.push_back({{"obj", m.object}, {"begin", m.tok_begin}, {"end", m.tok_end}});
  (void)vocab;
  return json{{"id", s.id},       {"objects", objs},   {"triplets", trips},
              {"caption", s.caption}, {"tokens", s.tokens}, {"mentions", mens}};
}

[[noreturn]] void line_error(int line, const std::string& msg) {
  throw FormatError("scenes.jsonl line " + std::to_string(line) + ": " + msg);
}

const json& need(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end())
    throw FormatError(std::string("missing field '") + key + "'");
  return *it;
}

Scene scene_from_json(const Vocab& vocab, const json& j, int line) {
  Scene s;
  try {
    s.id = need(j, "id").get<int>();
    for (const json& jo : need(j, "objects")) {
      ObjectSpec o{};
      o.shape = parse_shape(need(jo, "shape").get<std::string>());
      o.color = parse_color(need(jo, "color").get<std::string>());
      o.texture = parse_texture(need(jo, "texture").get<std::string>());
      o.size = parse_size(need(jo, "size").get<std::string>());
      o.x = need(jo, "x").get<int>();
      o.y = need(jo, "y").get<int>();
      s.objects.push_back(o);
    }
    for (const json& jt : need(j, "triplets")) {
      Triplet t{};
      t.subject = need(jt, "s").get<int>();
      t.predicate = parse_predicate(need(jt, "p").get<std::string>());
      t.object = need(jt, "o").get<int>();
      s.triplets.push_back(t);
    }
    s.caption = need(j, "caption").get<std::string>();
    for (const json& jt : need(j, "tokens")) {
      int id = jt.get<int>();
      vocab.entry(id);  // range check
      s.tokens.push_back(id);
    }
    for (const json& jm : need(j, "mentions")) {
      Mention m{};
      m.object = need(jm, "obj").get<int>();
      m.tok_begin = need(jm, "begin").get<int>();
      m.tok_end = need(jm, "end").get<int>();
      s.mentions.push_back(m);
    }
  } catch (const std::exception& e) {
    line_error(line, e.what());
  }
  return s;
}

}  // namespace

void write_dataset(const std::string& dir, const Dataset& ds) {
  std::error_code ec;
  fs::create_directories(dir + "/images", ec);
  if (ec) throw IoError("cannot create '" + dir + "/images': " + ec.message());

  for (const Scene& s : ds.scenes)
    write_ppm(image_path(dir, s.id), render_scene(s));

  std::string lines;
  for (const Scene& s : ds.scenes) {
    lines += scene_to_json(ds.vocab, s).dump();
    lines += '\n';
  }
  write_file_atomic(dir + "/scenes.jsonl", lines);

  json words = json::array();
  for (int i = 0; i < ds.vocab.size(); ++i) {
    const VocabEntry& e = ds.vocab.entry(i);
    json w{{"text", e.text},
           {"kind", name(e.kind)},
           {"concreteness", e.concreteness},
           {"categories", e.is_special() ? json::array()
                                         : json::array({e.category()})},
           {"features", e.features()},
           {"count", i < int(ds.word_counts.size()) ? ds.word_counts[size_t(i)]
                                                    : 0}};
    if (e.alias_shape >= 0) {
      json a{{"shape", name(Shape(e.alias_shape))}};
      if (e.alias_color >= 0) a["color"] = name(Color(e.alias_color));
      if (e.alias_texture >= 0) a["texture"] = name(Texture(e.alias_texture));
      w["alias"] = a;
    }
    words.push_back(w);
  }
  write_file_atomic(dir + "/vocab.json", json{{"words", words}}.dump(2) + "\n");
}

Dataset read_dataset(const std::string& dir) {
  Dataset ds;
  ds.vocab = Vocab::standard();

  json vj;
  try {
    vj = json::parse(read_file(dir + "/vocab.json"));
  } catch (const json::exception& e) {
    throw FormatError("vocab.json: " + std::string(e.what()));
  }
  if (!vj.contains("words") || !vj["words"].is_array() ||
      int(vj["words"].size()) != ds.vocab.size())
    throw FormatError("vocab.json: expected " + std::to_string(ds.vocab.size()) +
                      " words");
  ds.word_counts.assign(size_t(ds.vocab.size()), 0);
  for (int i = 0; i < ds.vocab.size(); ++i) {
    const json& w = vj["words"][size_t(i)];
    if (!w.contains("text") || w["text"].get<std::string>() !=
                                   ds.vocab.entry(i).text)
      throw FormatError("vocab.json: word " + std::to_string(i) +
                        " does not match the standard vocabulary");
    if (w.contains("count")) ds.word_counts[size_t(i)] = w["count"].get<int64_t>();
  }

  std::istringstream in(read_file(dir + "/scenes.jsonl"));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      line_error(lineno, e.what());
    }
    ds.scenes.push_back(scene_from_json(ds.vocab, j, lineno));
  }
  return ds;
}

}  // namespace groundling
