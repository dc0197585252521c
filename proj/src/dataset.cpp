#include "malvit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "malvit/error.hpp"
#include "malvit/rng.hpp"

namespace malvit {

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw DataError("unknown split '" + std::string(name) + "'");
}

std::span<const float> Dataset::image(std::size_t i) const {
  return {images.data() + i * image_numel(), image_numel()};
}

std::span<const std::uint8_t> Dataset::label_row(std::size_t i) const {
  return {labels.data() + i * num_tasks(), num_tasks()};
}

Sample Dataset::sample(std::size_t i) const {
  if (i >= size()) throw DataError("sample index " + std::to_string(i) + " out of range");
  const auto img = image(i);
  const auto lab = label_row(i);
  return {{img.begin(), img.end()}, {lab.begin(), lab.end()}, ids[i]};
}

void Dataset::add(const Sample& s) {
  if (s.labels.size() != num_tasks()) {
    throw DataError("sample '" + s.id + "' has " + std::to_string(s.labels.size()) + " labels, dataset has " +
                    std::to_string(num_tasks()) + " tasks");
  }
  if (s.image.size() != image_numel()) {
    throw DataError("sample '" + s.id + "' has " + std::to_string(s.image.size()) + " pixels values, expected " +
                    std::to_string(image_numel()));
  }
  images.insert(images.end(), s.image.begin(), s.image.end());
  labels.insert(labels.end(), s.labels.begin(), s.labels.end());
  ids.push_back(s.id);
}

std::size_t Dataset::task_index(std::string_view name) const {
  for (std::size_t i = 0; i < task_names.size(); ++i) {
    if (task_names[i] == name) return i;
  }
  std::string avail;
  for (const auto& t : task_names) avail += (avail.empty() ? "" : ", ") + t;
  throw DataError("unknown task '" + std::string(name) + "' (available: " + avail + ")");
}

Tensor<float> Dataset::batch_images(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw DataError("empty batch");
  const std::size_t n = image_numel();
  std::vector<float> buf(indices.size() * n);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= size()) throw DataError("sample index " + std::to_string(indices[b]) + " out of range");
    std::copy_n(images.data() + indices[b] * n, n, buf.data() + b * n);
  }
  return Tensor<float>({indices.size(), image_size, image_size, channels}, std::move(buf));
}

std::vector<std::uint8_t> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<std::uint8_t> out;
  out.reserve(indices.size() * num_tasks());
  for (auto i : indices) {
    const auto row = label_row(i);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.task_names = task_names;
  out.split = split;
  out.image_size = image_size;
  out.channels = channels;
  for (auto i : indices) {
    if (i >= size()) throw DataError("sample index " + std::to_string(i) + " out of range");
    if (!images.empty()) {
      const auto img = image(i);
      out.images.insert(out.images.end(), img.begin(), img.end());
    }
    const auto lab = label_row(i);
    out.labels.insert(out.labels.end(), lab.begin(), lab.end());
    out.ids.push_back(ids[i]);
  }
  return out;
}

Dataset Dataset::head(std::size_t count) const {
  std::vector<std::size_t> idx(std::min(count, size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return subset(idx);
}

Dataset Dataset::select_tasks(const std::vector<std::string>& names) const {
  if (names.empty()) throw DataError("no tasks selected");
  std::vector<std::size_t> cols;
  for (const auto& n : names) cols.push_back(task_index(n));
  Dataset out;
  out.task_names = names;
  out.split = split;
  out.image_size = image_size;
  out.channels = channels;
  out.images = images;
  out.ids = ids;
  out.labels.reserve(size() * cols.size());
  for (std::size_t i = 0; i < size(); ++i) {
    for (auto c : cols) out.labels.push_back(label(i, c));
  }
  return out;
}

void Dataset::validate() const {
  if (task_names.empty()) throw DataError("dataset has no tasks");
  if (labels.size() != size() * num_tasks()) throw DataError("label matrix size does not match sample count");
  if (!images.empty() && images.size() != size() * image_numel()) {
    throw DataError("image buffer size does not match sample count");
  }
  for (float v : images) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError("image value outside [0, 1]");
  }
  for (auto v : labels) {
    if (v > 1) throw DataError("label outside {0, 1}");
  }
  std::unordered_set<std::string> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw DataError("duplicate sample id '" + id + "'");
  }
  std::unordered_set<std::string> names(task_names.begin(), task_names.end());
  if (names.size() != task_names.size()) throw DataError("duplicate task names");
}

std::string_view feature_kind_name(FeatureKind k) {
  switch (k) {
    case FeatureKind::shape: return "shape";
    case FeatureKind::stripes: return "stripes";
    case FeatureKind::color: return "color";
  }
  return "?";
}

namespace {

FeatureKind parse_feature_kind(std::string_view s) {
  if (s == "shape") return FeatureKind::shape;
  if (s == "stripes") return FeatureKind::stripes;
  if (s == "color") return FeatureKind::color;
  throw ConfigError("unknown feature kind '" + std::string(s) + "'");
}

// Lower-triangular L with L * L^T = R, or empty when R is not positive definite.
std::vector<double> cholesky(const std::vector<double>& r, std::size_t n) {
  std::vector<double> l(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = r[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      if (i == j) {
        if (!(s > 1e-10)) return {};
        l[i * n + i] = std::sqrt(s);
      } else {
        l[i * n + j] = s / l[j * n + j];
      }
    }
  }
  return l;
}

struct Canvas {
  std::size_t size;
  std::vector<float>& px;
  void add(long y, long x, const std::array<float, 3>& v) {
    if (y < 0 || x < 0 || y >= static_cast<long>(size) || x >= static_cast<long>(size)) return;
    float* p = px.data() + (static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)) * 3;
    for (int c = 0; c < 3; ++c) p[c] += v[static_cast<std::size_t>(c)];
  }
};

std::array<float, 3> scaled(const std::array<float, 3>& c, float a) { return {c[0] * a, c[1] * a, c[2] * a}; }

// Draws a positive attribute's evidence centred at (cy, cx); `scale` maps the
// 64-pixel reference geometry to the actual image size.
void draw_feature(Canvas& cv, FeatureKind kind, double cy, double cx, double scale, const std::array<float, 3>& color,
                  float amp, Rng& rng) {
  const double r = rng.uniform(6.0, 8.0) * scale;
  const long y0 = static_cast<long>(std::floor(cy - 9 * scale)), y1 = static_cast<long>(std::ceil(cy + 9 * scale));
  const long x0 = static_cast<long>(std::floor(cx - 9 * scale)), x1 = static_cast<long>(std::ceil(cx + 9 * scale));
  const auto v = scaled(color, amp);
  switch (kind) {
    case FeatureKind::shape: {
      const double half = 0.5 * r * std::sqrt(std::numbers::pi);  // same area as the disk
      for (long y = y0; y <= y1; ++y) {
        for (long x = x0; x <= x1; ++x) {
          const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          if (std::abs(dy) <= half && std::abs(dx) <= half) cv.add(y, x, v);
        }
      }
      break;
    }
    case FeatureKind::stripes: {
      const double half = 8.0 * scale;
      const double period = 4.0 * scale;
      const double phase = rng.uniform(0.0, period);
      for (long y = y0; y <= y1; ++y) {
        for (long x = x0; x <= x1; ++x) {
          const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          if (std::abs(dy) > half || std::abs(dx) > half) continue;
          if (std::fmod(dy + phase + half, period) < 0.5 * period) cv.add(y, x, v);
        }
      }
      break;
    }
    case FeatureKind::color: {
      for (long y = y0; y <= y1; ++y) {
        for (long x = x0; x <= x1; ++x) {
          const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          if (dy * dy + dx * dx <= r * r) cv.add(y, x, v);
        }
      }
      break;
    }
  }
}

std::vector<float> render(const SynthSpec& spec, std::span<const std::uint8_t> labels, Rng& rng) {
  const std::size_t size = spec.image_size;
  const double scale = static_cast<double>(size) / 64.0;
  std::vector<float> px(size * size * 3);

  // Background: gray level with a slight tint and a linear gradient.
  const double base = rng.uniform(0.4, 0.6);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = rng.uniform(-0.05, 0.05);
  const double gy = rng.uniform(-0.1, 0.1), gx = rng.uniform(-0.1, 0.1);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double g = gy * (static_cast<double>(y) / size - 0.5) + gx * (static_cast<double>(x) / size - 0.5);
      for (std::size_t c = 0; c < 3; ++c) px[(y * size + x) * 3 + c] = static_cast<float>(base + tint[c] + g);
    }
  }

  Canvas cv{size, px};
  const double cell = static_cast<double>(size) / 3.0;
  for (std::size_t j = 0; j < spec.attributes.size(); ++j) {
    const auto& a = spec.attributes[j];
    const double cy = (static_cast<double>(a.region / 3) + 0.5) * cell + rng.uniform(-2.0, 2.0) * scale;
    const double cx = (static_cast<double>(a.region % 3) + 0.5) * cell + rng.uniform(-2.0, 2.0) * scale;
    const float amp = static_cast<float>(rng.uniform(0.35, 0.5));
    if (labels[j] != 0) draw_feature(cv, a.kind, cy, cx, scale, a.color, amp, rng);
  }

  for (auto& v : px) v = std::clamp(static_cast<float>(v + spec.noise_std * rng.normal()), 0.0f, 1.0f);
  return px;
}

Dataset generate_split(const SynthSpec& spec, const std::vector<double>& chol, Split split, std::size_t count,
                       Rng rng) {
  const std::size_t n = spec.num_attributes();
  std::vector<double> thresholds(n);
  for (std::size_t j = 0; j < n; ++j) thresholds[j] = normal_quantile(spec.attributes[j].marginal);

  Dataset ds;
  ds.task_names = spec.task_names();
  ds.split = split;
  ds.image_size = spec.image_size;
  ds.channels = 3;
  ds.images.reserve(count * ds.image_numel());
  ds.labels.reserve(count * n);
  std::vector<double> e(n);
  std::vector<std::uint8_t> lab(n);
  for (std::size_t i = 0; i < count; ++i) {
    Rng srng = rng.derive(i);
    for (auto& v : e) v = srng.normal();
    for (std::size_t j = 0; j < n; ++j) {
      double z = 0;
      for (std::size_t k = 0; k <= j; ++k) z += chol[j * n + k] * e[k];
      lab[j] = z < thresholds[j] ? 1 : 0;
    }
    const auto img = render(spec, lab, srng);
    ds.images.insert(ds.images.end(), img.begin(), img.end());
    ds.labels.insert(ds.labels.end(), lab.begin(), lab.end());
    char id[32];
    std::snprintf(id, sizeof(id), "%s-%06zu", std::string(split_name(split)).c_str(), i);
    ds.ids.emplace_back(id);
  }
  return ds;
}

}  // namespace

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("normal quantile needs p in (0, 1)");
  double lo = -40.0, hi = 40.0;
  for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (0.5 * std::erfc(-mid / std::numbers::sqrt2) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

std::vector<std::string> SynthSpec::task_names() const {
  std::vector<std::string> out;
  for (const auto& a : attributes) out.push_back(a.name);
  return out;
}

void SynthSpec::validate() const {
  const std::size_t n = attributes.size();
  if (n == 0) throw ConfigError("synthetic spec needs at least one attribute");
  if (image_size < 16) throw ConfigError("synthetic image_size must be at least 16");
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be non-negative");
  std::set<std::string> names;
  for (const auto& a : attributes) {
    if (a.name.empty() || !names.insert(a.name).second) {
      throw ConfigError("attribute names must be non-empty and unique ('" + a.name + "')");
    }
    if (a.region > 8) throw ConfigError("attribute '" + a.name + "' region must be in 0..8");
    if (!(a.marginal > 0.0 && a.marginal < 1.0)) {
      throw ConfigError("attribute '" + a.name + "' marginal must be in (0, 1)");
    }
  }
  if (correlation.size() != n * n) {
    throw ConfigError("correlation matrix must be " + std::to_string(n) + "x" + std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (correlation[i * n + i] != 1.0) throw ConfigError("correlation matrix needs a unit diagonal");
    for (std::size_t j = 0; j < n; ++j) {
      const double v = correlation[i * n + j];
      if (!(std::abs(v) <= 1.0) || v != correlation[j * n + i]) {
        throw ConfigError("correlation matrix must be symmetric with entries in [-1, 1]");
      }
    }
  }
  if (cholesky(correlation, n).empty()) {
    throw ConfigError("correlation matrix is not positive definite; no valid joint distribution");
  }
}

SynthSpec SynthSpec::face_attributes(std::size_t n_attributes, std::uint64_t seed) {
  if (n_attributes == 0 || n_attributes > 9) throw ConfigError("face attribute spec supports 1..9 attributes");
  // name, kind, region, marginal, color
  const std::vector<AttributeRule> all = {
      {"5_o_Clock_Shadow", FeatureKind::stripes, 4, 0.35, {0.45f, 0.4f, 0.35f}},
      {"Black_Hair", FeatureKind::color, 0, 0.35, {0.15f, 0.25f, 0.9f}},
      {"Blond_Hair", FeatureKind::color, 2, 0.25, {0.95f, 0.85f, 0.15f}},
      {"Brown_Hair", FeatureKind::color, 3, 0.3, {0.7f, 0.35f, 0.1f}},
      {"Goatee", FeatureKind::shape, 8, 0.25, {0.6f, 0.6f, 0.6f}},
      {"Mustache", FeatureKind::stripes, 7, 0.25, {0.5f, 0.5f, 0.5f}},
      {"No_Beard", FeatureKind::shape, 6, 0.6, {0.7f, 0.7f, 0.7f}},
      {"Rosy_Cheeks", FeatureKind::color, 5, 0.3, {0.95f, 0.25f, 0.35f}},
      {"Wearing_Hat", FeatureKind::shape, 1, 0.25, {0.55f, 0.55f, 0.55f}},
  };
  // Latent correlations, same attribute order.
  const double R[9][9] = {
      // 5oC   Black  Blond  Brown  Goat   Must   NoB    Rosy   Hat
      {1.0, 0.0, -0.1, 0.0, 0.3, 0.3, -0.4, -0.1, 0.0},
      {0.0, 1.0, -0.4, -0.4, 0.0, 0.0, 0.0, 0.0, -0.2},
      {-0.1, -0.4, 1.0, -0.4, -0.1, -0.1, 0.1, 0.1, -0.2},
      {0.0, -0.4, -0.4, 1.0, 0.0, 0.0, 0.0, 0.0, -0.2},
      {0.3, 0.0, -0.1, 0.0, 1.0, 0.6, -0.6, -0.1, 0.0},
      {0.3, 0.0, -0.1, 0.0, 0.6, 1.0, -0.5, -0.1, 0.0},
      {-0.4, 0.0, 0.1, 0.0, -0.6, -0.5, 1.0, 0.2, 0.0},
      {-0.1, 0.0, 0.1, 0.0, -0.1, -0.1, 0.2, 1.0, 0.0},
      {0.0, -0.2, -0.2, -0.2, 0.0, 0.0, 0.0, 0.0, 1.0},
  };
  SynthSpec s;
  s.seed = seed;
  s.attributes.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_attributes));
  s.correlation.resize(n_attributes * n_attributes);
  for (std::size_t i = 0; i < n_attributes; ++i) {
    for (std::size_t j = 0; j < n_attributes; ++j) s.correlation[i * n_attributes + j] = R[i][j];
  }
  return s;
}

nlohmann::json SynthSpec::to_json() const {
  nlohmann::json attrs = nlohmann::json::array();
  for (const auto& a : attributes) {
    attrs.push_back({{"name", a.name},
                     {"kind", feature_kind_name(a.kind)},
                     {"region", a.region},
                     {"marginal", a.marginal},
                     {"color", a.color}});
  }
  return {{"seed", seed},         {"n_train", n_train},       {"n_val", n_val},
          {"n_test", n_test},     {"image_size", image_size}, {"noise_std", noise_std},
          {"attributes", attrs},  {"correlation", correlation}};
}

SynthSpec SynthSpec::from_json(const nlohmann::json& j) {
  try {
    SynthSpec s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.n_train = j.at("n_train").get<std::size_t>();
    s.n_val = j.at("n_val").get<std::size_t>();
    s.n_test = j.at("n_test").get<std::size_t>();
    s.image_size = j.at("image_size").get<std::size_t>();
    s.noise_std = j.at("noise_std").get<double>();
    for (const auto& a : j.at("attributes")) {
      s.attributes.push_back({a.at("name").get<std::string>(), parse_feature_kind(a.at("kind").get<std::string>()),
                              a.at("region").get<std::size_t>(), a.at("marginal").get<double>(),
                              a.at("color").get<std::array<float, 3>>()});
    }
    s.correlation = j.at("correlation").get<std::vector<double>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed synthetic spec: ") + e.what());
  }
}

DatasetSplits synth_generate(const SynthSpec& spec) {
  spec.validate();
  const auto chol = cholesky(spec.correlation, spec.num_attributes());
  const Rng root(spec.seed);
  DatasetSplits out;
  out.train = generate_split(spec, chol, Split::train, spec.n_train, root.derive(0));
  out.val = generate_split(spec, chol, Split::val, spec.n_val, root.derive(1));
  out.test = generate_split(spec, chol, Split::test, spec.n_test, root.derive(2));
  return out;
}

AttributeTable parse_attribute_table(std::istream& in, const std::string& source) {
  AttributeTable t;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw DataError(source + ":" + std::to_string(lineno) + ": " + what);
  };
  if (!std::getline(in, line)) fail("missing sample count line");
  ++lineno;
  std::size_t declared = 0;
  {
    std::istringstream ls(line);
    std::string extra;
    if (!(ls >> declared) || (ls >> extra)) fail("first line must be the sample count");
  }
  if (!std::getline(in, line)) fail("missing attribute name line");
  ++lineno;
  {
    std::istringstream ls(line);
    std::string name;
    while (ls >> name) t.attribute_names.push_back(name);
  }
  if (t.attribute_names.empty()) fail("no attribute names");
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string file, tok;
    ls >> file;
    std::vector<int> row;
    while (ls >> tok) {
      if (tok == "1") {
        row.push_back(1);
      } else if (tok == "-1") {
        row.push_back(-1);
      } else {
        fail("attribute value '" + tok + "' is not 1 or -1");
      }
    }
    if (row.size() != t.attribute_names.size()) {
      fail("expected " + std::to_string(t.attribute_names.size()) + " attribute values, found " +
           std::to_string(row.size()));
    }
    t.filenames.push_back(file);
    t.values.push_back(std::move(row));
  }
  if (t.filenames.size() != declared) {
    throw DataError(source + ": declares " + std::to_string(declared) + " samples but lists " +
                    std::to_string(t.filenames.size()));
  }
  return t;
}

AttributeTable read_attribute_table(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open attribute file " + path.string());
  return parse_attribute_table(f, path.string());
}

std::string format_attribute_table(const AttributeTable& t) {
  std::ostringstream os;
  os << t.filenames.size() << '\n';
  for (std::size_t i = 0; i < t.attribute_names.size(); ++i) os << (i ? " " : "") << t.attribute_names[i];
  os << '\n';
  for (std::size_t r = 0; r < t.filenames.size(); ++r) {
    os << t.filenames[r];
    for (int v : t.values[r]) os << ' ' << v;
    os << '\n';
  }
  return os.str();
}

std::vector<std::pair<std::string, int>> parse_partition_file(std::istream& in, const std::string& source) {
  std::vector<std::pair<std::string, int>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string file, part, extra;
    if (!(ls >> file >> part) || (ls >> extra) || (part != "0" && part != "1" && part != "2")) {
      throw DataError(source + ":" + std::to_string(lineno) + ": expected '<filename> <0|1|2>'");
    }
    out.emplace_back(file, part[0] - '0');
  }
  return out;
}

namespace {

std::vector<float> decode_image(const std::filesystem::path& path, std::size_t size, std::size_t channels) {
  cv::Mat img = cv::imread(path.string(), channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (img.empty()) throw DataError("cannot decode image " + path.string());
  if (channels == 3) cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
  if (static_cast<std::size_t>(img.rows) != size || static_cast<std::size_t>(img.cols) != size) {
    cv::resize(img, img, cv::Size(static_cast<int>(size), static_cast<int>(size)), 0, 0, cv::INTER_LINEAR);
  }
  cv::Mat f;
  img.convertTo(f, channels == 1 ? CV_32FC1 : CV_32FC3, 1.0 / 255.0);
  std::vector<float> out(size * size * channels);
  for (int y = 0; y < f.rows; ++y) {
    const float* row = f.ptr<float>(y);
    std::copy_n(row, size * channels, out.data() + static_cast<std::size_t>(y) * size * channels);
  }
  for (auto& v : out) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

}  // namespace

DatasetSplits load_celeba(const std::filesystem::path& image_dir, const std::filesystem::path& attr_file,
                          const std::filesystem::path& partition_file,
                          const std::vector<std::string>& selected_attrs, const CelebaOptions& options) {
  if (selected_attrs.empty()) throw DataError("no attributes selected");
  if (options.channels != 1 && options.channels != 3) throw DataError("channels must be 1 or 3");
  const AttributeTable table = read_attribute_table(attr_file);
  std::vector<std::size_t> cols;
  for (const auto& a : selected_attrs) {
    auto it = std::find(table.attribute_names.begin(), table.attribute_names.end(), a);
    if (it == table.attribute_names.end()) {
      throw DataError("attribute '" + a + "' not found in " + attr_file.string());
    }
    cols.push_back(static_cast<std::size_t>(it - table.attribute_names.begin()));
  }

  std::ifstream pf(partition_file);
  if (!pf) throw DataError("cannot open partition file " + partition_file.string());
  std::unordered_map<std::string, int> partition;
  for (auto& [file, part] : parse_partition_file(pf, partition_file.string())) partition[file] = part;

  DatasetSplits out;
  Dataset* splits[3] = {&out.train, &out.val, &out.test};
  const Split kinds[3] = {Split::train, Split::val, Split::test};
  for (int s = 0; s < 3; ++s) {
    splits[s]->task_names = selected_attrs;
    splits[s]->split = kinds[s];
    splits[s]->image_size = options.image_size;
    splits[s]->channels = options.channels;
  }
  for (std::size_t r = 0; r < table.filenames.size(); ++r) {
    const auto& file = table.filenames[r];
    auto it = partition.find(file);
    if (it == partition.end()) throw DataError("file '" + file + "' missing from " + partition_file.string());
    Dataset& ds = *splits[it->second];
    for (auto c : cols) ds.labels.push_back(table.values[r][c] > 0 ? 1 : 0);
    ds.ids.push_back(file);
    if (options.decode_images) {
      const auto img = decode_image(image_dir / file, options.image_size, options.channels);
      ds.images.insert(ds.images.end(), img.begin(), img.end());
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> batches(std::size_t dataset_size, std::size_t batch_size, bool shuffle,
                                              std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  std::vector<std::size_t> order;
  if (shuffle) {
    Rng rng(seed);
    order = rng.permutation(dataset_size);
  } else {
    order.resize(dataset_size);
    for (std::size_t i = 0; i < dataset_size; ++i) order[i] = i;
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < dataset_size; start += batch_size) {
    const std::size_t end = std::min(dataset_size, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<std::vector<std::size_t>> batches(const Dataset& ds, std::size_t batch_size, bool shuffle,
                                              std::uint64_t seed) {
  return batches(ds.size(), batch_size, shuffle, seed);
}

std::pair<std::size_t, std::size_t> class_balance(const Dataset& ds, std::string_view task) {
  const std::size_t t = ds.task_index(task);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) pos += ds.label(i, t);
  return {pos, ds.size() - pos};
}

Container dataset_to_container(const Dataset& ds) {
  Container c;
  c.kind = "dataset";
  c.metadata = {{"task_names", ds.task_names},
                {"split", split_name(ds.split)},
                {"image_size", ds.image_size},
                {"channels", ds.channels},
                {"count", ds.size()},
                {"ids", ds.ids}};
  if (!ds.images.empty()) c.add_f32("images", {ds.size(), ds.image_size, ds.image_size, ds.channels}, ds.images);
  c.add_u8("labels", {ds.size(), ds.num_tasks()}, ds.labels);
  return c;
}

Dataset dataset_from_container(const Container& c) {
  if (c.kind != "dataset") throw DataError("container kind '" + c.kind + "' is not a dataset");
  Dataset ds;
  try {
    ds.task_names = c.metadata.at("task_names").get<std::vector<std::string>>();
    ds.split = parse_split(c.metadata.at("split").get<std::string>());
    ds.image_size = c.metadata.at("image_size").get<std::size_t>();
    ds.channels = c.metadata.at("channels").get<std::size_t>();
    ds.ids = c.metadata.at("ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed dataset manifest: ") + e.what());
  }
  if (c.contains("images")) ds.images = c.f32("images");
  ds.labels = c.u8("labels");
  ds.validate();
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  save_container(path, dataset_to_container(ds));
}

Dataset load_dataset(const std::filesystem::path& path) {
  return dataset_from_container(load_container(path, "dataset"));
}

}  // namespace malvit
