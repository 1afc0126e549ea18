#include "fedtail/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fedtail/random.hpp"

namespace fedtail::data {

ParseError::ParseError(const std::string& what, std::size_t line)
    : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

// ---- DomainDataset ---------------------------------------------------------

loss::Batch DomainDataset::batch(std::span<const std::size_t> indices) const {
  loss::Batch b;
  b.domain_id = domain_id;
  b.x = ad::Matrix(indices.size(), x.cols);
  b.y.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = x.row(indices[i]);
    std::copy(src.begin(), src.end(), b.x.row(i).begin());
    b.y.push_back(y[indices[i]]);
  }
  return b;
}

loss::Batch DomainDataset::all() const {
  std::vector<std::size_t> idx(size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return batch(idx);
}

void DomainDataset::recount() {
  class_counts.assign(static_cast<std::size_t>(num_classes), 0);
  for (int label : y) ++class_counts[static_cast<std::size_t>(label)];
}

// ---- synthetic generation --------------------------------------------------

void SynthSpec::validate() const {
  if (num_domains < 2) throw ConfigError("synth.num_domains must be >= 2");
  if (num_classes < 2) throw ConfigError("synth.num_classes must be >= 2");
  if (feature_dim < 2) throw ConfigError("synth.feature_dim must be >= 2");
  if (samples_per_class_max < 2) throw ConfigError("synth.samples_per_class_max must be >= 2");
  if (!(imbalance_ratio >= 1.0)) throw ConfigError("synth.imbalance_ratio must be >= 1");
  if (!(label_noise >= 0.0 && label_noise < 0.5)) throw ConfigError("synth.label_noise must lie in [0, 0.5)");
  if (!(class_noise >= 0.0) || !(feature_noise >= 0.0) || !(translation_norm >= 0.0))
    throw ConfigError("synth noise and translation magnitudes must be >= 0");
  if (!(1.0 - scale_spread > 0.0)) throw ConfigError("synth.scale_spread must be < 1");
}

std::vector<std::size_t> class_sample_counts(const SynthSpec& spec) {
  spec.validate();
  std::vector<std::size_t> counts;
  const double denom = static_cast<double>(spec.num_classes - 1);
  for (int c = 0; c < spec.num_classes; ++c) {
    const double n = static_cast<double>(spec.samples_per_class_max) *
                     std::pow(spec.imbalance_ratio, -static_cast<double>(c) / denom);
    const auto rounded = std::lround(n);
    if (rounded < 2)
      throw DegenerateSpec("class " + std::to_string(c) + " would get " + std::to_string(rounded) +
                           " samples; every class needs at least 2");
    counts.push_back(static_cast<std::size_t>(rounded));
  }
  return counts;
}

namespace {

// d x 2 matrix with orthonormal columns, shared by every domain.
ad::Matrix class_plane(int dim, std::uint64_t seed) {
  CounterRng rng(seed, 0xe3bd);
  ad::Matrix e(static_cast<std::size_t>(dim), 2);
  for (double& v : e.data) v = rng.normal();
  for (std::size_t col = 0; col < 2; ++col) {
    if (col == 1) {
      double proj = 0.0;
      for (std::size_t r = 0; r < e.rows; ++r) proj += e(r, 0) * e(r, 1);
      for (std::size_t r = 0; r < e.rows; ++r) e(r, 1) -= proj * e(r, 0);
    }
    double n = 0.0;
    for (std::size_t r = 0; r < e.rows; ++r) n += e(r, col) * e(r, col);
    n = std::sqrt(n);
    for (std::size_t r = 0; r < e.rows; ++r) e(r, col) /= n;
  }
  return e;
}

}  // namespace

std::vector<DomainDataset> gen_synthetic(const SynthSpec& spec) {
  const auto counts = class_sample_counts(spec);
  const auto dim = static_cast<std::size_t>(spec.feature_dim);
  const ad::Matrix plane = class_plane(spec.feature_dim, spec.seed);

  std::vector<DomainDataset> out;
  for (int dom = 0; dom < spec.num_domains; ++dom) {
    const double u = 2.0 * dom / static_cast<double>(spec.num_domains - 1) - 1.0;
    const double angle = u * spec.max_rotation_deg * std::numbers::pi / 180.0;
    const double scale = 1.0 + u * spec.scale_spread;
    const double ca = std::cos(angle), sa = std::sin(angle);

    CounterRng shift_rng(spec.seed, 0x7a00 + static_cast<std::uint64_t>(dom));
    std::vector<double> translation(dim);
    for (double& t : translation) t = shift_rng.normal();
    const double tn = ad::norm2(translation);
    for (double& t : translation) t *= spec.translation_norm / tn;

    DomainDataset ds;
    ds.domain_id = dom;
    ds.name = "domain" + std::to_string(dom);
    ds.num_classes = spec.num_classes;
    const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    ds.x = ad::Matrix(total, dim);
    ds.y.reserve(total);

    CounterRng rng(spec.seed, 0x10000 + static_cast<std::uint64_t>(dom));
    std::size_t row = 0;
    for (int c = 0; c < spec.num_classes; ++c) {
      const double theta = 2.0 * std::numbers::pi * c / static_cast<double>(spec.num_classes);
      for (std::size_t k = 0; k < counts[static_cast<std::size_t>(c)]; ++k, ++row) {
        const double z0 = spec.class_radius * std::cos(theta) + spec.class_noise * rng.normal();
        const double z1 = spec.class_radius * std::sin(theta) + spec.class_noise * rng.normal();
        const double r0 = scale * (ca * z0 - sa * z1);
        const double r1 = scale * (sa * z0 + ca * z1);
        auto xr = ds.x.row(row);
        for (std::size_t j = 0; j < dim; ++j)
          xr[j] = plane(j, 0) * r0 + plane(j, 1) * r1 + translation[j] + spec.feature_noise * rng.normal();
        int label = c;
        if (spec.label_noise > 0.0 && rng.uniform() < spec.label_noise)
          label = static_cast<int>((static_cast<std::uint64_t>(c) + 1 + rng.below(spec.num_classes - 1)) %
                                   static_cast<std::uint64_t>(spec.num_classes));
        ds.y.push_back(label);
      }
    }
    ds.recount();
    out.push_back(std::move(ds));
  }
  return out;
}

// ---- split -----------------------------------------------------------------

DomainDataset split(DomainDataset dataset, double train_frac, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ConfigError("train_frac must lie in (0, 1)");
  const auto num_classes = static_cast<std::size_t>(dataset.num_classes);
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < dataset.size(); ++i) by_class[static_cast<std::size_t>(dataset.y[i])].push_back(i);

  // Largest-remainder allocation so the overall train size is round(f * n)
  // while every class stays within one sample of f * n_c.
  std::vector<std::size_t> take(num_classes);
  std::vector<double> remainder(num_classes);
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double exact = train_frac * static_cast<double>(by_class[c].size());
    take[c] = static_cast<std::size_t>(std::floor(exact));
    remainder[c] = exact - std::floor(exact);
    assigned += take[c];
  }
  const auto target = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(dataset.size())));
  std::vector<std::size_t> order(num_classes);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < target && k < order.size(); ++k) {
    if (take[order[k]] < by_class[order[k]].size()) {
      ++take[order[k]];
      ++assigned;
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t n = by_class[c].size();
    if (n >= 2) take[c] = std::clamp<std::size_t>(take[c], 1, n - 1);
  }

  dataset.train.clear();
  dataset.val.clear();
  CounterRng rng(seed, 0x5b1d);
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& idx = by_class[c];
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    dataset.train.insert(dataset.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take[c]));
    dataset.val.insert(dataset.val.end(), idx.begin() + static_cast<std::ptrdiff_t>(take[c]), idx.end());
  }
  std::sort(dataset.train.begin(), dataset.train.end());
  std::sort(dataset.val.begin(), dataset.val.end());
  return dataset;
}

// ---- frequencies -----------------------------------------------------------

std::vector<double> train_class_counts(const DomainDataset& dataset) {
  std::vector<double> counts(static_cast<std::size_t>(dataset.num_classes), 0.0);
  if (dataset.is_split()) {
    for (std::size_t i : dataset.train) counts[static_cast<std::size_t>(dataset.y[i])] += 1.0;
  } else {
    for (int label : dataset.y) counts[static_cast<std::size_t>(label)] += 1.0;
  }
  return counts;
}

std::vector<double> class_frequencies(const DomainDataset& dataset) {
  auto counts = train_class_counts(dataset);
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  if (!(total > 0.0)) throw ConfigError("dataset " + dataset.name + " has no training samples");
  for (double& c : counts) c /= total;
  return counts;
}

// ---- file format -----------------------------------------------------------

namespace {

std::string_view trim_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

bool is_comment(std::string_view s) { return !s.empty() && s.front() == '#'; }

template <typename T>
T parse_number(std::string_view field, std::size_t line, const char* what) {
  T value{};
  const char* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc() || ptr != end || field.empty())
    throw ParseError(std::string("invalid ") + what + " '" + std::string(field) + "'", line);
  return value;
}

}  // namespace

DomainDataset parse_dataset(std::string_view text, const ExpectedSchema& expected) {
  std::size_t pos = 0;
  std::size_t line_no = 0;
  auto next_line = [&](std::string_view& out) -> bool {
    while (pos < text.size()) {
      const std::size_t nl = text.find('\n', pos);
      const std::size_t end = nl == std::string_view::npos ? text.size() : nl;
      out = trim_cr(text.substr(pos, end - pos));
      pos = nl == std::string_view::npos ? text.size() : nl + 1;
      ++line_no;
      if (is_comment(out)) continue;
      return true;
    }
    return false;
  };

  std::string_view line;
  if (!next_line(line)) throw ParseError("missing header line", 0);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("header is not valid JSON: ") + e.what(), line_no);
  }
  auto int_field = [&](const char* key) -> long long {
    if (!header.is_object() || !header.contains(key) || !header[key].is_number_integer())
      throw ParseError(std::string("header field '") + key + "' missing or not an integer", line_no);
    return header[key].get<long long>();
  };
  if (int_field("version") != 1) throw ParseError("unsupported dataset version", line_no);
  if (!header.contains("domain") || !header["domain"].is_string())
    throw ParseError("header field 'domain' missing or not a string", line_no);
  const long long num_classes = int_field("C");
  const long long dim = int_field("d");
  const long long n = int_field("n");
  if (num_classes < 2) throw ParseError("C must be >= 2", line_no);
  if (dim < 1) throw ParseError("d must be >= 1", line_no);
  if (n < 0) throw ParseError("n must be >= 0", line_no);
  if (expected.num_classes && *expected.num_classes != num_classes)
    throw SchemaError("dataset has C=" + std::to_string(num_classes) + ", experiment expects C=" +
                      std::to_string(*expected.num_classes));
  if (expected.dim && *expected.dim != dim)
    throw SchemaError("dataset has d=" + std::to_string(dim) + ", experiment expects d=" +
                      std::to_string(*expected.dim));
  // Cheap sanity bound before reserving: every data line needs >= 2d+1 bytes.
  if (static_cast<unsigned long long>(n) > text.size()) throw ParseError("n exceeds file size", line_no);

  DomainDataset ds;
  ds.name = header["domain"].get<std::string>();
  ds.num_classes = static_cast<int>(num_classes);
  ds.x = ad::Matrix(static_cast<std::size_t>(n), static_cast<std::size_t>(dim));
  ds.y.reserve(static_cast<std::size_t>(n));

  for (long long row = 0; row < n; ++row) {
    if (!next_line(line))
      throw ParseError("truncated: expected " + std::to_string(n) + " samples, found " + std::to_string(row), line_no);
    std::size_t field = 0;
    std::size_t start = 0;
    auto xr = ds.x.row(static_cast<std::size_t>(row));
    while (true) {
      const std::size_t comma = line.find(',', start);
      const auto token = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
      if (field == 0) {
        const int label = parse_number<int>(token, line_no, "label");
        if (label < 0 || label >= num_classes) throw ParseError("label out of range", line_no);
        ds.y.push_back(label);
      } else {
        if (field > static_cast<std::size_t>(dim)) throw ParseError("too many features", line_no);
        const double v = parse_number<double>(token, line_no, "feature");
        if (!std::isfinite(v)) throw ParseError("non-finite feature", line_no);
        xr[field - 1] = v;
      }
      ++field;
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (field != static_cast<std::size_t>(dim) + 1)
      throw ParseError("expected " + std::to_string(dim) + " features, found " + std::to_string(field - 1), line_no);
  }
  while (next_line(line))
    if (!line.empty()) throw ParseError("unexpected data after " + std::to_string(n) + " samples", line_no);

  ds.recount();
  return ds;
}

DomainDataset load_dataset_file(const std::filesystem::path& path, const ExpectedSchema& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_dataset(buffer.str(), expected);
}

std::string format_dataset(const DomainDataset& dataset) {
  nlohmann::ordered_json header;
  header["version"] = 1;
  header["domain"] = dataset.name;
  header["C"] = dataset.num_classes;
  header["d"] = dataset.dim();
  header["n"] = dataset.size();

  std::string out = header.dump();
  out += '\n';
  char buf[64];
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    out += std::to_string(dataset.y[i]);
    for (double v : dataset.x.row(i)) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
      out += ',';
      out.append(buf, ptr);
    }
    out += '\n';
  }
  return out;
}

void save_dataset_file(const std::filesystem::path& path, const DomainDataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << format_dataset(dataset);
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace fedtail::data
