#include "fedtail/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "fedtail/random.hpp"

namespace fedtail::model {

void ModelSpec::validate() const {
  if (input_dim < 1) throw ConfigError("model.input_dim must be >= 1");
  if (feature_dims.empty()) throw ConfigError("model.feature_dims must not be empty");
  for (int w : feature_dims)
    if (w < 1) throw ConfigError("model.feature_dims entries must be >= 1");
  for (int w : discriminator_dims)
    if (w < 1) throw ConfigError("model.discriminator_dims entries must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (num_domains < 2) throw ConfigError("num_domains must be >= 2 (domain loss undefined otherwise)");
}

ad::LayoutPtr make_layout(const ModelSpec& spec) {
  spec.validate();
  auto layout = std::make_shared<ad::Layout>();
  auto fan_in = static_cast<std::size_t>(spec.input_dim);
  for (std::size_t i = 0; i < spec.feature_dims.size(); ++i) {
    const auto out = static_cast<std::size_t>(spec.feature_dims[i]);
    layout->add("F.w" + std::to_string(i), fan_in, out);
    layout->add("F.b" + std::to_string(i), 1, out);
    fan_in = out;
  }
  const auto feat = fan_in;
  layout->add("T.w0", feat, static_cast<std::size_t>(spec.num_classes));
  layout->add("T.b0", 1, static_cast<std::size_t>(spec.num_classes));

  const std::array<std::size_t, 3> d_out{static_cast<std::size_t>(spec.discriminator_dims[0]),
                                         static_cast<std::size_t>(spec.discriminator_dims[1]),
                                         static_cast<std::size_t>(spec.num_domains)};
  fan_in = feat;
  for (std::size_t i = 0; i < d_out.size(); ++i) {
    layout->add("D.w" + std::to_string(i), fan_in, d_out[i]);
    layout->add("D.b" + std::to_string(i), 1, d_out[i]);
    fan_in = d_out[i];
  }
  return layout;
}

ModelParams init(const ModelSpec& spec) {
  ModelParams params(make_layout(spec));
  const auto& segments = params.layout()->segments();
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    if (seg.name[2] != 'w') continue;  // biases stay zero
    const double limit = std::sqrt(6.0 / static_cast<double>(seg.rows + seg.cols));
    CounterRng rng(spec.seed, s + 1);
    for (double& w : params.segment(seg.name)) w = rng.uniform(-limit, limit);
  }
  return params;
}

// ---- graphs ----------------------------------------------------------------

ad::Var features(ad::Tape& tape, const ModelSpec& spec, ad::Var x) {
  if (x.cols() != static_cast<std::size_t>(spec.input_dim))
    throw DimMismatch("input has " + std::to_string(x.cols()) + " features, model expects " +
                      std::to_string(spec.input_dim));
  ad::Var h = x;
  for (std::size_t i = 0; i < spec.feature_dims.size(); ++i) {
    const auto idx = std::to_string(i);
    h = tape.relu(tape.add_row(tape.matmul(h, tape.param("F.w" + idx)), tape.param("F.b" + idx)));
  }
  return h;
}

ad::Var class_logits(ad::Tape& tape, const ModelSpec&, ad::Var feats) {
  return tape.add_row(tape.matmul(feats, tape.param("T.w0")), tape.param("T.b0"));
}

ad::Var domain_logits(ad::Tape& tape, const ModelSpec&, ad::Var feats, double grl_lambda) {
  if (grl_lambda < 0.0) throw ConfigError("grl_lambda must be >= 0");
  ad::Var h = tape.reverse_gradient(feats, grl_lambda);
  h = tape.relu(tape.add_row(tape.matmul(h, tape.param("D.w0")), tape.param("D.b0")));
  h = tape.relu(tape.add_row(tape.matmul(h, tape.param("D.w1")), tape.param("D.b1")));
  return tape.add_row(tape.matmul(h, tape.param("D.w2")), tape.param("D.b2"));
}

Matrix embed(const ModelSpec& spec, const ModelParams& params, const Matrix& x) {
  ad::Tape tape(params);
  return features(tape, spec, tape.constant(x)).value();
}

Matrix forward_probs(const ModelSpec& spec, const ModelParams& params, const Matrix& x) {
  if (x.rows == 0) throw DimMismatch("empty batch");
  ad::Tape tape(params);
  auto f = features(tape, spec, tape.constant(x));
  return tape.softmax(class_logits(tape, spec, f)).value();
}

Matrix forward_domain(const ModelSpec& spec, const ModelParams& params, const Matrix& x,
                      double grl_lambda) {
  if (x.rows == 0) throw DimMismatch("empty batch");
  ad::Tape tape(params);
  auto f = features(tape, spec, tape.constant(x));
  return tape.softmax(domain_logits(tape, spec, f, grl_lambda)).value();
}

// ---- checkpoints -----------------------------------------------------------

void save_params(const std::filesystem::path& path, const std::vector<NamedParams>& blobs) {
  if (blobs.empty()) throw Error("save_params: nothing to save");
  const auto& layout = *blobs.front().params.layout();
  nlohmann::json header;
  header["format"] = "fedtail-params";
  header["version"] = 1;
  header["count"] = layout.size();
  auto& segs = header["segments"] = nlohmann::json::array();
  for (const auto& s : layout.segments())
    segs.push_back({{"name", s.name}, {"offset", s.offset}, {"rows", s.rows}, {"cols", s.cols}});
  auto& names = header["blobs"] = nlohmann::json::array();
  for (const auto& b : blobs) {
    if (!(*b.params.layout() == layout)) throw LayoutMismatch("save_params: blobs differ in layout");
    names.push_back(b.name);
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << header.dump() << '\n';
  for (const auto& b : blobs) {
    for (double v : b.params.values()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
      out.write(bytes, 8);
    }
  }
  if (!out) throw Error("write failed: " + path.string());
}

void save_params(const std::filesystem::path& path, const ModelParams& params) {
  save_params(path, std::vector<NamedParams>{{"params", params}});
}

std::vector<NamedParams> load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error("checkpoint has no header: " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad checkpoint header in " + path.string() + ": " + e.what());
  }
  if (header.value("format", "") != "fedtail-params" || header.value("version", 0) != 1)
    throw Error("unsupported checkpoint format in " + path.string());

  auto layout = std::make_shared<ad::Layout>();
  for (const auto& s : header.at("segments")) {
    layout->add(s.at("name").get<std::string>(), s.at("rows").get<std::size_t>(),
                s.at("cols").get<std::size_t>());
    if (layout->segments().back().offset != s.at("offset").get<std::size_t>())
      throw LayoutMismatch("checkpoint segments are not contiguous");
  }
  if (layout->size() != header.at("count").get<std::size_t>())
    throw LayoutMismatch("checkpoint count does not match segments");

  std::vector<NamedParams> out;
  for (const auto& name : header.at("blobs")) {
    std::vector<double> values(layout->size());
    for (double& v : values) {
      unsigned char bytes[8];
      if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw Error("truncated checkpoint " + path.string());
      std::uint64_t bits = 0;
      for (int i = 7; i >= 0; --i) bits = (bits << 8) | bytes[i];
      v = std::bit_cast<double>(bits);
    }
    out.push_back({name.get<std::string>(), ModelParams(layout, std::move(values))});
  }
  return out;
}

}  // namespace fedtail::model
