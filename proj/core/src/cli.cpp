#include "fedtail/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace fedtail::cli {

using nlohmann::json;
using nlohmann::ordered_json;

void init_logging() {
  static std::once_flag once;
  std::call_once(once, [] {
    auto logger = spdlog::stderr_color_mt("fedtail");
    spdlog::set_default_logger(logger);
  });
  const char* env = std::getenv("FEDTAIL_LOG");
  const std::string level = env ? env : "info";
  if (level == "error")
    spdlog::set_level(spdlog::level::err);
  else if (level == "debug")
    spdlog::set_level(spdlog::level::debug);
  else
    spdlog::set_level(spdlog::level::info);
}

// ---- config ----------------------------------------------------------------

json load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("empty component in override key: " + key);
    if (!node->is_object()) *node = json::object();
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

namespace {

// Walks an object section, dispatching known keys and rejecting the rest.
class Section {
 public:
  Section(const json& config, std::string name) : name_(std::move(name)) {
    if (config.contains(name_)) {
      node_ = &config.at(name_);
      if (!node_->is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    }
  }

  template <typename T>
  void read(const char* key, T& target) {
    seen_.emplace_back(key);
    if (!node_ || !node_->contains(key)) return;
    try {
      target = node_->at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  const json* raw(const char* key) {
    seen_.emplace_back(key);
    if (!node_ || !node_->contains(key)) return nullptr;
    return &node_->at(key);
  }

  void finish() const {
    if (!node_) return;
    for (const auto& [k, v] : node_->items())
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end())
        throw ConfigError("unknown config key '" + name_ + "." + k + "'");
  }

 private:
  std::string name_;
  const json* node_ = nullptr;
  std::vector<std::string> seen_;
};

}  // namespace

exp::ExperimentSpec spec_from_json(const json& config) {
  if (!config.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : config.items())
    if (k != "synth" && k != "model" && k != "sgd" && k != "fedtail" && k != "experiment" && k != "data_dir")
      throw ConfigError("unknown config section '" + k + "'");

  exp::ExperimentSpec spec;
  if (config.contains("data_dir")) {
    if (!config["data_dir"].is_string()) throw ConfigError("data_dir must be a string");
    spec.data_dir = config["data_dir"].get<std::string>();
  }

  Section synth(config, "synth");
  synth.read("num_domains", spec.synth.num_domains);
  synth.read("num_classes", spec.synth.num_classes);
  synth.read("feature_dim", spec.synth.feature_dim);
  synth.read("samples_per_class_max", spec.synth.samples_per_class_max);
  synth.read("imbalance_ratio", spec.synth.imbalance_ratio);
  synth.read("max_rotation_deg", spec.synth.max_rotation_deg);
  synth.read("translation_norm", spec.synth.translation_norm);
  synth.read("scale_spread", spec.synth.scale_spread);
  synth.read("class_radius", spec.synth.class_radius);
  synth.read("class_noise", spec.synth.class_noise);
  synth.read("feature_noise", spec.synth.feature_noise);
  synth.read("label_noise", spec.synth.label_noise);
  synth.read("seed", spec.synth.seed);
  synth.finish();

  Section model(config, "model");
  model.read("feature_dims", spec.model.feature_dims);
  model.read("discriminator_dims", spec.model.discriminator_dims);
  model.read("seed", spec.model.seed);
  model.finish();

  Section sgd(config, "sgd");
  if (const json* lr = sgd.raw("lr")) {
    if (lr->is_number())
      spec.lr = lr->get<double>();
    else if (!(lr->is_string() && lr->get<std::string>() == "auto") && !lr->is_null())
      throw ConfigError("sgd.lr must be a number or \"auto\"");
  }
  sgd.read("lr_sam", spec.lr_sam);
  sgd.read("lr_base", spec.lr_base);
  sgd.read("momentum", spec.sgd.momentum);
  sgd.read("weight_decay", spec.sgd.weight_decay);
  sgd.read("batch_size", spec.sgd.batch_size);
  sgd.finish();

  Section ft(config, "fedtail");
  auto& f = spec.fedtail;
  ft.read("rho", f.rho);
  ft.read("alpha", f.alpha);
  ft.read("grl_lambda", f.grl_lambda);
  ft.read("power_iters", f.power_iters);
  ft.read("curvature_refresh_period", f.curvature_refresh_period);
  ft.read("teacher_momentum", f.teacher_momentum);
  ft.read("classwise_plain", f.classwise_plain);
  if (const json* mode = ft.raw("qt_mode")) {
    const auto m = mode->is_string() ? mode->get<std::string>() : "";
    if (m == "frequency")
      f.qt_mode = objective::QtMode::Frequency;
    else if (m == "momentum_teacher")
      f.qt_mode = objective::QtMode::MomentumTeacher;
    else
      throw ConfigError("fedtail.qt_mode must be \"frequency\" or \"momentum_teacher\"");
  }
  if (const json* scope = ft.raw("coherence_scope")) {
    const auto s = scope->is_string() ? scope->get<std::string>() : "";
    if (s == "features")
      f.coherence_scope = objective::CoherenceScope::Features;
    else if (s == "full")
      f.coherence_scope = objective::CoherenceScope::Full;
    else
      throw ConfigError("fedtail.coherence_scope must be \"features\" or \"full\"");
  }
  if (const json* terms = ft.raw("terms")) {
    if (!terms->is_array()) throw ConfigError("fedtail.terms must be an array of term names");
    objective::TermSet set{false, false, false, false, false};
    for (const auto& t : *terms) {
      const auto name = t.is_string() ? t.get<std::string>() : "";
      if (name == "cls")
        set.cls = true;
      else if (name == "adv")
        set.adv = true;
      else if (name == "sharp_er")
        set.sharp_er = true;
      else if (name == "classwise")
        set.classwise = true;
      else if (name == "coh")
        set.coh = true;
      else
        throw ConfigError("unknown loss term '" + t.dump() + "'");
    }
    f.terms = set;
  }
  if (const json* w = ft.raw("weights")) {
    if (!w->is_object()) throw ConfigError("fedtail.weights must be an object");
    json wrapper{{"weights", *w}};
    Section weights(wrapper, "weights");
    weights.read("cls", f.weights.cls);
    weights.read("adv", f.weights.adv);
    weights.read("sharp_er", f.weights.sharp_er);
    weights.read("classwise", f.weights.classwise);
    weights.read("coh", f.weights.coh);
    weights.finish();
  }
  ft.finish();

  Section ex(config, "experiment");
  ex.read("rounds", spec.rounds);
  ex.read("num_seeds", spec.num_seeds);
  ex.read("seed", spec.seed);
  ex.read("held_out", spec.held_out);
  ex.read("train_frac", spec.train_frac);
  ex.read("threads", spec.threads);
  ex.read("record_timing", spec.record_timing);
  if (const json* agg = ex.raw("aggregation")) {
    const auto a = agg->is_string() ? agg->get<std::string>() : "";
    if (a == "weighted")
      spec.aggregation = fl::Aggregation::Weighted;
    else if (a == "uniform")
      spec.aggregation = fl::Aggregation::Uniform;
    else
      throw ConfigError("experiment.aggregation must be \"weighted\" or \"uniform\"");
  }
  ex.finish();

  spec.validate();
  return spec;
}

exp::ExperimentSpec resolve_spec(const Options& options) {
  json config = load_config(options.config);
  for (const auto& s : options.sets) apply_override(config, s);
  if (options.seed) apply_override(config, "experiment.seed=" + std::to_string(*options.seed));
  if (options.threads) apply_override(config, "experiment.threads=" + std::to_string(*options.threads));
  // Relative data_dir is resolved against the config file's directory.
  if (config.contains("data_dir") && config["data_dir"].is_string()) {
    std::filesystem::path dir = config["data_dir"].get<std::string>();
    if (dir.is_relative()) config["data_dir"] = (options.config.parent_path() / dir).string();
  }
  return spec_from_json(config);
}

// ---- writers ---------------------------------------------------------------

namespace {

ordered_json doubles(const std::vector<double>& v) {
  ordered_json out = ordered_json::array();
  for (double x : v) out.push_back(x);  // NaN serializes as null
  return out;
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace

ordered_json to_json(const exp::MetricsRecord& r) {
  ordered_json losses;
  losses["cls"] = r.losses.cls;
  losses["adv"] = r.losses.adv;
  losses["sharp_er"] = r.losses.sharp_er;
  losses["classwise"] = r.losses.classwise_total;
  losses["classwise_per_class"] = doubles(r.losses.classwise);
  losses["coh"] = r.losses.coh;
  losses["total"] = r.losses.total;
  losses["adv_log_likelihood"] = r.losses.adv_log_likelihood;

  ordered_json j;
  j["run_id"] = r.run_id;
  j["seed"] = r.seed;
  j["held_out"] = r.held_out;
  j["round"] = r.round;
  j["losses"] = std::move(losses);
  j["accuracy"] = r.accuracy;
  j["macro_accuracy"] = r.macro_accuracy;
  j["per_class_accuracy"] = doubles(r.per_class_accuracy);
  j["gamma"] = doubles(r.gamma);
  j["coherence_dot"] = r.coherence_dot;
  j["client_val_accuracy"] = doubles(r.client_val_accuracy);
  j["participating"] = r.participating;
  j["wall_ms"] = r.wall_ms ? ordered_json(*r.wall_ms) : ordered_json(nullptr);
  return j;
}

std::string metrics_jsonl(const std::vector<exp::MetricsRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

std::string summary_csv(const exp::ExperimentResult& result) {
  std::ostringstream out;
  out << "held_out,seeds,accuracy_mean,accuracy_std,macro_mean,macro_std\n";
  for (const auto& name : result.domain_names) {
    std::vector<double> acc, macro;
    for (const auto& f : result.finals)
      if (f.held_out == name) {
        acc.push_back(f.accuracy);
        macro.push_back(f.macro_accuracy);
      }
    if (acc.empty()) continue;
    out << name << ',' << acc.size() << ',' << fmt6(exp::mean(acc)) << ',' << fmt6(exp::stddev(acc)) << ','
        << fmt6(exp::mean(macro)) << ',' << fmt6(exp::stddev(macro)) << '\n';
  }
  std::vector<double> macro_per_seed;
  for (auto s : result.seeds) {
    std::vector<double> m;
    for (const auto& f : result.finals)
      if (f.seed == s) m.push_back(f.macro_accuracy);
    macro_per_seed.push_back(exp::mean(m));
  }
  const auto acc_per_seed = result.per_seed_mean_accuracy();
  out << "mean," << result.seeds.size() << ',' << fmt6(exp::mean(acc_per_seed)) << ','
      << fmt6(exp::stddev(acc_per_seed)) << ',' << fmt6(exp::mean(macro_per_seed)) << ','
      << fmt6(exp::stddev(macro_per_seed)) << '\n';
  return out.str();
}

std::string ablation_csv(const std::vector<exp::AblationRow>& rows) {
  std::ostringstream out;
  if (rows.empty()) return {};
  const auto& names = rows.front().result.domain_names;
  out << "method,cls,adv,sharp_er,classwise,coh";
  for (const auto& n : names) out << ',' << n;
  out << ",avg,avg_std,macro_avg,tail_macro_avg\n";
  for (const auto& row : rows) {
    const auto& t = row.terms;
    out << row.label << ',' << t.cls << ',' << t.adv << ',' << t.sharp_er << ',' << t.classwise << ',' << t.coh;
    for (const auto& n : names) {
      std::vector<double> acc;
      for (const auto& f : row.result.finals)
        if (f.held_out == n) acc.push_back(f.accuracy);
      out << ',' << (acc.empty() ? std::string() : fmt6(exp::mean(acc)));
    }
    const auto per_seed = row.result.per_seed_mean_accuracy();
    std::vector<int> all_classes;
    if (!row.result.finals.empty())
      for (std::size_t c = 0; c < row.result.finals.front().per_class_accuracy.size(); ++c)
        all_classes.push_back(static_cast<int>(c));
    const auto macro = row.result.per_seed_mean_class_accuracy(all_classes);
    const auto tail = row.result.per_seed_mean_class_accuracy(exp::tail_classes(static_cast<int>(all_classes.size())));
    out << ',' << fmt6(exp::mean(per_seed)) << ',' << fmt6(exp::stddev(per_seed)) << ',' << fmt6(exp::mean(macro))
        << ',' << fmt6(exp::mean(tail)) << '\n';
  }
  return out.str();
}

// ---- subcommands -----------------------------------------------------------

namespace {

int guarded(const char* command, const std::function<int()>& body) {
  try {
    return body();
  } catch (const data::SchemaError& e) {
    spdlog::error("{}: {}", command, e.what());
    return kConfigError;
  } catch (const data::ParseError& e) {
    spdlog::error("{}: {}", command, e.what());
    return kConfigError;
  } catch (const ConfigError& e) {
    spdlog::error("{}: {}", command, e.what());
    return kConfigError;
  } catch (const LayoutMismatch& e) {
    spdlog::error("{}: {}", command, e.what());
    return kConfigError;
  } catch (const NumericalError& e) {
    spdlog::error("{}: numerical failure: {}", command, e.what());
    return kNumericalError;
  } catch (const std::exception& e) {
    spdlog::error("{}: {}", command, e.what());
    return kFailure;
  }
}

exp::RoundHook checkpoint_hook(const Options& options, const std::string& prefix) {
  if (options.checkpoint_every <= 0) return {};
  const auto root = options.out / "checkpoints";
  const int every = options.checkpoint_every;
  return [root, every, prefix](const exp::RunKey& key, const fl::ServerState& server) {
    if (server.round % every != 0) return;
    const auto dir = root / (prefix + "seed" + std::to_string(key.seed) + "-" + key.held_out);
    std::filesystem::create_directories(dir);
    model::save_params(dir / ("round_" + std::to_string(server.round) + ".params"),
                       {{"global", server.global}, {"teacher", server.teacher}});
  };
}

}  // namespace

int run(const Options& options) {
  return guarded("run", [&] {
    const auto spec = resolve_spec(options);
    std::filesystem::create_directories(options.out);
    const auto result = exp::run_experiment(spec, checkpoint_hook(options, ""));
    write_file(options.out / "metrics.jsonl", metrics_jsonl(result.records));
    write_file(options.out / "summary.csv", summary_csv(result));
    spdlog::info("wrote {} records to {}", result.records.size(), (options.out / "metrics.jsonl").string());
    return kOk;
  });
}

int ablation(const Options& options) {
  return guarded("ablation", [&] {
    const auto spec = resolve_spec(options);
    std::filesystem::create_directories(options.out);
    std::vector<exp::AblationRow> rows;
    std::vector<exp::MetricsRecord> records;
    for (int r = 1; r <= 5; ++r) {
      auto s = spec;
      s.fedtail.terms = objective::TermSet::ladder(r);
      const auto& label = exp::ladder_labels()[static_cast<std::size_t>(r - 1)];
      spdlog::info("ablation row {} ({})", r, label);
      auto result = exp::run_experiment(s, checkpoint_hook(options, "row" + std::to_string(r) + "-"));
      for (auto rec : result.records) {
        rec.run_id = "row" + std::to_string(r) + "-" + rec.run_id;
        records.push_back(std::move(rec));
      }
      rows.push_back({r, label, s.fedtail.terms, std::move(result)});
    }
    write_file(options.out / "metrics.jsonl", metrics_jsonl(records));
    write_file(options.out / "ablation.csv", ablation_csv(rows));
    return kOk;
  });
}

int export_embeddings(const Options& options) {
  return guarded("export-embeddings", [&] {
    const auto spec = resolve_spec(options);
    if (options.checkpoint.empty()) throw ConfigError("export-embeddings needs --checkpoint PATH");
    if (!std::filesystem::exists(options.checkpoint))
      throw ConfigError("checkpoint not found: " + options.checkpoint.string());
    const auto blobs = model::load_params(options.checkpoint);
    const model::NamedParams* chosen = &blobs.front();
    for (const auto& b : blobs)
      if (b.name == "global") chosen = &b;

    const auto domains = exp::make_domains(spec, spec.seed);
    model::ModelSpec mspec = spec.model;
    mspec.input_dim = domains.front().dim();
    mspec.num_classes = domains.front().num_classes;
    mspec.num_domains = static_cast<int>(domains.size());
    if (!(*model::make_layout(mspec) == *chosen->params.layout()))
      throw LayoutMismatch("checkpoint layout does not match the configured model");

    std::ostringstream out;
    out << "domain,label";
    for (int i = 0; i < mspec.feature_width(); ++i) out << ",f" << i;
    out << '\n';
    char buf[64];
    for (const auto& d : domains) {
      if (d.val.empty()) continue;
      const auto batch = d.batch(d.val);
      const auto feats = model::embed(mspec, chosen->params, batch.x);
      for (std::size_t n = 0; n < feats.rows; ++n) {
        out << d.name << ',' << batch.y[n];
        for (double v : feats.row(n)) {
          std::snprintf(buf, sizeof buf, "%.17g", v);
          out << ',' << buf;
        }
        out << '\n';
      }
    }
    std::filesystem::create_directories(options.out);
    write_file(options.out / "embeddings.csv", out.str());
    return kOk;
  });
}

int gen_data(const Options& options) {
  return guarded("gen-data", [&] {
    json config = options.config.empty() ? json::object() : load_config(options.config);
    for (const auto& s : options.sets) apply_override(config, s);
    if (options.seed) apply_override(config, "synth.seed=" + std::to_string(*options.seed));
    const auto spec = spec_from_json(config);
    const auto domains = data::gen_synthetic(spec.synth);
    std::filesystem::create_directories(options.out);
    for (const auto& d : domains) data::save_dataset_file(options.out / (d.name + ".data"), d);
    spdlog::info("wrote {} domain files to {}", domains.size(), options.out.string());
    return kOk;
  });
}

}  // namespace fedtail::cli
