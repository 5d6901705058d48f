#include "phanes/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "phanes/errors.hpp"
#include "phanes/io.hpp"

namespace phanes {

namespace {

struct Field {
  std::string section;
  std::string key;
  std::string comment;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

[[noreturn]] void bad_value(const std::string& v, const char* what) {
  throw ConfigError("'" + v + "' is not a valid " + what);
}

double parse_double(const std::string& v) {
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(v, "number");
  return out;
}

template <class I>
I parse_int(const std::string& v) {
  I out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(v, "integer");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(v, "boolean");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : v) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty() || !out.empty()) out.push_back(cur);
  return out;
}

template <class F>
std::string join(const std::vector<F>& items, std::function<std::string(const F&)> f) {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) s += (i ? "," : "") + f(items[i]);
  return s;
}

const char* kind_name(AnomalyKind k) {
  switch (k) {
    case AnomalyKind::hypo: return "hypo";
    case AnomalyKind::hyper: return "hyper";
    case AnomalyKind::scramble: return "scramble";
  }
  return "?";
}

class Registry {
 public:
  explicit Registry(ExperimentConfig& c) {
    section_ = "experiment";
    num("seed", c.seed, "master seed; every stage derives its own stream from it");
    num("resolution", c.resolution, "images are resolution x resolution");
    path("output_dir", c.output_dir, "stage artifacts go to subdirectories of this directory");

    section_ = "data";
    path("dataset_dir", c.data.dataset_dir, "empty: <output_dir>/data");
    num("train_count", c.data.train_count, "healthy training images");
    num("val_count", c.data.val_count, "healthy validation images (also used for threshold calibration)");
    num("test_healthy_count", c.data.test_healthy_count, "held-out healthy images");
    num("test_anomalous_count", c.data.test_anomalous_count, "synthetic-anomaly test images");
    flag("preprocess", c.data.preprocess, "percentile-normalize and resize on load");
    num("phantom_noise_amplitude", c.data.phantom.noise_amplitude);
    num("phantom_edge_softness", c.data.phantom.edge_softness, "pixels at 64x64");

    section_ = "anomaly";
    num("min_blobs", c.data.anomaly.min_blobs);
    num("max_blobs", c.data.anomaly.max_blobs);
    num("min_radius_frac", c.data.anomaly.min_radius_frac);
    num("max_radius_frac", c.data.anomaly.max_radius_frac);
    num("max_area_frac", c.data.anomaly.max_area_frac, "at most 0.5");
    num("min_shift", c.data.anomaly.min_shift, "intensity shift range for hypo/hyper blobs");
    num("max_shift", c.data.anomaly.max_shift);
    num("feather", c.data.anomaly.feather, "rim width relative to the blob radius");
    add("kinds", "any of hypo, hyper, scramble",
        [&c] { return join<AnomalyKind>(c.data.anomaly.kinds, [](const AnomalyKind& k) { return std::string(kind_name(k)); }); },
        [&c](const std::string& v) {
          c.data.anomaly.kinds.clear();
          for (const auto& s : split_list(v)) {
            if (s == "hypo") c.data.anomaly.kinds.push_back(AnomalyKind::hypo);
            else if (s == "hyper") c.data.anomaly.kinds.push_back(AnomalyKind::hyper);
            else if (s == "scramble") c.data.anomaly.kinds.push_back(AnomalyKind::scramble);
            else bad_value(s, "anomaly kind");
          }
        });
    num("quantize_levels", c.data.anomaly.quantize_levels, "65535 keeps injected values exact in 16-bit PNG");

    section_ = "augment";
    num("max_rotation_deg", c.augment.max_rotation_deg);
    num("max_translation_frac", c.augment.max_translation_frac);
    num("scale_min", c.augment.scale_min);
    num("scale_max", c.augment.scale_max);
    num("hflip_prob", c.augment.hflip_prob);

    section_ = "latent";
    num("stages", c.latent_arch.stages, "stride-2 stages; resolution must be divisible by 2^stages");
    num("base_width", c.latent_arch.base_width, "channels of the first stage, doubled per stage");
    num("latent_dim", c.latent_arch.latent_dim);
    num("alpha", c.latent.alpha);
    num("gamma", c.latent.gamma);
    num("lambda_rev", c.latent.lambda_rev, "weight of the reversed embedding loss");
    num("beta_kl", c.latent.beta_kl);
    num("fake_weight", c.latent.fake_weight, "weight of the encoder's generated-sample term");
    num("exp_elbo_scale", c.latent.exp_elbo_scale, "<= 0: 1 / pixel count");
    num("exp_cap", c.latent.exp_cap);
    num("lr", c.latent.lr);
    num("batch_size", c.latent.batch_size);
    num("epochs", c.latent.epochs);
    num("early_stop_patience", c.latent.early_stop_patience);
    add("fake_source", "prior or both",
        [&c] { return std::string(c.latent.fake_source == latent::FakeSource::prior ? "prior" : "both"); },
        [&c](const std::string& v) {
          if (v == "prior") c.latent.fake_source = latent::FakeSource::prior;
          else if (v == "both") c.latent.fake_source = latent::FakeSource::both;
          else bad_value(v, "fake_source");
        });
    flag("augment", c.latent.augment);
    flag("vae_only", c.latent.vae_only, "plain VAE objective (ablation)");
    num("warmup_epochs", c.latent.warmup_epochs, "plain VAE epochs before the introspective terms start");
    num("max_steps", c.latent.max_steps, "0: unlimited");

    section_ = "inpaint";
    num("base_width", c.inpaint_arch.base_width);
    num("blocks", c.inpaint_arch.blocks, "dilated aggregation blocks at the bottleneck");
    add("dilations", "one branch per dilation; 4 * base_width must be divisible by their count",
        [&c] { return join<int>(c.inpaint_arch.dilations, [](const int& d) { return std::to_string(d); }); },
        [&c](const std::string& v) {
          c.inpaint_arch.dilations.clear();
          for (const auto& s : split_list(v)) c.inpaint_arch.dilations.push_back(parse_int<int>(s));
        });
    num("disc_width", c.inpaint_arch.disc_width);
    num("w_l1", c.inpaint.w_l1);
    num("w_perc", c.inpaint.w_perc);
    num("w_adv", c.inpaint.w_adv);
    num("lr_g", c.inpaint.lr_g);
    num("lr_d", c.inpaint.lr_d);
    num("batch_size", c.inpaint.batch_size);
    num("epochs", c.inpaint.epochs);
    num("early_stop_patience", c.inpaint.early_stop_patience);
    num("soft_mask_sigma", c.inpaint.soft_mask_sigma);
    flag("augment", c.inpaint.augment);
    num("max_steps", c.inpaint.max_steps, "0: unlimited");
    num("mask_min_shapes", c.inpaint.sampler.min_shapes);
    num("mask_max_shapes", c.inpaint.sampler.max_shapes);
    num("mask_min_radius_frac", c.inpaint.sampler.min_radius_frac);
    num("mask_max_radius_frac", c.inpaint.sampler.max_radius_frac);
    num("mask_max_fraction", c.inpaint.sampler.max_fraction);
    num("proposal_fraction", c.inpaint.sampler.proposal_fraction, "share of training masks taken from proposals");
    num("proposal_percentile", c.proposal_percentile, "binarization percentile for the proposals");

    section_ = "mask";
    num("clahe_tiles_x", c.mask_map.clahe.tiles_x);
    num("clahe_tiles_y", c.mask_map.clahe.tiles_y);
    num("clahe_clip_limit", c.mask_map.clahe.clip_limit);
    num("clahe_bins", c.mask_map.clahe.bins);
    num("norm_percentile", c.mask_map.norm_percentile);
    num("calibration_percentile", c.calibration_percentile);
    num("dilation_radius", c.dilation_radius);
    add("lpips_backbone", "latent (trained encoder) or random (fixed untrained encoder)",
        [&c] { return std::string(c.lpips.backbone == perceptual::Backbone::latent ? "latent" : "random"); },
        [&c](const std::string& v) {
          if (v == "latent") c.lpips.backbone = perceptual::Backbone::latent;
          else if (v == "random") c.lpips.backbone = perceptual::Backbone::random;
          else bad_value(v, "lpips_backbone");
        });
    num("lpips_first_layer", c.lpips.first_layer, "first encoder stage in the perceptual maps");
    num("lpips_random_width", c.lpips.random_width, "base width of the random backbone");
    num("lpips_random_seed", c.lpips.random_seed, "weights of the random backbone; fixed across stages");

    section_ = "evaluation";
    add("baseline", "method the relative changes refer to",
        [&c] { return c.eval.baseline; }, [&c](const std::string& v) { c.eval.baseline = v; });
    flag("per_image_pooling", c.eval.per_image_pooling, "average per-image metrics instead of pooling pixels");
    num("bootstrap_resamples", c.eval.bootstrap_resamples);
    num("significance_resamples", c.eval.significance_resamples);
    num("figure_rows", c.eval.figure_rows);
  }

  const std::vector<Field>& fields() const { return fields_; }

 private:
  void add(const std::string& key, const std::string& comment, std::function<std::string()> get,
           std::function<void(const std::string&)> set) {
    fields_.push_back({section_, key, comment, std::move(get), std::move(set)});
  }
  template <class N>
  void num(const std::string& key, N& ref, const std::string& comment = {}) {
    if constexpr (std::is_floating_point_v<N>)
      add(key, comment, [&ref] { return fmt(ref); }, [&ref](const std::string& v) { ref = parse_double(v); });
    else
      add(key, comment, [&ref] { return std::to_string(ref); }, [&ref](const std::string& v) { ref = parse_int<N>(v); });
  }
  void flag(const std::string& key, bool& ref, const std::string& comment = {}) {
    add(key, comment, [&ref] { return std::string(ref ? "true" : "false"); },
        [&ref](const std::string& v) { ref = parse_bool(v); });
  }
  void path(const std::string& key, std::filesystem::path& ref, const std::string& comment = {}) {
    add(key, comment, [&ref] { return ref.string(); }, [&ref](const std::string& v) { ref = v; });
  }

  std::string section_;
  std::vector<Field> fields_;
};

}  // namespace

void ExperimentConfig::finalize() {
  try {
    if (resolution < 8) throw std::invalid_argument("resolution must be at least 8");
    if (data.train_count < 1 || data.val_count < 1 || data.test_healthy_count < 0 || data.test_anomalous_count < 0)
      throw std::invalid_argument("split sizes must be positive");
    latent_arch.resolution = resolution;
    inpaint_arch.resolution = resolution;
    latent.augment_params = augment;
    inpaint.augment_params = augment;
    augment.validate();
    data.anomaly.validate();
    latent_arch.validate();
    latent.validate();
    inpaint_arch.validate();
    inpaint.validate();
    mask_map.clahe.validate();
    if (!(calibration_percentile > 0 && calibration_percentile <= 100) ||
        !(proposal_percentile > 0 && proposal_percentile <= 100) ||
        !(mask_map.norm_percentile > 0 && mask_map.norm_percentile <= 100))
      throw std::invalid_argument("percentiles must lie in (0, 100]");
    if (dilation_radius < 0) throw std::invalid_argument("dilation_radius must be >= 0");
    lpips.validate(latent_arch.stages);
    if (eval.bootstrap_resamples < 1 || eval.significance_resamples < 1)
      throw std::invalid_argument("resample counts must be positive");
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::filesystem::path ExperimentConfig::dataset_dir() const {
  return data.dataset_dir.empty() ? output_dir / "data" : data.dataset_dir;
}

std::string to_ini(const ExperimentConfig& config) {
  ExperimentConfig copy = config;
  Registry reg(copy);
  std::ostringstream out;
  std::string section;
  for (const auto& f : reg.fields()) {
    if (f.section != section) {
      out << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
      section = f.section;
    }
    if (!f.comment.empty()) out << "; " << f.comment << '\n';
    out << f.key << " = " << f.get() << '\n';
  }
  return out.str();
}

ExperimentConfig config_from_ini(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  ExperimentConfig config;
  Registry reg(config);
  std::map<std::string, const Field*> index;
  for (const auto& f : reg.fields()) index[f.section + "." + f.key] = &f;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      auto it = index.find(section + "." + key);
      if (it == index.end()) throw ConfigError("unknown config key [" + section + "] " + key);
      try {
        it->second->set(value.data());
      } catch (const ConfigError& e) {
        throw ConfigError("[" + section + "] " + key + ": " + e.what());
      }
    }
  }
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  try {
    return config_from_ini(io::read_text(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& config) {
  io::write_text(path, to_ini(config));
}

nlohmann::json to_json(const ExperimentConfig& config) {
  ExperimentConfig copy = config;
  Registry reg(copy);
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : reg.fields()) j[f.section][f.key] = f.get();
  return j;
}

}  // namespace phanes
