#include "phanes/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "phanes/errors.hpp"
#include "phanes/io.hpp"
#include "phanes/rng.hpp"
#include "phanes/scoring.hpp"

namespace phanes::pipeline {

namespace {

constexpr const char* kSplits[] = {"train", "val", "test_healthy", "test_anomalous"};

std::string hex(const unsigned char* d, unsigned n) {
  std::ostringstream s;
  for (unsigned i = 0; i < n; ++i) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(d[i]);
  return s.str();
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw Error("SHA-256 init failed");
  }
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw Error("SHA-256 update failed");
  }
  std::string finish() {
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned n = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), out, &n) != 1) throw Error("SHA-256 final failed");
    return hex(out, n);
  }

 private:
  std::unique_ptr<EVP_MD_CTX, void (*)(EVP_MD_CTX*)> ctx_;
};

std::vector<std::string> files_under(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) {
      auto rel = fs::relative(e.path(), dir).generic_string();
      if (rel != "stage.json") out.push_back(rel);
    }
  std::sort(out.begin(), out.end());
  return out;
}

void say(const RunOptions& o, const std::string& line) {
  if (o.log) *o.log << line << std::endl;
}

std::vector<Image> images_of(const std::vector<LabeledSample>& s) {
  std::vector<Image> out;
  out.reserve(s.size());
  for (const auto& x : s) out.push_back(x.image);
  return out;
}

BinaryMask resize_mask(const BinaryMask& m, int target) {
  Image g(m.height(), m.width());
  for (std::size_t i = 0; i < m.size(); ++i) g[i] = m[i] ? 1.0 : 0.0;
  const Image r = resize_pad(g, target);
  BinaryMask out(target, target);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = r[i] >= 0.5 ? 1 : 0;
  return out;
}

std::string command_for(const std::string& stage) {
  static const std::map<std::string, std::string> commands{
      {kData, "make-phantoms"},  {kLatent, "train-latent"}, {kLatentVae, "train-latent --vae-only"},
      {kInpaint, "train-inpainter"}, {kCalibration, "calibrate"}, {kDetect, "detect"},
      {kDetectGt, "detect --gt-masks"}, {kEval, "evaluate"}};
  const auto it = commands.find(stage);
  return it == commands.end() ? stage : it->second;
}

std::string pad_id(const char* prefix, int i) {
  std::ostringstream s;
  s << prefix << std::setw(5) << std::setfill('0') << i;
  return s.str();
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data.data(), data.size());
  return h.finish();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  Sha256 h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    if (in.gcount() > 0) h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return h.finish();
}

nlohmann::json to_json(const StageManifest& m) {
  return {{"stage", m.stage}, {"config_hash", m.config_hash}, {"seed", m.seed},
          {"inputs", m.inputs}, {"outputs", m.outputs},         {"summary", m.summary}};
}

StageManifest manifest_from_json(const nlohmann::json& j) {
  StageManifest m;
  m.stage = j.at("stage").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  m.summary = j.value("summary", nlohmann::json::object());
  return m;
}

Pipeline::Pipeline(ExperimentConfig config) : config_(std::move(config)) { config_.finalize(); }

fs::path Pipeline::stage_dir(const std::string& stage) const {
  return stage == kData ? config_.dataset_dir() : config_.output_dir / stage;
}

std::string Pipeline::config_hash() const {
  auto j = phanes::to_json(config_);
  j["experiment"].erase("output_dir");
  j["data"].erase("dataset_dir");
  return sha256_hex(j.dump());
}

std::uint64_t Pipeline::stage_seed(const std::string& stage) const {
  // The VAE ablation shares the latent stage's initialization.
  const std::string key = stage == kLatentVae ? std::string(kLatent) : stage;
  std::uint64_t tag = 0;
  for (char c : key) tag = tag * 131 + static_cast<unsigned char>(c);
  return splitmix64(config_.seed ^ splitmix64(tag));
}

fs::path Pipeline::begin_stage(const std::string& stage, const RunOptions& o) const {
  const fs::path dir = stage_dir(stage);
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!o.force) throw ConfigError(dir.string() + " already exists and is not empty; pass --force to overwrite it");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  return dir;
}

void Pipeline::finish_stage(const std::string& stage, const std::vector<std::string>& deps, std::uint64_t seed,
                            nlohmann::json summary) const {
  const fs::path dir = stage_dir(stage);
  StageManifest m;
  m.stage = stage;
  m.config_hash = config_hash();
  m.seed = seed;
  for (const auto& d : deps) m.inputs[d] = sha256_file(stage_dir(d) / "stage.json");
  for (const auto& f : files_under(dir)) m.outputs[f] = sha256_file(dir / f);
  m.summary = std::move(summary);
  io::write_text(dir / "stage.json", to_json(m).dump(2) + "\n");
}

StageManifest Pipeline::verify(const std::string& stage) const {
  const fs::path dir = stage_dir(stage);
  const fs::path file = dir / "stage.json";
  const std::string rerun = "; run 'phanes " + command_for(stage) + "' first";
  if (!fs::exists(file)) throw DependencyError("stage '" + stage + "' has not been run (no " + file.string() + ")" + rerun);
  StageManifest m;
  try {
    m = manifest_from_json(nlohmann::json::parse(io::read_text(file)));
  } catch (const nlohmann::json::exception& e) {
    throw DependencyError("stage manifest " + file.string() + " is unreadable: " + e.what());
  }
  for (const auto& [rel, hash] : m.outputs) {
    if (!fs::exists(dir / rel))
      throw DependencyError("artifact " + (dir / rel).string() + " of stage '" + stage + "' is missing" + rerun);
    if (sha256_file(dir / rel) != hash)
      throw DependencyError("artifact " + (dir / rel).string() + " of stage '" + stage + "' was modified" + rerun);
  }
  for (const auto& [dep, hash] : m.inputs) {
    const fs::path dep_file = stage_dir(dep) / "stage.json";
    if (!fs::exists(dep_file) || sha256_file(dep_file) != hash)
      throw DependencyError("stage '" + stage + "' is stale: its dependency '" + dep + "' changed since it ran" + rerun);
  }
  return m;
}

std::vector<LabeledSample> Pipeline::load_split(const std::string& split) const {
  const fs::path dir = stage_dir(kData);
  const auto records = io::read_manifest(dir / (split + ".tsv"));
  const int res = config_.resolution;
  std::vector<LabeledSample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    LabeledSample s;
    Image img = io::read_png(dir / r.image);
    if (config_.data.preprocess) img = resize_pad(normalize_percentile(img), res);
    if (img.height() != res || img.width() != res)
      throw ConfigError(r.image + " is " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                        " but the resolution is " + std::to_string(res) + "; enable [data] preprocess");
    img.id = fs::path(r.image).stem().string();
    s.image = std::move(img);
    if (r.mask) {
      BinaryMask m = io::read_mask_png(dir / *r.mask);
      if (config_.data.preprocess) m = resize_mask(m, res);
      s.gt_mask = std::move(m);
    }
    if (r.reference) {
      Image ref = io::read_png(dir / *r.reference);
      if (config_.data.preprocess) ref = resize_pad(normalize_percentile(ref), res);
      s.healthy_reference = std::move(ref);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void Pipeline::make_phantoms(const RunOptions& o) {
  const fs::path dir = begin_stage(kData, o);
  const auto seed = stage_seed(kData);
  const auto& d = config_.data;
  const int res = config_.resolution;
  const int counts[] = {d.train_count, d.val_count, d.test_healthy_count, d.test_anomalous_count};
  nlohmann::json summary = nlohmann::json::object();
  for (int s = 0; s < 4; ++s) {
    const std::string split = kSplits[s];
    say(o, "make-phantoms: " + split + " (" + std::to_string(counts[s]) + ")");
    std::vector<io::ManifestRecord> records;
    if (counts[s] == 0) {
      io::write_manifest(dir / (split + ".tsv"), records);
      continue;
    }
    fs::create_directories(dir / "images" / split);
    auto phantoms = generate_phantom_dataset(counts[s], res, splitmix64(seed + static_cast<std::uint64_t>(s)), d.phantom);
    double anomaly_area = 0;
    for (int i = 0; i < counts[s]; ++i) {
      const std::string id = pad_id(split == "test_anomalous" ? "anom_" : "img_", i);
      // Stored on the 16-bit grid so reloading is exact.
      Image healthy = quantize(phantoms[static_cast<std::size_t>(i)], 65535);
      io::ManifestRecord rec{"images/" + split + "/" + id + ".png", std::nullopt, std::nullopt};
      if (split == "test_anomalous") {
        Rng rng = Rng::derive(seed, 0xA11, static_cast<std::uint64_t>(i));
        const LabeledSample sample = inject_synthetic_anomaly(healthy, d.anomaly, rng);
        fs::create_directories(dir / "masks" / split);
        fs::create_directories(dir / "references" / split);
        rec.mask = "masks/" + split + "/" + id + ".png";
        rec.reference = "references/" + split + "/" + id + ".png";
        io::write_png(dir / rec.image, sample.image);
        io::write_mask_png(dir / *rec.mask, *sample.gt_mask);
        io::write_png(dir / *rec.reference, healthy);
        anomaly_area += sample.gt_mask->fraction();
      } else {
        io::write_png(dir / rec.image, healthy);
      }
      records.push_back(std::move(rec));
    }
    io::write_manifest(dir / (split + ".tsv"), records);
    summary[split] = counts[s];
    if (split == "test_anomalous") summary["mean_anomaly_fraction"] = anomaly_area / counts[s];
  }
  finish_stage(kData, {}, seed, summary);
}

void Pipeline::train_latent(const RunOptions& o) {
  const std::string stage = o.vae_only ? kLatentVae : kLatent;
  verify(kData);
  const auto train = images_of(load_split("train"));
  const auto val = images_of(load_split("val"));
  const fs::path dir = begin_stage(stage, o);
  auto cfg = config_.latent;
  cfg.vae_only = cfg.vae_only || o.vae_only;
  const auto seed = stage_seed(stage);
  latent::TrainOptions topt;
  topt.out_dir = dir;
  topt.on_epoch = [&](const latent::EpochLog& e) {
    std::ostringstream s;
    s << stage << ": epoch " << e.epoch << " enc " << e.encoder_loss << " dec " << e.decoder_loss << " val_elbo "
      << e.val_elbo;
    say(o, s.str());
  };
  const auto r = latent::train_latent(train, val, config_.latent_arch, cfg, seed, topt);
  finish_stage(stage, {kData}, seed,
               {{"epochs_run", r.epochs_run},
                {"early_stopped", r.early_stopped},
                {"initial_val_elbo", r.initial_val_elbo},
                {"best_val_elbo", r.best_val_elbo}});
}

void Pipeline::train_inpainter(const RunOptions& o) {
  verify(kData);
  verify(kLatent);
  const auto model = latent::load_model(stage_dir(kLatent) / "checkpoint.ckpt");
  const auto train = images_of(load_split("train"));
  const auto val = images_of(load_split("val"));
  const fs::path dir = begin_stage(kInpaint, o);
  const auto seed = stage_seed(kInpaint);
  std::vector<BinaryMask> proposals;
  if (config_.inpaint.sampler.proposal_fraction > 0) {
    say(o, "train-inpainter: computing mask proposals");
    proposals = inpaint::mask_proposals(model, train, config_.mask_map, config_.proposal_percentile,
                                        config_.inpaint.sampler.max_fraction, config_.lpips);
  }
  const auto fx = perceptual::make_features(model, config_.lpips);
  inpaint::TrainOptions topt;
  topt.out_dir = dir;
  topt.on_epoch = [&](const inpaint::EpochLog& e) {
    std::ostringstream s;
    s << "inpaint: epoch " << e.epoch << " G " << e.generator_loss << " D " << e.discriminator_loss << " val_l1 "
      << e.val_masked_l1;
    say(o, s.str());
  };
  const auto r = inpaint::train_inpainter(train, val, config_.inpaint_arch, config_.inpaint, seed,
                                          config_.inpaint.w_perc > 0 ? &fx : nullptr, proposals, topt);
  finish_stage(kInpaint, {kData, kLatent}, seed,
               {{"epochs_run", r.epochs_run},
                {"early_stopped", r.early_stopped},
                {"proposals", proposals.size()},
                {"initial_val_masked_l1", r.initial_val_l1},
                {"best_val_masked_l1", r.best_val_l1}});
}

void Pipeline::calibrate(const RunOptions& o) {
  verify(kData);
  verify(kLatent);
  const auto model = latent::load_model(stage_dir(kLatent) / "checkpoint.ckpt");
  const auto fx = perceptual::make_features(model, config_.lpips);
  auto maps_of = [&](const std::vector<LabeledSample>& split) {
    std::vector<ScoreMap> maps;
    for (const auto& s : split) maps.push_back(anomaly_mask_map(s.image, model.reconstruct(s.image), fx, config_.mask_map));
    return maps;
  };
  const auto val = load_split("val");
  const auto test = load_split("test_healthy");
  const fs::path dir = begin_stage(kCalibration, o);
  say(o, "calibrate: " + std::to_string(val.size()) + " healthy validation maps");
  // Calibrated on the window maxima so the percentile holds for the dilated
  // masks that detection produces.
  auto val_maps = maps_of(val);
  for (auto& m : val_maps) m = max_filter(m, config_.dilation_radius);
  const auto threshold = calibrate_threshold(val_maps, config_.calibration_percentile);
  save_threshold(dir / "threshold.txt", threshold);
  nlohmann::json summary{{"threshold", threshold.value}, {"percentile", threshold.percentile},
                         {"calibration_set_size", threshold.calibration_set_size}};
  if (!test.empty()) {
    std::size_t flagged = 0, total = 0;
    for (const auto& m : maps_of(test)) {
      const auto b = dilate(binarize(m, threshold), config_.dilation_radius);
      flagged += b.count();
      total += b.size();
    }
    summary["healthy_test_flagged_fraction"] = static_cast<double>(flagged) / static_cast<double>(total);
    summary["healthy_test_images"] = test.size();
  }
  finish_stage(kCalibration, {kData, kLatent}, 0, summary);
}

void Pipeline::detect(const RunOptions& o) {
  const std::string stage = o.gt_masks ? kDetectGt : kDetect;
  verify(kData);
  verify(kLatent);
  verify(kInpaint);
  MaskThreshold threshold;
  std::vector<std::string> deps{kData, kLatent, kInpaint};
  if (!o.gt_masks) {
    verify(kCalibration);
    threshold = load_threshold(stage_dir(kCalibration) / "threshold.txt");
    deps.push_back(kCalibration);
  }
  const scoring::Detector det(latent::load_model(stage_dir(kLatent) / "checkpoint.ckpt"),
                              inpaint::load_generator(stage_dir(kInpaint) / "checkpoint.ckpt"), threshold,
                              scoring::DetectOptions{config_.mask_map, config_.dilation_radius, config_.lpips});
  const auto samples = load_split("test_anomalous");
  const fs::path dir = begin_stage(stage, o);
  say(o, stage + ": " + std::to_string(samples.size()) + " images");
  double mask_fraction = 0;
  for (const auto& s : samples) {
    if (o.gt_masks && !s.gt_mask) throw DependencyError("sample " + s.image.id + " has no ground-truth mask");
    const auto r = o.gt_masks ? det.detect_with_gt_mask(s.image, *s.gt_mask) : det.detect(s.image);
    scoring::save_result(dir / "results" / s.image.id, r);
    mask_fraction += r.mask.fraction();
  }
  finish_stage(stage, deps, 0,
               {{"images", samples.size()},
                {"mean_mask_fraction", samples.empty() ? 0.0 : mask_fraction / static_cast<double>(samples.size())}});
}

eval::MetricsReport Pipeline::evaluate(const RunOptions& o) {
  verify(kData);
  verify(kLatent);
  verify(kDetect);
  std::vector<std::string> deps{kData, kLatent, kDetect};
  const auto samples = load_split("test_anomalous");
  const auto model = latent::load_model(stage_dir(kLatent) / "checkpoint.ckpt");
  const auto fx = perceptual::make_features(model, config_.lpips);

  auto load_results = [&](const std::string& stage) {
    eval::MethodResults m;
    for (const auto& s : samples) m.results.push_back(scoring::load_result(stage_dir(stage) / "results" / s.image.id));
    return m;
  };
  auto reconstruction = [&](const latent::LatentModel<float>& lm) {
    eval::MethodResults m;
    for (const auto& s : samples) m.results.push_back(scoring::reconstruction_baseline(s.image, lm.reconstruct(s.image)));
    return m;
  };

  std::vector<eval::MethodResults> methods;
  methods.push_back(load_results(kDetect));
  methods.back().name = "PHANES";
  if (fs::exists(stage_dir(kDetectGt) / "stage.json")) {
    verify(kDetectGt);
    deps.push_back(kDetectGt);
    methods.push_back(load_results(kDetectGt));
    methods.back().name = "PHANES-GT";
  }
  methods.push_back(reconstruction(model));
  methods.back().name = "latent-only";
  if (fs::exists(stage_dir(kLatentVae) / "stage.json")) {
    verify(kLatentVae);
    deps.push_back(kLatentVae);
    methods.push_back(reconstruction(latent::load_model(stage_dir(kLatentVae) / "checkpoint.ckpt")));
    methods.back().name = "VAE";
  }

  eval::ReportOptions ro;
  for (const auto& m : methods)
    if (m.name == config_.eval.baseline) ro.baseline = m.name;
  ro.pooling = config_.eval.per_image_pooling ? eval::Pooling::per_image : eval::Pooling::pooled;
  ro.seed = config_.seed;
  ro.bootstrap_resamples = config_.eval.bootstrap_resamples;
  ro.significance_resamples = config_.eval.significance_resamples;

  const fs::path dir = begin_stage(kEval, o);
  say(o, "evaluate: " + std::to_string(methods.size()) + " methods on " + std::to_string(samples.size()) + " images");
  auto report = eval::build_report(methods, samples, &fx, ro);
  io::write_text(dir / "report.txt", report.to_text());
  io::write_text(dir / "report.json", report.to_json().dump(2) + "\n");
  if (!samples.empty()) eval::write_figure(dir / "figure.png", methods[0].results, config_.eval.figure_rows);
  finish_stage(kEval, deps, config_.seed);
  return report;
}

std::string Pipeline::report() const {
  verify(kEval);
  return io::read_text(stage_dir(kEval) / "report.txt");
}

eval::MetricsReport Pipeline::run_all(const RunOptions& o) {
  make_phantoms(o);
  RunOptions plain = o;
  plain.vae_only = false;
  plain.gt_masks = false;
  train_latent(plain);
  RunOptions vae = plain;
  vae.vae_only = true;
  train_latent(vae);
  train_inpainter(plain);
  calibrate(plain);
  detect(plain);
  RunOptions gt = plain;
  gt.gt_masks = true;
  detect(gt);
  return evaluate(plain);
}

}  // namespace phanes::pipeline
