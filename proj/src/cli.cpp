#include "pcisr/cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <nlohmann/json.hpp>
#include <sstream>

#include "pcisr/finetune.hpp"
#include "pcisr/io.hpp"
#include "pcisr/metrics.hpp"
#include "pcisr/ops.hpp"
#include "pcisr/recon.hpp"
#include "pcisr/serialize.hpp"
#include "pcisr/training.hpp"

namespace pcisr {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string() + " for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("SHA-256 unavailable");
  std::vector<char> buffer(1 << 16);
  while (in) {
    in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buffer.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int{digest[i]};
  return hex.str();
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

// ---------------------------------------------------------------- config

enum class Kind { text, real, integer, extent, flag, reals, texts };

Extent2 parse_extent(const std::string& s) {
  const auto x = s.find_first_of("xX");
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    std::size_t used = 0;
    const auto rows = std::stoull(s.substr(0, x), &used);
    if (used != x) throw std::invalid_argument(s);
    const auto cols = std::stoull(s.substr(x + 1), &used);
    if (used != s.size() - x - 1) throw std::invalid_argument(s);
    return {rows, cols};
  } catch (const std::logic_error&) {
    throw ConfigError("expected an extent like 32x32, got '" + s + "'");
  }
}

std::vector<double> parse_reals(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::logic_error&) {
      throw ConfigError("expected a comma-separated list of numbers, got '" + s + "'");
    }
  }
  return out;
}

// Effective configuration of a subcommand: built-in defaults, overlaid by an
// optional JSON file, overlaid by flags given on the command line.
class Settings {
 public:
  explicit Settings(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_file_, "JSON config file; flags override its values");
    add("out", Kind::text, "--out", "Run directory", std::string("run"));
  }

  void add(const std::string& key, Kind kind, const std::string& flag, const std::string& help, json fallback) {
    defaults_[key] = std::move(fallback);
    kinds_[key] = kind;
    Entry e{key, kind, nullptr};
    if (kind == Kind::flag) {
      e.option = app_->add_flag(flag, help);
    } else if (kind == Kind::texts) {
      lists_.emplace_back();
      e.list = &lists_.back();
      e.option = app_->add_option(flag, *e.list, help);
    } else {
      raws_.emplace_back();
      e.raw = &raws_.back();
      e.option = app_->add_option(flag, *e.raw, help);
    }
    entries_.push_back(e);
  }

  json resolve() const {
    json cfg = defaults_;
    if (!config_file_.empty()) {
      std::ifstream in(config_file_);
      if (!in) throw ConfigError("cannot open config file " + config_file_);
      json file;
      try {
        file = json::parse(in);
      } catch (const json::exception& e) {
        throw ConfigError("malformed config " + config_file_ + ": " + e.what());
      }
      if (!file.is_object()) throw ConfigError("config " + config_file_ + " must hold a JSON object");
      for (const auto& [key, value] : file.items()) {
        if (!defaults_.contains(key)) throw ConfigError("unknown key '" + key + "' in " + config_file_);
        cfg[key] = normalize(key, value);
      }
    }
    for (const auto& e : entries_) {
      if (e.option->count() == 0) continue;
      switch (e.kind) {
        case Kind::flag: cfg[e.key] = true; break;
        case Kind::texts: cfg[e.key] = *e.list; break;
        default: cfg[e.key] = normalize(e.key, json(*e.raw)); break;
      }
    }
    return cfg;
  }

 private:
  json normalize(const std::string& key, const json& v) const {
    const Kind kind = kinds_.at(key);
    try {
      switch (kind) {
        case Kind::real:
          return v.is_string() ? json(std::stod(v.get<std::string>())) : json(v.get<double>());
        case Kind::integer: {
          if (v.is_string()) {
            const auto& s = v.get<std::string>();
            if (s.empty() || s[0] == '-') throw ConfigError(key + " must be a nonnegative integer");
            return json(std::stoull(s));
          }
          return json(v.get<std::uint64_t>());
        }
        case Kind::extent:
          return v.is_string() ? json(parse_extent(v.get<std::string>())) : json(v.get<Extent2>());
        case Kind::reals:
          return v.is_string() ? json(parse_reals(v.get<std::string>())) : json(v.get<std::vector<double>>());
        case Kind::flag: return json(v.get<bool>());
        case Kind::texts:
          return v.is_string() ? json(std::vector<std::string>{v.get<std::string>()}) : json(v.get<std::vector<std::string>>());
        case Kind::text: return json(v.get<std::string>());
      }
    } catch (const json::exception& e) {
      throw ConfigError("invalid value for " + key + ": " + e.what());
    } catch (const std::logic_error&) {
      throw ConfigError("invalid value for " + key + ": " + v.dump());
    }
    return v;
  }

  struct Entry {
    std::string key;
    Kind kind;
    CLI::Option* option;
    std::string* raw = nullptr;
    std::vector<std::string>* list = nullptr;
  };

  CLI::App* app_;
  std::string config_file_;
  json defaults_ = json::object();
  std::map<std::string, Kind> kinds_;
  std::deque<std::string> raws_;
  std::deque<std::vector<std::string>> lists_;
  std::vector<Entry> entries_;
};

std::string text(const json& cfg, const char* key) { return cfg.at(key).get<std::string>(); }
double real(const json& cfg, const char* key) { return cfg.at(key).get<double>(); }
std::uint64_t integer(const json& cfg, const char* key) { return cfg.at(key).get<std::uint64_t>(); }
Extent2 extent(const json& cfg, const char* key) { return cfg.at(key).get<Extent2>(); }
bool flag(const json& cfg, const char* key) { return cfg.at(key).get<bool>(); }

fs::path required_path(const json& cfg, const char* key) {
  const auto p = text(cfg, key);
  if (p.empty()) {
    std::string option = key;
    std::replace(option.begin(), option.end(), '_', '-');
    throw ConfigError("missing required path --" + option);
  }
  return p;
}

// ---------------------------------------------------------------- run dir

class RunDir {
 public:
  RunDir(fs::path root, std::string command, std::vector<std::string> argv)
      : root_(std::move(root)), command_(std::move(command)), argv_(std::move(argv)), start_(Clock::now()) {
    fs::create_directories(root_);
  }

  fs::path artifact(const std::string& name) {
    if (std::find(artifacts_.begin(), artifacts_.end(), name) == artifacts_.end()) artifacts_.push_back(name);
    return root_ / name;
  }
  const fs::path& root() const { return root_; }
  json& timings() { return timings_; }
  json& results() { return results_; }

  void finish(const json& config, const json& seeds) {
    json checksums = json::object();
    for (const auto& a : artifacts_) checksums[a] = sha256_file(root_ / a);
    timings_["wall_seconds"] = seconds_since(start_);
    const json manifest{{"command", command_}, {"argv", argv_},     {"config", config},   {"seeds", seeds},
                        {"artifacts", checksums}, {"timings", timings_}, {"results", results_}};
    std::ofstream out(root_ / "manifest.json", std::ios::trunc);
    if (!out) throw FormatError("cannot write " + (root_ / "manifest.json").string());
    out << manifest.dump(2) << '\n';
  }

 private:
  fs::path root_;
  std::string command_;
  std::vector<std::string> argv_;
  Clock::time_point start_;
  std::vector<std::string> artifacts_;
  json timings_ = json::object();
  json results_ = json::object();
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- images

Tensor read_image(const fs::path& path) {
  Tensor t = path.extension() == ".pgm" ? read_pgm(path) : load_tensor(path);
  if (t.ndim() != 2) throw ShapeError("image " + path.string() + " must be 2-D, got " + shape_string(t.shape()));
  return t;
}

Tensor read_object(const fs::path& path) {
  Tensor t = read_image(path);
  for (double v : t.data()) {
    if (v < 0.0 || v > 1.0) throw ShapeError("object " + path.string() + " has values outside [0, 1]");
  }
  return t;
}

Tensor clamp01(const Tensor& t) {
  auto v = t.to_vector();
  for (auto& x : v) x = std::clamp(x, 0.0, 1.0);
  return Tensor(t.shape(), std::move(v));
}

// Linear rescale of the value range onto [0, 1].
Tensor normalize_range(const Tensor& t) {
  auto v = t.to_vector();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, b = *hi;
  for (auto& x : v) x = b > a ? (x - a) / (b - a) : 0.0;
  return Tensor(t.shape(), std::move(v));
}

void save_image(RunDir& run, const std::string& stem, const Tensor& image) {
  save_tensor(run.artifact(stem + ".pcit"), image);
  write_pgm(run.artifact(stem + ".pgm"), clamp01(image), 16);
}

fs::path measurement_base(const fs::path& p) {
  const auto ext = p.extension();
  return ext == ".pcit" || ext == ".json" ? fs::path(p).replace_extension() : p;
}

fs::path net_base(const fs::path& p) {
  const auto ext = p.extension();
  return ext == ".pcit" || ext == ".json" ? fs::path(p).replace_extension() : p;
}

MaskSet read_masks(const json& cfg) { return load_masks(required_path(cfg, "masks"), extent(cfg, "mask_element")); }

void check_masks_fit(const MaskSet& masks, const SparseOTF& otf, const fs::path& masks_path) {
  const Extent2 e = masks.element_shape(), dmd = otf.dmd_shape();
  if (dmd.rows % e.rows != 0 || dmd.cols % e.cols != 0) {
    throw ShapeError("mask element of " + masks_path.string() + " does not tile the OTF DMD plane");
  }
}

// Trained artifacts referenced by a `train` run directory.
struct TrainedModel {
  UNetParams params;
  MaskSet masks{Tensor::zeros(Shape{1, 1, 1})};
  SparseOTF otf = make_ideal_otf({1, 1}, {1, 1});
  double t1 = 0.0;
  double sigma = 0.0;
  bool squared = true;
};

TrainedModel load_train_run(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  if (manifest.value("command", "") != "train") throw ConfigError(dir.string() + " is not a train run directory");
  TrainedModel m;
  m.params = load_params(dir / "unet");
  m.masks = load_masks(dir / "masks.pcit", manifest.at("config").at("mask_element").get<Extent2>());
  m.otf = load_otf(dir / "otf.pcio");
  m.t1 = manifest.at("timings").at("T1").get<double>();
  m.sigma = manifest.at("config").at("sigma").get<double>();
  m.squared = !manifest.at("config").at("linear_noise").get<bool>();
  return m;
}

void add_finetune_options(Settings& s) {
  s.add("ft_lr", Kind::real, "--ft-lr", "Fine-tune learning rate", 2e-4);
  s.add("ft_max_steps", Kind::integer, "--ft-max-steps", "Fine-tune step limit", 300);
  s.add("ft_tol", Kind::real, "--ft-tol", "Relative loss decrease over the patience window that stops fine-tuning", 1e-4);
  s.add("ft_patience", Kind::integer, "--ft-patience", "Steps in the stopping window", 20);
  s.add("ft_line_search", Kind::flag, "--ft-line-search", "Monotone line-search mode", false);
  s.add("ft_mode", Kind::text, "--ft-mode", "per-measurement or per-region", std::string("per-measurement"));
}

FinetuneConfig finetune_config(const json& cfg) {
  FinetuneConfig fc;
  fc.learning_rate = real(cfg, "ft_lr");
  fc.max_steps = integer(cfg, "ft_max_steps");
  fc.tol = real(cfg, "ft_tol");
  fc.patience = integer(cfg, "ft_patience");
  fc.line_search = flag(cfg, "ft_line_search");
  fc.mode = parse_finetune_mode(text(cfg, "ft_mode"));
  fc.seed = integer(cfg, "seed");
  fc.validate();
  return fc;
}

void write_loss_history(const fs::path& path, const std::vector<double>& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "step,loss\n" << std::setprecision(17);
  for (std::size_t k = 0; k < history.size(); ++k) out << k << ',' << history[k] << '\n';
}

// ---------------------------------------------------------------- commands

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  std::unique_ptr<Settings> settings;
  std::function<json(const json&, RunDir&)> body;  // returns the seeds record
};

json cmd_make_otf(const json& cfg, RunDir& run) {
  const SparseOTF otf = make_ideal_otf(extent(cfg, "dmd"), extent(cfg, "factor"));
  save_otf(run.artifact("otf.pcio"), otf);
  run.results()["nnz"] = otf.nnz();
  run.results()["detector"] = otf.detector_shape();
  return json::object();
}

json cmd_perturb_otf(const json& cfg, RunDir& run) {
  const SparseOTF base = load_otf(required_path(cfg, "otf"));
  OTFPerturbation p;
  p.shift_y = real(cfg, "shift_y");
  p.shift_x = real(cfg, "shift_x");
  p.rotation = real(cfg, "rotation");
  p.scale = real(cfg, "scale");
  p.blur_sigma = real(cfg, "blur");
  p.gain_jitter = real(cfg, "gain_jitter");
  const auto result = perturb_otf_detailed(base, p, integer(cfg, "seed"));
  save_otf(run.artifact("otf.pcio"), result.otf);
  std::ofstream gains(run.artifact("gains.csv"), std::ios::trunc);
  gains << "row,gain\n" << std::setprecision(17);
  for (std::size_t i = 0; i < result.row_gains.size(); ++i) gains << i << ',' << result.row_gains[i] << '\n';
  return {{"perturbation", integer(cfg, "seed")}};
}

double relative_frobenius(const SparseOTF& a, const SparseOTF& b) {
  const auto da = a.dense(), db = b.dense();
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    num += (da[i] - db[i]) * (da[i] - db[i]);
    den += db[i] * db[i];
  }
  return std::sqrt(num / den);
}

json cmd_calibrate(const json& cfg, RunDir& run) {
  Tensor masks, frames;
  std::optional<SparseOTF> truth;
  const std::uint64_t seed = integer(cfg, "seed");
  if (!text(cfg, "masks").empty() || !text(cfg, "frames").empty()) {
    masks = load_tensor(required_path(cfg, "masks"));
    frames = load_tensor(required_path(cfg, "frames"));
    if (masks.ndim() != 3 || frames.ndim() != 3) throw ShapeError("calibration masks and frames must be 3-D stacks");
  } else {
    truth = load_otf(required_path(cfg, "otf"));
    const Extent2 dmd = truth->dmd_shape();
    const auto n = integer(cfg, "n_cal");
    std::mt19937_64 rng(derive_seed(seed, {1}));
    std::bernoulli_distribution coin(0.5);
    std::vector<double> m(n * dmd.count());
    for (auto& v : m) v = coin(rng) ? 1.0 : 0.0;
    masks = Tensor(Shape{n, dmd.rows, dmd.cols}, std::move(m));
    const Tensor ones = Tensor::full(Shape{dmd.rows, dmd.cols}, 1.0);
    frames = pci_measure(*truth, masks, ones, NoiseConfig{real(cfg, "sigma"), !flag(cfg, "linear_noise"), derive_seed(seed, {2})});
  }
  const Extent2 det{frames.extent(1), frames.extent(2)}, dmd{masks.extent(1), masks.extent(2)};
  const auto windows = default_windows(det, dmd, integer(cfg, "dilation"));
  const auto result = calibrate_otf(masks, frames, windows, real(cfg, "ridge"));
  save_otf(run.artifact("otf.pcio"), result.otf);
  std::ofstream csv(run.artifact("calibration.csv"), std::ios::trunc);
  csv << "row,residual\n" << std::setprecision(17);
  for (std::size_t i = 0; i < result.residual.size(); ++i) csv << i << ',' << result.residual[i] << '\n';
  run.results()["clamped"] = result.clamped;
  run.results()["ridge"] = result.ridge;
  if (truth) run.results()["relative_frobenius_error"] = relative_frobenius(result.otf, *truth);
  return {{"masks", derive_seed(seed, {1})}, {"noise", derive_seed(seed, {2})}};
}

json cmd_make_dataset(const json& cfg, RunDir& run) {
  const std::uint64_t seed = integer(cfg, "seed");
  const auto images = make_synthetic_dataset(integer(cfg, "n"), extent(cfg, "size"), seed);
  std::vector<double> stack;
  for (const auto& img : images) stack.insert(stack.end(), img.data().begin(), img.data().end());
  const Extent2 size = extent(cfg, "size");
  save_tensor(run.artifact("dataset.pcit"), Tensor(Shape{images.size(), size.rows, size.cols}, std::move(stack)));
  const auto split = split_dataset(images, derive_seed(seed, {1}), real(cfg, "train_fraction"), real(cfg, "val_fraction"));
  std::ofstream out(run.artifact("split.json"), std::ios::trunc);
  out << json{{"train", split.train_ids}, {"validation", split.validation_ids}, {"test", split.test_ids}}.dump(2) << '\n';
  if (size.rows >= 32 && size.cols >= 32) write_pgm(run.artifact("chart.pgm"), images.front(), 16);
  return {{"dataset", seed}, {"split", derive_seed(seed, {1})}};
}

std::vector<Tensor> unstack(const Tensor& stack) {
  if (stack.ndim() != 3) throw ShapeError("expected an [n x P x Q] image stack, got " + shape_string(stack.shape()));
  const std::size_t n = stack.extent(0), len = stack.extent(1) * stack.extent(2);
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < n; ++k) {
    out.emplace_back(Shape{stack.extent(1), stack.extent(2)},
                     std::vector<double>(stack.data().begin() + static_cast<std::ptrdiff_t>(k * len),
                                         stack.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * len)));
  }
  return out;
}

std::vector<Tensor> pick(const std::vector<Tensor>& images, const json& ids, const fs::path& split_path) {
  std::vector<Tensor> out;
  for (const auto& id : ids) {
    const auto i = id.get<std::size_t>();
    if (i >= images.size()) throw ShapeError("split " + split_path.string() + " references image " + std::to_string(i));
    out.push_back(images[i]);
  }
  return out;
}

json cmd_train(const json& cfg, RunDir& run) {
  const fs::path dataset_path = required_path(cfg, "dataset");
  const auto images = unstack(load_tensor(dataset_path));
  const SparseOTF otf = load_otf(required_path(cfg, "otf"));
  const std::uint64_t seed = integer(cfg, "seed");
  std::vector<Tensor> train_set, val_set;
  if (!text(cfg, "split").empty()) {
    const fs::path split_path = text(cfg, "split");
    const json split = read_json(split_path);
    train_set = pick(images, split.at("train"), split_path);
    val_set = pick(images, split.at("validation"), split_path);
  } else {
    const auto split = split_dataset(images, derive_seed(seed, {1}));
    train_set = split.train;
    val_set = split.validation;
  }
  TrainConfig tc;
  tc.learning_rate = real(cfg, "lr");
  tc.batch_size = integer(cfg, "batch_size");
  tc.epochs = integer(cfg, "epochs");
  tc.noise_sigma = real(cfg, "sigma");
  tc.squared_convention = !flag(cfg, "linear_noise");
  tc.seed = seed;
  tc.n_masks = integer(cfg, "n_masks");
  tc.mask_element = extent(cfg, "mask_element");
  tc.unet.depth = integer(cfg, "depth");
  tc.unet.base_channels = integer(cfg, "base_channels");
  tc.max_steps = integer(cfg, "max_steps");
  const Extent2 dmd = otf.dmd_shape();
  tc.region = RegionSpec{{0, 0}, dmd, {0, 0}, otf.detector_shape()};
  const TrainResult result = train(train_set, val_set, otf, tc);

  save_params(run.root() / "unet", result.params);
  run.artifact("unet.json");
  run.artifact("unet.pcit");
  export_masks(run.artifact("masks.pcit"), result.masks, dmd);
  write_pbm(run.artifact("masks.pbm"), result.masks.binary(dmd));
  save_otf(run.artifact("otf.pcio"), otf);
  std::ofstream csv(run.artifact("report.csv"), std::ios::trunc);
  write_report_csv(csv, result.report);
  run.timings()["T1"] = result.report.t1_seconds;
  run.results()["best_epoch"] = result.report.best_epoch;
  run.results()["steps"] = result.report.steps;
  return {{"train", seed}, {"masks", derive_seed(seed, {10})}, {"params", derive_seed(seed, {11})}};
}

json cmd_measure(const json& cfg, RunDir& run) {
  const SparseOTF otf = load_otf(required_path(cfg, "otf"));
  const Tensor object = read_object(required_path(cfg, "object"));
  const std::uint64_t seed = integer(cfg, "seed");
  MaskSet masks = text(cfg, "masks").empty()
                      ? MaskSet::random(integer(cfg, "n_masks"), extent(cfg, "mask_element"), derive_seed(seed, {1}))
                      : read_masks(cfg);
  check_masks_fit(masks, otf, text(cfg, "masks"));
  export_masks(run.artifact("masks.pcit"), masks, otf.dmd_shape());
  const NoiseConfig noise{real(cfg, "sigma"), !flag(cfg, "linear_noise"), derive_seed(seed, {2})};
  const RegionSpec region{{0, 0}, otf.dmd_shape(), {0, 0}, otf.detector_shape()};
  const MeasurementSet y = pci_measure(otf, masks, object, noise, region);
  save_measurements(run.root() / "measurements", y);
  run.artifact("measurements.pcit");
  run.artifact("measurements.json");
  run.results()["values_per_region"] = y.frames.numel();
  run.results()["sampling_rate"] = static_cast<double>(y.frames.numel()) / static_cast<double>(otf.cols());
  return {{"masks", derive_seed(seed, {1})}, {"noise", noise.seed}};
}

json cmd_reconstruct(const json& cfg, RunDir& run) {
  const std::string method = text(cfg, "method");
  const SparseOTF otf = load_otf(required_path(cfg, "otf"));
  const MaskSet masks = read_masks(cfg);
  check_masks_fit(masks, otf, text(cfg, "masks"));
  const MeasurementSet y = load_measurements(measurement_base(required_path(cfg, "measurements")));
  if (y.detector_shape() != otf.detector_shape() || y.n_masks() != masks.n_masks()) {
    throw ShapeError("measurements " + text(cfg, "measurements") + " do not match the OTF or masks");
  }
  const Tensor binary = masks.binary(otf.dmd_shape());
  NoGradScope no_grad;
  Tensor image;
  if (method == "gi") {
    image = normalize_range(gi_reconstruct(otf, binary, y.frames));
  } else if (method == "tv") {
    TVConfig tc;
    tc.lambda = real(cfg, "lambda");
    tc.max_iters = integer(cfg, "max_iters");
    const TVResult r = tv_reconstruct(otf, binary, y.frames, tc);
    image = r.image;
    std::ofstream csv(run.artifact("history.csv"), std::ios::trunc);
    write_history_csv(csv, r.history);
    run.results()["converged"] = r.converged;
  } else if (method == "net" || method == "net-ft") {
    const UNetParams params = load_params(net_base(required_path(cfg, "net")));
    if (method == "net") {
      image = reshape(unet_forward(params, gi_reconstruct(otf, binary, y.frames)), Shape{otf.dmd_shape().rows, otf.dmd_shape().cols});
    } else {
      const auto r = finetune_region(params, masks, otf, y, finetune_config(cfg));
      image = r.images.front();
      write_loss_history(run.artifact("history.csv"), r.history);
      run.timings()["T2"] = r.t2_seconds;
      run.results()["finetune_mode"] = to_string(r.mode);
      run.results()["steps"] = r.steps;
    }
  } else {
    throw ConfigError("unknown method '" + method + "' (expected gi, tv, net or net-ft)");
  }
  save_image(run, "reconstruction", image);
  return {{"measurements", y.seed}};
}

json cmd_finetune(const json& cfg, RunDir& run) {
  const SparseOTF otf = load_otf(required_path(cfg, "otf"));
  const MaskSet masks = read_masks(cfg);
  check_masks_fit(masks, otf, text(cfg, "masks"));
  const UNetParams params = load_params(net_base(required_path(cfg, "net")));
  const auto paths = cfg.at("measurements").get<std::vector<std::string>>();
  if (paths.empty()) throw ConfigError("missing required path --measurements");
  std::vector<MeasurementSet> sets;
  for (const auto& p : paths) sets.push_back(load_measurements(measurement_base(p)));
  const FinetuneConfig fc = finetune_config(cfg);
  const auto results = finetune_sets(params, masks, otf, sets, fc);
  std::size_t image_index = 0;
  json t2 = json::array();
  for (std::size_t r = 0; r < results.size(); ++r) {
    const std::string suffix = results.size() == 1 ? "" : "_" + std::to_string(r);
    save_params(run.root() / ("unet_ft" + suffix), results[r].params);
    run.artifact("unet_ft" + suffix + ".json");
    run.artifact("unet_ft" + suffix + ".pcit");
    write_loss_history(run.artifact("history" + suffix + ".csv"), results[r].history);
    for (const auto& img : results[r].images) save_image(run, "reconstruction_" + std::to_string(image_index++), img);
    t2.push_back(results[r].t2_seconds);
  }
  run.timings()["T2_list"] = t2;
  run.results()["finetune_mode"] = to_string(fc.mode);
  return {{"finetune", fc.seed}};
}

json cmd_evaluate(const json& cfg, RunDir& run) {
  const Tensor reference = read_image(required_path(cfg, "reference"));
  const auto images = cfg.at("images").get<std::vector<std::string>>();
  if (images.empty()) throw ConfigError("missing required path --image");
  MetricConfig mc;
  mc.bit_depth = static_cast<int>(integer(cfg, "bit_depth"));
  mc.convention = parse_psnr_convention(text(cfg, "convention"));
  std::vector<MetricRow> rows;
  for (const auto& p : images) {
    const Tensor img = read_image(p);
    rows.push_back({fs::path(p).stem().string(), text(cfg, "method"), real(cfg, "sigma"), psnr(reference, img, mc),
                    ssim(reference, img, mc), mc.convention});
  }
  std::ofstream csv(run.artifact("metrics.csv"), std::ios::trunc);
  write_metrics_csv(csv, rows);
  return json::object();
}

json cmd_fov_run(const json& cfg, RunDir& run) {
  const TrainedModel model = load_train_run(required_path(cfg, "train_run"));
  const Extent2 fov_size = extent(cfg, "fov"), region_size = extent(cfg, "region"), factor = extent(cfg, "factor");
  const SparseOTF full = text(cfg, "otf").empty() ? make_ideal_otf(fov_size, factor) : load_otf(text(cfg, "otf"));
  if (full.dmd_shape() != fov_size) throw ShapeError("full OTF does not match the FOV extent");
  const RegionSpec fov{{0, 0}, fov_size, {0, 0}, full.detector_shape()};
  const auto regions = split_fov(fov, region_size);
  const std::uint64_t seed = integer(cfg, "seed");

  Tensor object;
  if (!text(cfg, "object").empty()) {
    object = read_object(text(cfg, "object"));
  } else {
    const auto tiles = make_synthetic_dataset(regions.size() + 1, region_size, derive_seed(seed, {1}));
    std::vector<double> px(fov_size.count());
    for (std::size_t k = 0; k < regions.size(); ++k) {
      const auto& r = regions[k];
      for (std::size_t y = 0; y < r.size.rows; ++y)
        for (std::size_t x = 0; x < r.size.cols; ++x)
          px[(r.origin.row + y) * fov_size.cols + r.origin.col + x] = tiles[k + 1][y * r.size.cols + x];
    }
    object = Tensor(Shape{fov_size.rows, fov_size.cols}, std::move(px));
  }
  if (object.shape() != Shape{fov_size.rows, fov_size.cols}) throw ShapeError("object does not match the FOV extent");
  check_masks_fit(model.masks, full, "trained masks");

  const NoiseConfig noise{real(cfg, "sigma"), model.squared, derive_seed(seed, {2})};
  const Tensor frames = pci_measure(full, model.masks.binary(fov_size), object, noise);
  const Extent2 det = full.detector_shape();
  std::vector<MeasurementSet> sets;
  for (const auto& r : regions) {
    std::vector<double> crop;
    for (std::size_t m = 0; m < model.masks.n_masks(); ++m)
      for (std::size_t y = 0; y < r.detector_size.rows; ++y)
        for (std::size_t x = 0; x < r.detector_size.cols; ++x)
          crop.push_back(frames[(m * det.rows + r.detector_origin.row + y) * det.cols + r.detector_origin.col + x]);
    MeasurementSet s;
    s.frames = Tensor(Shape{model.masks.n_masks(), r.detector_size.rows, r.detector_size.cols}, std::move(crop));
    s.noise_sigma = noise.sigma;
    s.squared_convention = noise.squared_convention;
    s.seed = noise.seed;
    s.region = r;
    sets.push_back(std::move(s));
  }
  const FovResult result = reconstruct_fov(fov, region_size, full, model.masks, model.params, sets, finetune_config(cfg), model.t1);
  save_image(run, "mosaic", result.mosaic);
  save_image(run, "object", object);
  for (std::size_t k = 0; k < result.results.size(); ++k) {
    save_image(run, "region_" + std::to_string(k), result.results[k].images.front());
  }
  std::ofstream timing(run.artifact("timing.json"), std::ios::trunc);
  write_timing_json(timing, result.timing);
  run.timings()["T1"] = result.timing.t1;
  run.timings()["T2_list"] = result.timing.t2;
  run.timings()["ratio"] = result.timing.ratio;
  run.results()["regions"] = result.regions;
  run.results()["finetune_mode"] = to_string(FinetuneMode::per_measurement);
  run.results()["mosaic_psnr"] = psnr(object, result.mosaic);
  return {{"object", derive_seed(seed, {1})}, {"noise", noise.seed}};
}

json cmd_bench(const json& cfg, RunDir& run) {
  const TrainedModel model = load_train_run(required_path(cfg, "train_run"));
  const SparseOTF otf = text(cfg, "otf").empty() ? model.otf : load_otf(text(cfg, "otf"));
  if (otf.dmd_shape() != model.otf.dmd_shape()) throw ShapeError("benchmark OTF does not match the trained region");
  const std::uint64_t seed = integer(cfg, "seed");
  const std::size_t n = integer(cfg, "n_images");
  const auto images = make_synthetic_dataset(n + 1, otf.dmd_shape(), derive_seed(seed, {1}));
  const auto sigmas = cfg.at("sigmas").get<std::vector<double>>();
  const auto lambdas = cfg.at("lambdas").get<std::vector<double>>();
  if (lambdas.empty()) throw ConfigError("need at least one TV lambda");
  const FinetuneConfig fc = finetune_config(cfg);
  const Tensor binary = model.masks.binary(otf.dmd_shape());
  const MetricConfig mc;
  std::vector<MetricRow> rows;
  struct Acc {
    double psnr = 0.0, ssim = 0.0;
  };
  std::map<std::pair<std::string, double>, Acc> means;
  for (double sigma : sigmas) {
    for (std::size_t i = 1; i <= n; ++i) {
      const Tensor& x = images[i];
      MeasurementSet y;
      y.frames = pci_measure(otf, binary, x, NoiseConfig{sigma, model.squared, derive_seed(seed, {2, i})});
      std::vector<std::pair<std::string, Tensor>> outputs;
      {
        NoGradScope no_grad;
        const Tensor gi = gi_reconstruct(otf, binary, y.frames);
        outputs.emplace_back("gi", normalize_range(gi));
        outputs.emplace_back("net", reshape(unet_forward(model.params, gi), x.shape()));
        Tensor best_tv;
        double best = -1e300;
        for (double lambda : lambdas) {
          TVConfig tc;
          tc.lambda = lambda;
          const Tensor img = tv_reconstruct(otf, binary, y.frames, tc).image;
          const double p = psnr(x, img, mc);
          if (p > best) {
            best = p;
            best_tv = img;
          }
        }
        outputs.emplace_back("tv", best_tv);
      }
      outputs.emplace_back("net-ft", finetune_region(model.params, model.masks, otf, y, fc).images.front());
      for (const auto& [method, img] : outputs) {
        const MetricRow row{"img" + std::to_string(i), method, sigma, psnr(x, img, mc), ssim(x, img, mc), mc.convention};
        auto& acc = means[{method, sigma}];
        acc.psnr += row.psnr / static_cast<double>(n);
        acc.ssim += row.ssim / static_cast<double>(n);
        rows.push_back(row);
      }
    }
  }
  std::ofstream csv(run.artifact("bench.csv"), std::ios::trunc);
  write_metrics_csv(csv, rows);
  std::ofstream summary(run.artifact("summary.csv"), std::ios::trunc);
  summary << "method,sigma,mean_psnr,mean_ssim,convention\n" << std::setprecision(10);
  for (const auto& [key, acc] : means) {
    summary << key.first << ',' << key.second << ',' << acc.psnr << ',' << acc.ssim << ',' << to_string(mc.convention) << '\n';
  }
  return {{"images", derive_seed(seed, {1})}, {"noise", seed}};
}

void add_noise_options(Settings& s, double sigma = 0.0) {
  s.add("sigma", Kind::real, "--sigma", "Noise level", sigma);
  s.add("linear_noise", Kind::flag, "--linear-noise", "Noise std is sigma * mean(y) instead of sigma^2 * mean(y)", false);
}

void add_mask_options(Settings& s, bool required) {
  s.add("masks", Kind::text, "--masks", required ? "Mask stack (PCIT)" : "Mask stack (PCIT); random when omitted", std::string());
  s.add("mask_element", Kind::extent, "--mask-element", "Mask element extent", Extent2{4, 4});
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Parallel compressive super-resolution imaging toolkit", "pcisr"};
  app.require_subcommand(1);
  std::vector<Command> commands;
  auto add_command = [&](const std::string& name, const std::string& help, auto&& configure,
                         std::function<json(const json&, RunDir&)> body) -> Settings& {
    Command c;
    c.name = name;
    c.app = app.add_subcommand(name, help);
    c.settings = std::make_unique<Settings>(c.app);
    c.settings->add("seed", Kind::integer, "--seed", "Random seed", 0);
    configure(*c.settings);
    c.body = std::move(body);
    commands.push_back(std::move(c));
    return *commands.back().settings;
  };

  add_command("make-otf", "Ideal under-sampling OTF", [](Settings& s) {
    s.add("dmd", Kind::extent, "--dmd", "DMD extent PxQ", Extent2{32, 32});
    s.add("factor", Kind::extent, "--factor", "Under-sampling factor", Extent2{4, 4});
  }, cmd_make_otf);
  add_command("perturb-otf", "Apply a geometric mismatch to an OTF", [](Settings& s) {
    s.add("otf", Kind::text, "--otf", "Input OTF (PCIO)", std::string());
    s.add("shift_y", Kind::real, "--shift-y", "Shift along rows, DMD pixels", 0.0);
    s.add("shift_x", Kind::real, "--shift-x", "Shift along columns, DMD pixels", 0.0);
    s.add("rotation", Kind::real, "--rotation", "Rotation, radians", 0.0);
    s.add("scale", Kind::real, "--scale", "Magnification", 1.0);
    s.add("blur", Kind::real, "--blur", "Gaussian blur sigma, DMD pixels", 0.0);
    s.add("gain_jitter", Kind::real, "--gain-jitter", "Relative per-pixel gain spread", 0.0);
  }, cmd_perturb_otf);
  add_command("calibrate", "Estimate an OTF from random-mask measurements", [](Settings& s) {
    s.add("otf", Kind::text, "--otf", "OTF to simulate calibration frames from", std::string());
    s.add("masks", Kind::text, "--masks", "Measured calibration masks (PCIT)", std::string());
    s.add("frames", Kind::text, "--frames", "Measured calibration frames (PCIT)", std::string());
    s.add("n_cal", Kind::integer, "--n-cal", "Number of simulated calibration masks", 100);
    s.add("dilation", Kind::integer, "--dilation", "Support window dilation, DMD pixels", 4);
    s.add("ridge", Kind::real, "--ridge", "Ridge weight; negative selects the default", -1.0);
    add_noise_options(s);
  }, cmd_calibrate);
  add_command("make-dataset", "Procedural image collection", [](Settings& s) {
    s.add("n", Kind::integer, "--n", "Number of images", 200);
    s.add("size", Kind::extent, "--size", "Image extent", Extent2{32, 32});
    s.add("train_fraction", Kind::real, "--train-fraction", "Training share", 0.8);
    s.add("val_fraction", Kind::real, "--val-fraction", "Validation share", 0.15);
  }, cmd_make_dataset);
  add_command("train", "Joint mask and network training", [](Settings& s) {
    s.add("dataset", Kind::text, "--dataset", "Image stack (PCIT)", std::string());
    s.add("split", Kind::text, "--split", "split.json from make-dataset", std::string());
    s.add("otf", Kind::text, "--otf", "Region OTF (PCIO)", std::string());
    s.add("lr", Kind::real, "--lr", "Learning rate", 2e-4);
    s.add("batch_size", Kind::integer, "--batch-size", "Batch size", 15);
    s.add("epochs", Kind::integer, "--epochs", "Epochs", 30);
    s.add("max_steps", Kind::integer, "--max-steps", "Optimizer step limit, 0 for none", 0);
    s.add("n_masks", Kind::integer, "--n-masks", "Number of masks", 3);
    s.add("mask_element", Kind::extent, "--mask-element", "Mask element extent", Extent2{4, 4});
    s.add("depth", Kind::integer, "--depth", "U-Net down-sampling stages", 4);
    s.add("base_channels", Kind::integer, "--base-channels", "U-Net base width", 16);
    add_noise_options(s, 0.3);
  }, cmd_train);
  add_command("measure", "Simulate parallel measurements of an object", [](Settings& s) {
    s.add("otf", Kind::text, "--otf", "OTF (PCIO)", std::string());
    s.add("object", Kind::text, "--object", "Object image (PGM or PCIT)", std::string());
    s.add("n_masks", Kind::integer, "--n-masks", "Number of random masks when --masks is omitted", 3);
    add_mask_options(s, false);
    add_noise_options(s);
  }, cmd_measure);
  add_command("reconstruct", "Reconstruct an image from measurements", [](Settings& s) {
    s.add("method", Kind::text, "--method", "gi, tv, net or net-ft", std::string("gi"));
    s.add("otf", Kind::text, "--otf", "OTF (PCIO)", std::string());
    add_mask_options(s, true);
    s.add("measurements", Kind::text, "--measurements", "Measurement set (base path or .pcit)", std::string());
    s.add("net", Kind::text, "--net", "Network weights (base path)", std::string());
    s.add("lambda", Kind::real, "--lambda", "TV weight", 1e-2);
    s.add("max_iters", Kind::integer, "--max-iters", "TV iteration limit", 300);
    add_finetune_options(s);
  }, cmd_reconstruct);
  add_command("finetune", "Measurement-consistency fine-tuning of the first layers", [](Settings& s) {
    s.add("otf", Kind::text, "--otf", "Region OTF (PCIO)", std::string());
    add_mask_options(s, true);
    s.add("net", Kind::text, "--net", "Network weights (base path)", std::string());
    s.add("measurements", Kind::texts, "--measurements", "Measurement sets of the region", std::vector<std::string>{});
    add_finetune_options(s);
  }, cmd_finetune);
  add_command("evaluate", "PSNR and SSIM against a reference", [](Settings& s) {
    s.add("reference", Kind::text, "--reference", "Reference image", std::string());
    s.add("images", Kind::texts, "--image", "Images to score", std::vector<std::string>{});
    s.add("method", Kind::text, "--method", "Method label", std::string("unknown"));
    s.add("bit_depth", Kind::integer, "--bit-depth", "Detector bit depth", 16);
    s.add("convention", Kind::text, "--convention", "as-printed or mse-normalized", std::string("mse-normalized"));
    add_noise_options(s);
  }, cmd_evaluate);
  add_command("fov-run", "Per-region fine-tuning over a tiled field of view", [](Settings& s) {
    s.add("train_run", Kind::text, "--train-run", "Run directory of a train command", std::string());
    s.add("fov", Kind::extent, "--fov", "FOV extent", Extent2{64, 64});
    s.add("region", Kind::extent, "--region", "Region extent", Extent2{32, 32});
    s.add("factor", Kind::extent, "--factor", "Under-sampling factor", Extent2{4, 4});
    s.add("otf", Kind::text, "--otf", "Full-FOV OTF (PCIO); ideal when omitted", std::string());
    s.add("object", Kind::text, "--object", "FOV object; synthetic when omitted", std::string());
    add_noise_options(s);
    add_finetune_options(s);
  }, cmd_fov_run);
  add_command("bench", "Compare GI, TV, network and fine-tuned reconstructions", [](Settings& s) {
    s.add("train_run", Kind::text, "--train-run", "Run directory of a train command", std::string());
    s.add("otf", Kind::text, "--otf", "Measurement OTF; the trained one when omitted", std::string());
    s.add("n_images", Kind::integer, "--n-images", "Held-out images", 20);
    s.add("sigmas", Kind::reals, "--sigmas", "Noise levels", std::vector<double>{0.0, 0.3, 0.5});
    s.add("lambdas", Kind::reals, "--lambdas", "TV weights, best per image is kept", std::vector<double>{1e-4, 1e-3, 1e-2, 1e-1});
    add_finetune_options(s);
  }, cmd_bench);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::vector<std::string> args(argv, argv + argc);
  for (const auto& c : commands) {
    if (!c.app->parsed()) continue;
    try {
      const json cfg = c.settings->resolve();
      RunDir run(text(cfg, "out"), c.name, args);
      json seeds = c.body(cfg, run);
      seeds["seed"] = integer(cfg, "seed");
      run.finish(cfg, seeds);
      return 0;
    } catch (const std::exception& e) {
      std::string msg = e.what();
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      std::cerr << "pcisr " << c.name << ": error: " << msg << '\n';
      return 1;
    }
  }
  return 1;
}

}  // namespace pcisr
