// leafmask: assembly, refinement, BestDice scoring, synthetic rosettes and
// toy training from the command line.
//
// Exit codes: 0 success, 1 runtime error, 2 input validation error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "leafmask/leafmask.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace leafmask;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;

// Keys outside `allowed` are rejected so typos do not pass silently.
void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + ": config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(what + ": unknown config key '" + key + "'");
  }
}

template <class V>
void read_key(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

json load_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

AssemblyConfig assembly_config(const json& j, AssemblyConfig c = {}) {
  check_keys(j, {"base_resolution", "coefficient_resolution", "num_bases"}, "assemble");
  read_key(j, "base_resolution", c.base_resolution);
  read_key(j, "coefficient_resolution", c.coefficient_resolution);
  read_key(j, "num_bases", c.num_bases);
  c.validate();
  return c;
}

RefineConfig refine_config(const json& j) {
  check_keys(j, {"beta", "alpha", "n_points", "steps", "n_layers", "hidden"}, "refine");
  RefineConfig c;
  read_key(j, "beta", c.beta);
  read_key(j, "alpha", c.alpha);
  read_key(j, "n_points", c.n_points);
  read_key(j, "steps", c.steps);
  read_key(j, "n_layers", c.n_layers);
  read_key(j, "hidden", c.hidden);
  c.validate();
  return c;
}

ToyConfig toy_config(const json& j) {
  check_keys(j,
             {"learning_rate", "train_scenes", "eval_scenes", "n_leaves", "size", "overlap", "feature_groups",
              "noise", "assembly", "decoder_width", "decoder_depth", "reduction_ratio", "arrangement", "refine"},
             "traintoy");
  ToyConfig c;
  read_key(j, "learning_rate", c.learning_rate);
  read_key(j, "train_scenes", c.train_scenes);
  read_key(j, "eval_scenes", c.eval_scenes);
  read_key(j, "n_leaves", c.scene.n_leaves);
  read_key(j, "size", c.scene.size);
  read_key(j, "overlap", c.scene.overlap);
  read_key(j, "feature_groups", c.scene.feature_groups);
  read_key(j, "noise", c.scene.noise);
  read_key(j, "decoder_width", c.decoder_width);
  read_key(j, "decoder_depth", c.decoder_depth);
  read_key(j, "reduction_ratio", c.reduction_ratio);
  if (j.contains("arrangement")) {
    std::string a;
    read_key(j, "arrangement", a);
    c.arrangement = parse_arrangement(a);
  }
  if (j.contains("assembly")) c.assembly = assembly_config(j.at("assembly"), c.assembly);
  if (j.contains("refine")) {
    const json& r = j.at("refine");
    RefineConfig def = c.refine;
    check_keys(r, {"beta", "alpha", "n_points", "steps", "n_layers", "hidden"}, "traintoy.refine");
    read_key(r, "beta", def.beta);
    read_key(r, "alpha", def.alpha);
    read_key(r, "n_points", def.n_points);
    read_key(r, "steps", def.steps);
    read_key(r, "n_layers", def.n_layers);
    read_key(r, "hidden", def.hidden);
    c.refine = def;
  }
  return c;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory '" + dir + "': " + ec.message());
}

std::string instance_name(std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "instance_%03zu%s", i, ext);
  return buf;
}

// Binary mask of one instance as a label raster holding id i + 1.
LabelImage mask_raster(const Tensor<std::uint8_t>& mask, std::size_t i) {
  LabelImage img(mask.dim(1), mask.dim(0));
  for (std::size_t p = 0; p < mask.size(); ++p) img.ids[p] = mask[p] ? static_cast<std::uint32_t>(i + 1) : 0;
  return img;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << text;
}

const io::LmtRecord& single_record(const std::vector<io::LmtRecord>& recs, const std::string& path) {
  if (recs.size() != 1)
    throw ValidationError(path + ": expected exactly one tensor record, found " + std::to_string(recs.size()));
  return recs.front();
}

// --- assemble ---------------------------------------------------------------

struct AssembleArgs {
  std::string bases, coeffs, boxes, config, out;
};

template <class T>
int run_assemble_typed(const AssembleArgs& a, const io::LmtRecord& bases_rec,
                       const std::vector<io::LmtRecord>& coeff_recs, const std::vector<Box>& boxes,
                       const AssemblyConfig& cfg) {
  Tensor<T> bases = bases_rec.as<T>();
  if (bases.rank() == 4 && bases.dim(0) == 1) bases = bases.reshaped({bases.dim(1), bases.dim(2), bases.dim(3)});
  if (bases.rank() != 3) throw ShapeError("bases must be (K,H,W) or (1,K,H,W), got " + to_string(bases.shape()));
  if (bases.dim(0) != cfg.num_bases)
    throw ValidationError("K mismatch: bases have " + std::to_string(bases.dim(0)) + " channels, config K = " +
                          std::to_string(cfg.num_bases));

  std::vector<Tensor<T>> coeffs;
  if (coeff_recs.size() == 1 && coeff_recs[0].shape().size() == 4) {
    coeffs = unstack(coeff_recs[0].as<T>());
  } else {
    for (const auto& r : coeff_recs) coeffs.push_back(r.as<T>());
  }
  if (boxes.empty()) coeffs.clear();
  if (coeffs.size() != boxes.size())
    throw ValidationError("P mismatch: " + std::to_string(boxes.size()) + " boxes, " +
                          std::to_string(coeffs.size()) + " coefficient tensors");
  for (std::size_t i = 0; i < coeffs.size(); ++i) {
    const Shape& s = coeffs[i].shape();
    if (s.size() != 3) throw ShapeError("coefficients of instance " + std::to_string(i) + " must be (K,R_C,R_C)");
    if (s[0] != cfg.num_bases)
      throw ValidationError("K mismatch: coefficients of instance " + std::to_string(i) + " have K = " +
                            std::to_string(s[0]) + ", config K = " + std::to_string(cfg.num_bases));
    if (s[1] != cfg.coefficient_resolution || s[2] != cfg.coefficient_resolution)
      throw ValidationError("R_C mismatch: coefficients of instance " + std::to_string(i) + " are " +
                            to_string(s) + ", config R_C = " + std::to_string(cfg.coefficient_resolution));
  }

  ensure_dir(a.out);
  const AssemblyResult<T> res = assemble_instances(bases, coeffs, boxes, cfg);
  for (std::size_t i = 0; i < res.logits.size(); ++i) {
    if (!res.logits[i]) continue;
    io::write_lmt((fs::path(a.out) / instance_name(i, ".lmt")).string(), {{"logits", *res.logits[i]}});
    io::write_label_raster((fs::path(a.out) / instance_name(i, ".pgm")).string(),
                           mask_raster(binarize(*res.logits[i]), i));
  }
  for (const auto& e : res.errors) std::cerr << "instance " << e.index << ": " << e.message << "\n";
  std::cout << "assembled " << res.logits.size() - res.errors.size() << " of " << res.logits.size()
            << " instances\n";
  return res.errors.empty() ? 0 : kExitValidation;
}

int run_assemble(const AssembleArgs& a) {
  const AssemblyConfig cfg = assembly_config(load_json(a.config));
  const auto bases_recs = io::read_lmt(a.bases);
  const auto& bases_rec = single_record(bases_recs, a.bases);
  const auto coeff_recs = fs::file_size(a.coeffs) == 0 ? std::vector<io::LmtRecord>{} : io::read_lmt(a.coeffs);
  const auto boxes = io::read_boxes(a.boxes);
  if (bases_rec.type() == io::ElementType::f64)
    return run_assemble_typed<double>(a, bases_rec, coeff_recs, boxes, cfg);
  return run_assemble_typed<float>(a, bases_rec, coeff_recs, boxes, cfg);
}

// --- refine -----------------------------------------------------------------

struct RefineArgs {
  std::string coarse, features, params, config, out;
};

template <class T>
int run_refine_typed(const RefineArgs& a, const std::vector<io::LmtRecord>& coarse_recs,
                     const std::vector<io::LmtRecord>& feature_recs, const std::vector<io::LmtRecord>& param_recs,
                     const RefineConfig& cfg, const json& raw_cfg) {
  const PointPredictorParams<T> p = io::predictor_from_records<T>(param_recs);
  if (raw_cfg.contains("n_layers") && cfg.n_layers != p.layers.size())
    throw ValidationError("n_layers mismatch: config says " + std::to_string(cfg.n_layers) + ", params have " +
                          std::to_string(p.layers.size()));
  if (raw_cfg.contains("hidden") && p.layers.size() > 1 && cfg.hidden != p.layers.front().out_channels())
    throw ValidationError("hidden mismatch: config says " + std::to_string(cfg.hidden) + ", params have " +
                          std::to_string(p.layers.front().out_channels()));

  std::vector<std::pair<std::string, Tensor<T>>> maps;
  for (const auto& r : coarse_recs) {
    Tensor<T> t = r.as<T>();
    if (t.rank() == 3) {
      const auto parts = unstack(t.reshaped({t.dim(0), 1, t.dim(1), t.dim(2)}));
      for (std::size_t i = 0; i < parts.size(); ++i)
        maps.emplace_back(r.name + "." + std::to_string(i), parts[i].reshaped({t.dim(1), t.dim(2)}));
    } else if (t.rank() == 2) {
      maps.emplace_back(r.name, std::move(t));
    } else {
      throw ShapeError("coarse record '" + r.name + "' must be (H,W) or (P,H,W), got " + to_string(t.shape()));
    }
  }
  if (feature_recs.size() != 1 && feature_recs.size() != maps.size())
    throw ValidationError("expected one feature tensor or one per coarse map (" + std::to_string(maps.size()) +
                          "), found " + std::to_string(feature_recs.size()));
  std::vector<Tensor<T>> feats;
  for (const auto& r : feature_recs) {
    Tensor<T> f = r.as<T>();
    if (f.rank() == 4 && f.dim(0) == 1) f = f.reshaped({f.dim(1), f.dim(2), f.dim(3)});
    if (f.rank() != 3) throw ShapeError("feature record '" + r.name + "' must be (C,H,W)");
    if (f.dim(0) != p.feature_channels())
      throw ValidationError("C mismatch: features have " + std::to_string(f.dim(0)) +
                            " channels, predictor expects " + std::to_string(p.feature_channels()));
    feats.push_back(std::move(f));
  }

  ensure_dir(a.out);
  std::vector<io::LmtRecord> out;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const Tensor<T> refined = refine_mask(maps[i].second, feats[feats.size() == 1 ? 0 : i], cfg, p);
    io::write_label_raster((fs::path(a.out) / instance_name(i, ".pgm")).string(), mask_raster(binarize(refined), i));
    out.push_back({maps[i].first, refined});
  }
  io::write_lmt((fs::path(a.out) / "refined.lmt").string(), out);
  std::cout << "refined " << maps.size() << " masks, " << cfg.steps << " steps\n";
  return 0;
}

int run_refine(const RefineArgs& a) {
  const json raw = load_json(a.config);
  const RefineConfig cfg = refine_config(raw);
  const auto coarse = io::read_lmt(a.coarse);
  const auto features = io::read_lmt(a.features);
  const auto params = io::read_lmt(a.params);
  if (coarse.empty()) throw ValidationError(a.coarse + ": no coarse masks");
  if (coarse.front().type() == io::ElementType::f64)
    return run_refine_typed<double>(a, coarse, features, params, cfg, raw);
  return run_refine_typed<float>(a, coarse, features, params, cfg, raw);
}

// --- bestdice ---------------------------------------------------------------

struct BestDiceArgs {
  std::string pred, gt, report;
  bool symmetric = false;
};

json report_json(const BestDiceReport& r) {
  json j;
  j["score"] = r.score;
  j["gt_instances"] = r.gt_instances;
  j["pred_instances"] = r.pred_instances;
  j["matches"] = json::array();
  for (const auto& m : r.matches)
    j["matches"].push_back({{"gt_id", m.gt_id}, {"best_pred_id", m.best_pred_id}, {"dice", m.dice}});
  return j;
}

int run_bestdice(const BestDiceArgs& a) {
  const LabelImage pred = io::read_label_raster(a.pred);
  const LabelImage gt = io::read_label_raster(a.gt);
  if (pred.width != gt.width || pred.height != gt.height)
    throw ValidationError("size mismatch: pred is " + std::to_string(pred.width) + "x" +
                          std::to_string(pred.height) + ", gt is " + std::to_string(gt.width) + "x" +
                          std::to_string(gt.height));
  const BestDiceReport fwd = best_dice_report(pred, gt);
  char line[128];
  std::snprintf(line, sizeof(line), "best_dice %.2f\n", fwd.score);
  std::cout << line;
  json j;
  j["best_dice"] = report_json(fwd);
  if (a.symmetric) {
    const BestDiceReport rev = best_dice_report(gt, pred);
    const double sym = std::min(fwd.score, rev.score);
    std::snprintf(line, sizeof(line), "symmetric_best_dice %.2f\n", sym);
    std::cout << line;
    j["reverse_best_dice"] = report_json(rev);
    j["symmetric_best_dice"] = sym;
  }
  if (!a.report.empty()) write_text(a.report, j.dump(2) + "\n");
  return 0;
}

// --- synth ------------------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 0;
  RosetteSpec spec;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  const SynthScene s = synth_rosette(a.seed, a.spec);
  ensure_dir(a.out);
  io::write_label_raster((fs::path(a.out) / "labels.pgm").string(), s.labels);
  io::write_boxes((fs::path(a.out) / "boxes.csv").string(), s.boxes);
  io::write_lmt((fs::path(a.out) / "features.lmt").string(), {{"features", s.features}});
  std::cout << "rosette seed " << a.seed << ": " << s.boxes.size() << " leaves, " << s.labels.width << "x"
            << s.labels.height << "\n";
  return 0;
}

// --- gradcheck --------------------------------------------------------------

struct GradCheckArgs {
  std::uint64_t first_seed = 0;
  std::size_t seeds = 20;
  double tolerance = kGradCheckTolerance;
};

// Runs every check for each seed; prints the worst error per check.
bool run_gradcheck_suite(const GradCheckArgs& a, std::ostream& os) {
  std::vector<GradCheckReport> worst;
  for (std::size_t s = 0; s < a.seeds; ++s) {
    const auto reports = gradcheck_suite(a.first_seed + s);
    if (worst.empty()) worst = reports;
    for (std::size_t i = 0; i < reports.size(); ++i) {
      worst[i].checked += s ? reports[i].checked : 0;
      if (reports[i].max_rel_error > worst[i].max_rel_error) {
        worst[i].max_rel_error = reports[i].max_rel_error;
        worst[i].worst = reports[i].worst + " seed " + std::to_string(a.first_seed + s);
      }
    }
  }
  bool ok = true;
  for (const auto& r : worst) {
    const bool pass = r.passed(a.tolerance);
    ok = ok && pass;
    char line[256];
    std::snprintf(line, sizeof(line), "%-36s %s max_rel %.3e over %zu elements\n", r.name.c_str(),
                  pass ? "PASS" : "FAIL", r.max_rel_error, r.checked);
    os << line;
  }
  return ok;
}

int run_gradcheck(const GradCheckArgs& a) {
  if (a.seeds < 1) throw ConfigError("gradcheck: --seeds must be >= 1");
  const bool ok = run_gradcheck_suite(a, std::cout);
  std::cout << (ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return ok ? 0 : kExitRuntime;
}

// --- traintoy ---------------------------------------------------------------

struct TrainToyArgs {
  std::uint64_t seed = 0;
  std::size_t iters = ToyConfig{}.iterations;
  std::string out, config, log, report;
  std::size_t gradcheck_seeds = 3;
};

json loss_json(const ToyIteration& it) {
  const LossBreakdown& b = it.loss;
  return {{"iteration", it.iteration}, {"l_cls", b.l_cls},   {"l_ctr", b.l_ctr},       {"l_loc", b.l_loc},
          {"l_mask", b.l_mask},       {"l_sem", b.l_sem},   {"l_points", b.l_points}, {"total", b.total}};
}

int run_traintoy(const TrainToyArgs& a) {
  ToyConfig cfg = toy_config(load_json(a.config));
  cfg.seed = a.seed;
  cfg.iterations = a.iters;
  cfg.validate();

  if (a.gradcheck_seeds > 0) {
    GradCheckArgs g;
    g.first_seed = a.seed;
    g.seeds = a.gradcheck_seeds;
    std::cout << "gradcheck before training\n";
    if (!run_gradcheck_suite(g, std::cout)) {
      std::cerr << "gradcheck failed; not training\n";
      return kExitRuntime;
    }
  }

  std::ofstream log;
  if (!a.log.empty()) {
    log.open(a.log, std::ios::binary | std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open '" + a.log + "' for writing");
  }
  const auto result = train_toy<float>(cfg, [&](const ToyIteration& it) {
    if (log) log << loss_json(it).dump() << "\n";
    if (it.iteration % 50 == 0 || it.iteration == cfg.iterations) {
      char line[160];
      std::snprintf(line, sizeof(line), "iter %5zu  total %.6f  mask %.6f  sem %.6f  points %.6f\n", it.iteration,
                    it.loss.total, it.loss.l_mask, it.loss.l_sem, it.loss.l_points);
      std::cout << line << std::flush;
    }
  });

  if (!a.out.empty()) io::write_lmt(a.out, io::params_to_records<float>(result.model));
  char line[96];
  std::snprintf(line, sizeof(line), "held-out best_dice %.2f\n", result.best_dice);
  std::cout << line;
  if (!a.report.empty()) {
    json j;
    j["seed"] = a.seed;
    j["iterations"] = cfg.iterations;
    j["best_dice"] = result.best_dice;
    j["eval_scores"] = result.eval_scores;
    j["initial_loss"] = loss_json(result.history.front());
    j["final_loss"] = loss_json(result.history.back());
    write_text(a.report, j.dump(2) + "\n");
  }
  return 0;
}

// Maps exceptions to exit codes.
template <class F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {  // shape, config, validation, box errors
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const UndefinedMetricError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LeafMask mask assembly, point refinement and BestDice tools"};
  app.require_subcommand(1);
  int code = 0;

  AssembleArgs as;
  auto* assemble = app.add_subcommand("assemble", "Assemble per-instance masks from bases and coefficients");
  assemble->add_option("--bases", as.bases, "LMT file with one (K,H,W) tensor")->required();
  assemble->add_option("--coeffs", as.coeffs, "LMT file: one (P,K,R_C,R_C) tensor or P (K,R_C,R_C) tensors")
      ->required();
  assemble->add_option("--boxes", as.boxes, "Box CSV, one row per instance")->required();
  assemble->add_option("--config", as.config, "JSON assembly config");
  assemble->add_option("--out", as.out, "Output directory")->required();
  assemble->callback([&] { code = guarded([&] { return run_assemble(as); }); });

  RefineArgs rf;
  auto* refine = app.add_subcommand("refine", "Refine coarse mask logits by point subdivision");
  refine->add_option("--coarse", rf.coarse, "LMT file of (H,W) or (P,H,W) logits")->required();
  refine->add_option("--features", rf.features, "LMT file: one (C,H,W) tensor, or one per mask")->required();
  refine->add_option("--params", rf.params, "LMT file with predictor.layer<i>.{weight,bias}")->required();
  refine->add_option("--config", rf.config, "JSON refine config");
  refine->add_option("--out", rf.out, "Output directory")->required();
  refine->callback([&] { code = guarded([&] { return run_refine(rf); }); });

  BestDiceArgs bd;
  auto* bestdice = app.add_subcommand("bestdice", "Score a predicted label image against ground truth");
  bestdice->add_option("--pred", bd.pred, "Predicted label raster (.pgm or .png)")->required();
  bestdice->add_option("--gt", bd.gt, "Ground-truth label raster (.pgm or .png)")->required();
  bestdice->add_flag("--symmetric", bd.symmetric, "Also report min of both directions");
  bestdice->add_option("--report", bd.report, "Write a JSON report here");
  bestdice->callback([&] { code = guarded([&] { return run_bestdice(bd); }); });

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic rosette");
  synth->add_option("--seed", sy.seed, "Random seed");
  synth->add_option("--leaves", sy.spec.n_leaves, "Number of leaves")->capture_default_str();
  synth->add_option("--size", sy.spec.size, "Image size in pixels")->capture_default_str();
  synth->add_option("--overlap", sy.spec.overlap, "Leaf overlap fraction")->capture_default_str();
  synth->add_option("--groups", sy.spec.feature_groups, "Feature channel groups")->capture_default_str();
  synth->add_option("--noise", sy.spec.noise, "Feature noise std")->capture_default_str();
  synth->add_option("--out", sy.out, "Output directory")->required();
  synth->callback([&] { code = guarded([&] { return run_synth(sy); }); });

  GradCheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every backward pass");
  gradcheck->add_option("--first-seed", gc.first_seed, "First seed")->capture_default_str();
  gradcheck->add_option("--seeds", gc.seeds, "Number of seeds")->capture_default_str();
  gradcheck->add_option("--tolerance", gc.tolerance, "Max relative error")->capture_default_str();
  gradcheck->callback([&] { code = guarded([&] { return run_gradcheck(gc); }); });

  TrainToyArgs tt;
  auto* traintoy = app.add_subcommand("traintoy", "Train the toy model on synthetic rosettes");
  traintoy->add_option("--seed", tt.seed, "Random seed")->capture_default_str();
  traintoy->add_option("--iters", tt.iters, "Gradient descent iterations")->capture_default_str();
  traintoy->add_option("--out", tt.out, "Write trained parameters (LMT)");
  traintoy->add_option("--config", tt.config, "JSON training config");
  traintoy->add_option("--log", tt.log, "Write per-iteration losses (JSON lines)");
  traintoy->add_option("--report", tt.report, "Write a JSON summary");
  traintoy->add_option("--gradcheck-seeds", tt.gradcheck_seeds, "Seeds checked before training (0 skips)")
      ->capture_default_str();
  traintoy->callback([&] { code = guarded([&] { return run_traintoy(tt); }); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }
  return code;
}
