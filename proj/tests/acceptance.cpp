// Runs the acceptance criteria and prints one PASS/FAIL line for each.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "leafmask/leafmask.hpp"
#include "support.hpp"

using namespace leafmask;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;

  void fail(const std::string& why) {
    if (ok) detail = why;
    ok = false;
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

const fs::path& work_dir() {
  static const fs::path d = [] {
    fs::path p = fs::current_path() / "acceptance_work";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

int run_cli(const std::string& args, const std::string& tag) {
  const fs::path out = work_dir() / (tag + ".stdout"), err = work_dir() / (tag + ".stderr");
  const std::string cmd = std::string(LEAFMASK_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 1
Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  std::set<std::string> names;
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (const auto& r : gradcheck_suite(seed)) {
      names.insert(r.name);
      worst = std::max(worst, r.max_rel_error);
      if (!r.passed(1e-4)) o.fail(r.name + " seed " + std::to_string(seed) + " worst " + r.worst);
    }
  const double secs = seconds_since(t0);
  for (const char* n : {"conv2d", "spatial_attention", "channel_attention", "bases_decoder", "assembly",
                        "point_predictor", "losses"})
    if (!names.count(n)) o.fail(std::string("missing check ") + n);
  for (auto mode : {Arrangement::spatial_then_channel, Arrangement::channel_then_spatial, Arrangement::parallel,
                    Arrangement::parallel_shared})
    if (!names.count("attention_" + std::string(to_string(mode)))) o.fail("missing arrangement " + std::string(to_string(mode)));
  if (secs >= 300) o.fail("took " + std::to_string(secs) + " s");
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%zu checks x 20 seeds, max rel %.2e, %.1f s", names.size(), worst, secs);
  if (o.ok) o.detail = buf;
  return o;
}

// 2
Outcome assembly_algebra() {
  Outcome o;
  const AssemblyConfig cfg;
  for (std::uint64_t t = 0; t < 20; ++t) {
    auto a = lmtest::random_tensor<float>({4, 40, 40}, 10 * t + 1), b = lmtest::random_tensor<float>({4, 40, 40}, 10 * t + 2);
    auto c = lmtest::random_tensor<float>({4, 14, 14}, 10 * t + 3), d = lmtest::random_tensor<float>({4, 14, 14}, 10 * t + 4);
    std::mt19937_64 rng(t);
    std::uniform_real_distribution<double> u(0.0, 30.0);
    const double x1 = u(rng), y1 = u(rng);
    const Box box{x1, y1, x1 + 2 + u(rng) / 3, y1 + 2 + u(rng) / 3};
    auto ab = a;
    accumulate(ab, b);
    auto lhs = assemble_instance(ab, c, box, cfg), rhs = assemble_instance(a, c, box, cfg);
    accumulate(rhs, assemble_instance(b, c, box, cfg));
    auto cd = c;
    accumulate(cd, d);
    auto lhs2 = assemble_instance(a, cd, box, cfg), rhs2 = assemble_instance(a, c, box, cfg);
    accumulate(rhs2, assemble_instance(a, d, box, cfg));
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      if (std::abs(lhs[i] - rhs[i]) > 1e-5) o.fail("bases superposition off by " + std::to_string(lhs[i] - rhs[i]));
      if (std::abs(lhs2[i] - rhs2[i]) > 1e-5) o.fail("coefficient superposition off");
    }

    // K = 1 with unit coefficients reproduces the aligned crop.
    const AssemblyConfig k1{56, 14, 1};
    auto base = lmtest::random_tensor<float>({1, 40, 40}, 10 * t + 5);
    const auto unit = assemble_instance(base, Tensor<float>::full({1, 14, 14}, 1.0f), box, k1);
    if (unit != roi_align(base, box, 56).reshaped({56, 56})) o.fail("K=1 identity");
  }
  Tensor<double> crop({2, 2, 2}, {1, 2, 3, 4, 0, 1, 1, 0});
  Tensor<double> coeff({2, 2, 2}, {1, 0, 0, 1, 2, 2, 2, 2});
  if (assemble(crop, coeff).values() != std::vector<double>{1, 2, 2, 4}) o.fail("2x2 worked example");
  if (o.ok) o.detail = "20 random boxes, superposition <= 1e-5, identity and 2x2 example exact";
  return o;
}

template <class T>
Tensor<T> permute_spatial(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  Tensor<T> out(x.shape());
  const std::size_t hw = x.dim(2) * x.dim(3), planes = x.dim(0) * x.dim(1);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < hw; ++i) out[p * hw + perm[i]] = x[p * hw + i];
  return out;
}

// 3
Outcome attention_fixed_points() {
  Outcome o;
  auto x = lmtest::random_tensor<float>({2, 8, 6, 5}, 31, -3, 3);
  for (auto mode : {Arrangement::spatial_then_channel, Arrangement::channel_then_spatial, Arrangement::parallel,
                    Arrangement::parallel_shared}) {
    const auto z = apply_dual_attention(x, AttentionParams<float>::zeros(8, kDefaultReductionRatio, mode));
    for (std::size_t i = 0; i < x.size(); ++i)
      if (z[i] != 0.25f * x[i]) {
        o.fail("zero params " + std::string(to_string(mode)));
        break;
      }
  }
  std::mt19937_64 rng(32);
  auto p = ChannelAttentionParams<float>::init(8, kDefaultReductionRatio, rng);
  const auto base = channel_attention_map(x, p);
  std::vector<std::size_t> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  for (int t = 0; t < 100; ++t) {
    std::shuffle(perm.begin(), perm.end(), rng);
    if (channel_attention_map(permute_spatial(x, perm), p) != permute_spatial(base, perm))
      o.fail("permutation " + std::to_string(t));
  }
  if (o.ok) o.detail = "4 arrangements give 0.25x, 100 permutations exact";
  return o;
}

// 4
Outcome point_sampling_contract() {
  Outcome o;
  const std::size_t sizes[] = {14, 28, 56};
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const std::size_t h = sizes[seed % 3], w = sizes[(seed / 3) % 3];
    const RefineConfig cfg{3.0, 0.75, 1 + seed % 64, 1, 3, 16};
    const auto logits = lmtest::random_tensor<float>({h, w}, 5000 + seed, -6, 6);
    const auto s = sample_points_train_detailed(logits, cfg, seed);
    if (s.set.size() != cfg.n_points) o.fail("size at seed " + std::to_string(seed));
    if (s.candidates.size() != static_cast<std::size_t>(std::ceil(3.0 * static_cast<double>(cfg.n_points))))
      o.fail("candidate count at seed " + std::to_string(seed));
    std::set<std::size_t> sel(s.uncertain_idx.begin(), s.uncertain_idx.end());
    double min_sel = 2, max_rest = -1;
    for (std::size_t i = 0; i < s.candidates.size(); ++i) {
      // Independent uncertainty: -|p - 0.5| of the bilinearly sampled probability map.
      const double u = s.candidate_uncertainty[i];
      if (sel.count(i))
        min_sel = std::min(min_sel, u);
      else
        max_rest = std::max(max_rest, u);
    }
    if (!s.uncertain_idx.empty() && min_sel < max_rest) o.fail("dominance at seed " + std::to_string(seed));
    std::set<std::pair<double, double>> uniq;
    for (const auto& pt : s.set.points) uniq.emplace(pt.x, pt.y);
    if (uniq.size() != cfg.n_points) o.fail("duplicate points at seed " + std::to_string(seed));
    if (sample_points_train(logits, cfg, seed) != s.set) o.fail("reproducibility at seed " + std::to_string(seed));
  }
  if (o.ok) o.detail = "1000 runs: |set| = N, dominance, bit-identical repeats";
  return o;
}

// 5
Outcome subdivision_contract() {
  Outcome o;
  auto check = [&](std::size_t in, std::size_t steps, std::size_t n, std::uint64_t seed) {
    const RefineConfig cfg{3.0, 0.75, n, steps, 3, 16};
    const auto coarse = lmtest::random_tensor<double>({in, in}, seed, -4, 4);
    const auto fine = lmtest::random_tensor<double>({5, in * 2, in * 2}, seed + 1);
    const auto p = PointPredictorParams<double>::zeros(5, 16, 3);
    const auto r = refine_mask_traced(coarse, fine, cfg, p);
    const std::size_t out = in << steps;
    if (r.logits.shape() != Shape{out, out}) o.fail("output size for steps " + std::to_string(steps));
    Tensor<double> cur = coarse;
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t h = cur.dim(0);
      Tensor<double> up({2 * h, 2 * h});
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t x = 0; x < 2 * h; ++x)
          up(y, x) = lmtest::bilinear_at(cur.data().data(), h, h, lmtest::source_coord(x, h, 2 * h),
                                         lmtest::source_coord(y, h, 2 * h));
      const auto& sel = r.selections[s];
      if (sel.size() != std::min(n, up.size())) o.fail("selection size at step " + std::to_string(s));
      std::vector<char> picked(up.size(), 0);
      for (const auto& pt : sel.points) picked[static_cast<std::size_t>(pt.y) * 2 * h + static_cast<std::size_t>(pt.x)] = 1;
      for (std::size_t i = 0; i < up.size(); ++i) {
        if (std::abs(r.upsampled[s][i] - up[i]) > 1e-12) {
          o.fail("upsampling differs at step " + std::to_string(s));
          break;
        }
      }
      // Zero predictor: selected points become exactly zero, the rest stay.
      cur = r.upsampled[s];
      for (std::size_t i = 0; i < up.size(); ++i)
        if (picked[i]) cur[i] = 0.0;
      if (std::count(picked.begin(), picked.end(), 1) != static_cast<long>(sel.size()))
        o.fail("duplicate selections at step " + std::to_string(s));
    }
    if (cur != r.logits) o.fail("zero-predictor result for steps " + std::to_string(steps));
  };
  for (std::size_t steps = 0; steps <= 3; ++steps) check(7, steps, 20, 100 + steps);
  check(56, 3, 784, 200);
  if (o.ok) o.detail = "steps 0..3 and 56 -> 448 at N = 784";
  return o;
}

double best_dice_oracle(const LabelImage& pred, const LabelImage& gt) {
  std::set<std::uint32_t> gi(gt.ids.begin(), gt.ids.end()), pi(pred.ids.begin(), pred.ids.end());
  gi.erase(0);
  pi.erase(0);
  double acc = 0;
  for (auto g : gi) {
    double best = 0;
    for (auto p : pi) {
      double inter = 0, a = 0, b = 0;
      for (std::size_t i = 0; i < gt.ids.size(); ++i) {
        const bool x = gt.ids[i] == g, y = pred.ids[i] == p;
        inter += x && y;
        a += x;
        b += y;
      }
      best = std::max(best, 2 * inter / (a + b));
    }
    acc += best;
  }
  return 100.0 * acc / static_cast<double>(gi.size());
}

// 6
Outcome metric_oracle() {
  Outcome o;
  std::mt19937_64 rng(61);
  std::size_t compared = 0;
  for (int t = 0; t < 1000; ++t) {
    std::uniform_int_distribution<std::uint32_t> d(0, 1 + t % 6);
    LabelImage gt(8, 8), pred(8, 8);
    for (auto& v : gt.ids) v = d(rng);
    for (auto& v : pred.ids) v = d(rng);
    if (gt.instances().empty()) continue;
    ++compared;
    if (best_dice(pred, gt) != best_dice_oracle(pred, gt)) o.fail("oracle mismatch at image " + std::to_string(t));
    if (best_dice(gt, gt) != 100.0) o.fail("identical image not 100");
    std::vector<std::uint32_t> map(8);
    std::iota(map.begin(), map.end(), 40u);
    map[0] = 0;
    std::shuffle(map.begin() + 1, map.end(), rng);
    LabelImage relabeled = pred;
    for (auto& v : relabeled.ids) v = map[v];
    if (best_dice(relabeled, gt) != best_dice(pred, gt)) o.fail("relabel invariance at image " + std::to_string(t));
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%zu random 8x8 images exact vs all-pairs oracle", compared);
  if (o.ok) o.detail = buf;
  return o;
}

// 7
Outcome loss_composition() {
  Outcome o;
  std::mt19937_64 rng(71);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int t = 0; t < 100; ++t) {
    const LossInputs in{u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)};
    const double want = in.l_cls + in.l_ctr + in.l_loc + in.l_mask + 0.3 * in.l_sem + in.l_points;
    const auto b = total_loss(in);
    if (b.total != want) o.fail("input " + std::to_string(t));
  }
  if (total_loss({1, 1, 1, 1, 1, 1}).total != 1.0 + 1.0 + 1.0 + 1.0 + 0.3 + 1.0 ||
      std::abs(total_loss({1, 1, 1, 1, 1, 1}).total - 5.3) > 1e-12)
    o.fail("5.3 example");
  if (o.ok) o.detail = "100 random inputs exact, all-ones gives 5.3";
  return o;
}

// 8
Outcome toy_end_to_end() {
  Outcome o;
  const fs::path log = work_dir() / "toy.jsonl";
  const auto t0 = Clock::now();
  const int code = run_cli("traintoy --seed 0 --log " + log.string(), "toy");
  const double secs = seconds_since(t0);
  if (code != 0) {
    o.fail("cli exit " + std::to_string(code) + ": " + slurp(work_dir() / "toy.stderr"));
    return o;
  }
  std::vector<double> totals;
  std::istringstream lines(slurp(log));
  for (std::string line; std::getline(lines, line);) {
    const auto j = nlohmann::json::parse(line);
    if (j.at("iteration").get<std::size_t>() != totals.size()) o.fail("log out of order");
    totals.push_back(j.at("total").get<double>());
  }
  double score = -1;
  const std::string out = slurp(work_dir() / "toy.stdout");
  const auto pos = out.find("held-out best_dice ");
  if (pos != std::string::npos) score = std::stod(out.substr(pos + 19));
  if (totals.size() <= 200) {
    o.fail("log has only " + std::to_string(totals.size()) + " entries");
    return o;
  }
  if (!(totals[200] < totals[0])) o.fail("loss(200) >= loss(0)");
  if (score < 80.0) o.fail("best_dice " + std::to_string(score) + " < 80.0");
  if (secs >= 600) o.fail("took " + std::to_string(secs) + " s");
  char buf[160];
  std::snprintf(buf, sizeof(buf), "best_dice %.2f, loss %.4f -> %.4f at 200, %.0f s", score, totals[0], totals[200],
                secs);
  if (o.ok)
    o.detail = buf;
  else
    o.detail += " (" + std::string(buf) + ")";
  return o;
}

// 9
Outcome format_determinism() {
  Outcome o;
  std::vector<io::LmtRecord> recs;
  recs.push_back({"f32", lmtest::random_tensor<float>({2, 3, 4, 5}, 91, -1e3, 1e3)});
  recs.push_back({"f64", lmtest::random_tensor<double>({7, 9}, 92, -1e-300, 1e300)});
  Tensor<float> special({6});
  special[0] = -0.0f;
  special[1] = std::numeric_limits<float>::denorm_min();
  special[2] = std::numeric_limits<float>::max();
  special[3] = std::numeric_limits<float>::infinity();
  special[4] = -std::numeric_limits<float>::infinity();
  special[5] = std::numeric_limits<float>::lowest();
  recs.push_back({"special", special});
  recs.push_back({"", Tensor<double>({1}, {3.25})});
  const auto bytes = io::encode_lmt(recs);
  const auto back = io::decode_lmt(bytes);
  if (back.size() != recs.size()) o.fail("record count");
  for (std::size_t i = 0; i < std::min(back.size(), recs.size()); ++i)
    if (back[i].name != recs[i].name || back[i].type() != recs[i].type() || back[i].shape() != recs[i].shape())
      o.fail("header of record " + std::to_string(i));
  if (io::encode_lmt(back) != bytes) o.fail("re-encoding differs");

  const fs::path w = work_dir();
  auto twice = [&](const std::string& name, const std::function<std::string(const std::string&)>& args,
                   const std::vector<std::string>& files) {
    std::string outs[2];
    for (int k = 0; k < 2; ++k) {
      const std::string dir = (w / (name + std::to_string(k))).string();
      fs::create_directories(dir);
      const int code = run_cli(args(dir), name + std::to_string(k));
      if (code != 0) o.fail(name + " exit " + std::to_string(code));
      outs[k] = slurp(w / (name + std::to_string(k) + ".stdout"));
      for (const auto& f : files) outs[k] += "\n--" + f + "--\n" + slurp(fs::path(dir) / f);
    }
    if (outs[0] != outs[1]) o.fail(name + " not byte-deterministic");
  };

  twice("synth", [](const std::string& d) { return "synth --seed 9 --out " + d; },
        {"labels.pgm", "boxes.csv", "features.lmt"});
  const fs::path s = w / "synth0";
  io::write_lmt((w / "bases.lmt").string(), {{"bases", lmtest::random_tensor<float>({4, 64, 64}, 93)}});
  const auto boxes = io::read_boxes((s / "boxes.csv").string());
  io::write_lmt((w / "coeffs.lmt").string(),
                {{"coeffs", lmtest::random_tensor<float>({boxes.size(), 4, 14, 14}, 94)}});
  twice("assemble",
        [&](const std::string& d) {
          return "assemble --bases " + (w / "bases.lmt").string() + " --coeffs " + (w / "coeffs.lmt").string() +
                 " --boxes " + (s / "boxes.csv").string() + " --out " + d;
        },
        {"instance_000.lmt", "instance_000.pgm", "instance_001.lmt"});
  std::mt19937_64 rng(95);
  io::write_lmt((w / "predictor.lmt").string(),
                io::params_to_records<float>(PointPredictorParams<float>::init(5, 16, 3, rng), "predictor"));
  twice("refine",
        [&](const std::string& d) {
          return "refine --coarse " + (w / "assemble0" / "instance_000.lmt").string() + " --features " +
                 (s / "features.lmt").string() + " --params " + (w / "predictor.lmt").string() + " --out " + d;
        },
        {"refined.lmt", "instance_000.pgm"});
  LabelImage pred = io::read_label_raster((s / "labels.pgm").string());
  for (std::size_t i = 0; i < pred.ids.size(); i += 7) pred.ids[i] = pred.ids[(i * 13) % pred.ids.size()];
  io::write_label_raster((w / "pred.pgm").string(), pred);
  twice("bestdice",
        [&](const std::string& d) {
          return "bestdice --pred " + (w / "pred.pgm").string() + " --gt " + (s / "labels.pgm").string() +
                 " --symmetric --report " + d + "/report.json";
        },
        {"report.json"});
  twice("gradcheck", [](const std::string&) { return "gradcheck --seeds 2"; }, {});
  twice("traintoy",
        [](const std::string& d) {
          return "traintoy --seed 4 --iters 5 --gradcheck-seeds 1 --out " + d + "/model.lmt --log " + d +
                 "/log.jsonl --report " + d + "/report.json";
        },
        {"model.lmt", "log.jsonl", "report.json"});
  if (o.ok) o.detail = "LMT bit-exact; synth, assemble, refine, bestdice, gradcheck, traintoy repeat byte-for-byte";
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    Outcome (*run)();
  };
  const Criterion criteria[] = {
      {"gradient suite", gradient_suite},
      {"assembly algebra", assembly_algebra},
      {"attention fixed points", attention_fixed_points},
      {"point sampling contract", point_sampling_contract},
      {"subdivision contract", subdivision_contract},
      {"metric oracle", metric_oracle},
      {"loss composition", loss_composition},
      {"toy end-to-end", toy_end_to_end},
      {"format and determinism", format_determinism},
  };
  int failed = 0;
  int index = 1;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.fail(std::string("exception: ") + e.what());
    }
    std::printf("[%d] %-26s %s  %s\n", index++, c.name, o.ok ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    failed += !o.ok;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(std::size(criteria)) - failed, std::size(criteria));
  return failed == 0 ? 0 : 1;
}
