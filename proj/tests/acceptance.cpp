// Acceptance suite: trains the five stock models on the procedural dataset,
// reproduces each headline transferability finding at desk scale with pinned
// seeds, and checks the exact small-scale oracles. Prints one line per
// criterion; exits nonzero if any fails.

#include "advlab/experiment.hpp"
#include "test_support.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>

using namespace advlab;
using namespace advlab::testing;

namespace {

struct Criterion {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<Criterion> g_results;

void report(const std::string& name, bool pass, const std::string& detail) {
  g_results.push_back({name, pass, detail});
  std::printf("[%s] %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(),
              detail.c_str());
  std::fflush(stdout);
}

std::string fmt1(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  double total = 0.0;
  for (double x : v) total += x;
  return v.empty() ? 0.0 : total / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::infinity();
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct Lab {
  Config cfg;
  Dataset train_split;
  Dataset pool;
  std::vector<Model> models;  // the five attackable models
  std::vector<const Model*> model_ptrs;
  TestSet test_set;
  std::vector<LabeledExample> examples;

  // Attack products shared between criteria.
  std::vector<AdvSet> opt_nt;   // calibrated non-targeted optimization
  std::vector<double> opt_lrs;  // calibrated learning rates per source
  std::vector<AdvSet> opt_t;    // targeted optimization at the default rate
  TransferMatrix opt_nt_acc;
  TransferMatrix opt_t_match;
};

AdvSet run_attack_batch(const Lab& lab, const Model& model,
                        const AttackSpec& spec, const std::string& method) {
  AdvSet adv;
  adv.source = model.name();
  adv.method = method;
  adv.ids = lab.test_set.ids;
  adv.images.resize(lab.examples.size());
  adv.rmsds.resize(lab.examples.size());
  parallel_for(static_cast<int>(lab.examples.size()), lab.cfg.threads,
               [&](int i) {
                 const AdversarialResult r =
                     spec.method == AttackMethod::OPT
                         ? optimization_attack(model,
                                               lab.examples[static_cast<size_t>(i)],
                                               spec)
                         : fast_gradient_attack(
                               model, lab.examples[static_cast<size_t>(i)],
                               spec);
                 adv.images[static_cast<size_t>(i)] = r.adv_image;
                 adv.rmsds[static_cast<size_t>(i)] = r.rmsd;
               });
  return adv;
}

struct EnsembleProducts {
  std::vector<AdvSet> targeted;       // equal-weight Adam, leave-one-out
  std::vector<AdvSet> nontargeted;    // equal-weight Adam, leave-one-out
  std::vector<AdvSet> mw;             // multiplicative-weight, leave-one-out
  bool traces_ok = true;
  std::string trace_detail;
};

void check_trace(const WeightTrace& trace, double eta, bool* ok,
                 std::string* detail) {
  for (Eigen::Index m = 0; m < trace.w.cols(); ++m) {
    if (trace.w(0, m) != 1.0) {
      *ok = false;
      *detail = "initial weight differs from 1";
      return;
    }
    for (Eigen::Index it = 1; it < trace.w.rows(); ++it) {
      const double prev = trace.w(it - 1, m);
      const double next = trace.w(it, m);
      if (next != prev && next != prev * eta) {
        *ok = false;
        *detail = "weight step is neither identity nor eta";
        return;
      }
    }
  }
}

EnsembleProducts run_ensembles(const Lab& lab) {
  EnsembleProducts out;
  for (size_t hold = 0; hold < lab.models.size(); ++hold) {
    std::vector<const Model*> members;
    for (size_t i = 0; i < lab.models.size(); ++i)
      if (i != hold) members.push_back(&lab.models[i]);
    const std::string row = "-" + lab.models[hold].name();

    EnsembleSpec equal;
    equal.learning_rate = lab.cfg.ensemble.learning_rate;
    equal.iterations = lab.cfg.ensemble.iterations;

    EnsembleSpec mw = equal;
    mw.variant = EnsembleVariant::Multiplicative;
    mw.step_rule = StepRule::SignOfGradient;
    mw.learning_rate = lab.cfg.ensemble.mw_learning_rate;
    mw.eta = lab.cfg.ensemble.eta;

    auto batch = [&](const std::string& method, auto&& attack_one) {
      AdvSet adv;
      adv.source = row;
      adv.method = method;
      adv.ids = lab.test_set.ids;
      adv.images.resize(lab.examples.size());
      adv.rmsds.resize(lab.examples.size());
      parallel_for(static_cast<int>(lab.examples.size()), lab.cfg.threads,
                   [&](int i) {
                     const AdversarialResult r =
                         attack_one(lab.examples[static_cast<size_t>(i)]);
                     adv.images[static_cast<size_t>(i)] = r.adv_image;
                     adv.rmsds[static_cast<size_t>(i)] = r.rmsd;
                   });
      return adv;
    };

    EnsembleSpec equal_t = equal;
    equal_t.mode = AttackMode::Targeted;
    equal_t.learning_rate = lab.cfg.ensemble.targeted_learning_rate;
    out.targeted.push_back(batch("ens_opt_targeted", [&](const LabeledExample& e) {
      return ensemble_optimization_attack(members, e, equal_t);
    }));
    out.nontargeted.push_back(
        batch("ens_opt_nontargeted", [&](const LabeledExample& e) {
          return ensemble_optimization_attack(members, e, equal);
        }));
    std::mutex trace_mutex;
    out.mw.push_back(batch("ens_mw_nontargeted", [&](const LabeledExample& e) {
      auto [result, trace] = ensemble_mw_attack(members, e, mw);
      std::lock_guard<std::mutex> lock(trace_mutex);
      if (out.traces_ok) check_trace(trace, mw.eta, &out.traces_ok, &out.trace_detail);
      return result;
    }));
  }
  return out;
}

Config reduced_pipeline_config(const std::string& out_dir) {
  Config cfg;
  cfg.seed = 7;
  cfg.out = out_dir;
  cfg.threads = 1;
  cfg.data.train_count = 400;
  cfg.data.blackbox_count = 400;
  cfg.data.pool_count = 200;
  cfg.models = {{"dense2", "dense2", 6},
                {"dense3", "dense3", 0},
                {"conv_small", "conv_small", 8}};
  cfg.train.epochs = 25;
  cfg.train.floor = 0.80;
  cfg.testset.size = 10;
  cfg.attack.target_rmsd = 14.0;
  cfg.attack.iterations = 40;
  cfg.ensemble.iterations = 40;
  cfg.evaluation.k_depths = {1};
  cfg.evaluation.noise_stds = {25.0};
  cfg.evaluation.noises_per_image = 3;
  cfg.evaluation.scan_step = 0.5;
  cfg.evaluation.scan_max_b = 40.0;
  cfg.evaluation.scan_eval = "conv_small";
  cfg.geometry.resolution = 15;
  cfg.geometry.logit_samples = 5;
  cfg.geometry.logit_max_b = 20.0;
  return cfg;
}

// ---- criteria ----

void criterion_gradients(const Lab& lab) {
  double worst = 0.0;
  std::string worst_arch;
  for (const std::string& arch : stock_architectures()) {
    const ModelSpec spec = stock_model_spec(arch);
    Rng rng(Rng::mix(lab.cfg.seed, crc32_str("fd_" + arch)));
    for (int pair = 0; pair < 100; ++pair) {
      const Model model(spec, initial_weights(spec, rng.next_u64()));
      const Image image = uniform_random_image(spec.input, rng);
      const LossSpec loss = pair % 2 == 0
                                ? LossSpec::nontargeted(rng.uniform_int(10))
                                : LossSpec::targeted(rng.uniform_int(10));
      const GradientReport report = input_gradient(model, image, loss);
      const VecD fd = fd_input_gradient(model, image, loss, 1e-3, &report.grad);
      const double err = rel_error_inf(report.grad, fd);
      if (err > worst) {
        worst = err;
        worst_arch = arch;
      }
    }
  }
  report("C1 gradient-vs-finite-differences", worst < 1e-4,
         "max relative error " + std::to_string(worst) + " (" + worst_arch +
             "), bound 1e-4");
}

void criterion_attack_oracles() {
  bool ok = true;
  std::string detail;

  VecF px(2);
  px << 100.0f, 200.0f;
  const Image x = make_image({2, 1, 1}, px);
  VecD g(2);
  g << 0.5, -0.2;
  const Image fgs = fast_gradient_step(x, g, AttackMethod::FGS,
                                       AttackMode::Nontargeted, 10.0);
  if (fgs.pixels[0] != 110.0f || fgs.pixels[1] != 190.0f) {
    ok = false;
    detail = "FGS fixture mismatch";
  }
  VecD g2(2);
  g2 << 3.0, 4.0;
  const Image fg = fast_gradient_step(x, g2, AttackMethod::FG,
                                      AttackMode::Nontargeted, 10.0);
  if (fg.pixels[0] != 106.0f || fg.pixels[1] != 208.0f) {
    ok = false;
    detail = "FG fixture mismatch";
  }
  const Image fgs_t = fast_gradient_step(x, g, AttackMethod::FGS,
                                         AttackMode::Targeted, 10.0);
  if (fgs_t.pixels[0] != 90.0f || fgs_t.pixels[1] != 210.0f) {
    ok = false;
    detail = "targeted FGS fixture mismatch";
  }

  // Adam first step against the reference recurrence.
  AdamState adam(3);
  VecD grad(3);
  grad << 0.25, -1.5, 3.0;
  const VecD update = adam.update(grad, 4.0);
  RefAdam ref;
  const auto ref_update =
      ref_adam_update(ref, {0.25, -1.5, 3.0}, 4.0);
  for (int i = 0; i < 3; ++i) {
    if (std::abs(update[i] - ref_update[static_cast<size_t>(i)]) > 1e-7) {
      ok = false;
      detail = "Adam first step deviates from the recurrence";
    }
  }

  // Unclipped FG perturbation: RMSD is exactly B / sqrt(N).
  VecF mid = VecF::Constant(64, 128.0f);
  const Image interior = make_image({1, 8, 8}, std::move(mid));
  Rng rng(17);
  VecD dir(64);
  for (int i = 0; i < 64; ++i) dir[i] = rng.normal();
  const Image stepped = fast_gradient_step(interior, dir, AttackMethod::FG,
                                           AttackMode::Nontargeted, 24.0);
  const double r = rmsd(stepped, interior);
  if (std::abs(r - 24.0 / 8.0) > 1e-6) {
    ok = false;
    detail = "unclipped FG RMSD differs from B/sqrt(N)";
  }

  report("C2 attack-arithmetic-oracles", ok,
         ok ? "FGS/FG fixtures exact, Adam step within 1e-7, FG RMSD within 1e-6"
            : detail);
}

void criterion_diagonal(const Lab& lab) {
  double worst = 0.0;
  for (size_t i = 0; i < lab.opt_nt.size(); ++i)
    worst = std::max(worst, lab.opt_nt_acc.cells(static_cast<Eigen::Index>(i),
                                                 static_cast<Eigen::Index>(i)));
  report("C3 diagonal-annihilation", worst <= 2.0,
         "worst own-model accuracy " + fmt1(worst) + "% (bound 2%)");
}

void criterion_transfer(const Lab& lab) {
  bool all_below_clean = true;
  double cross_total = 0.0;
  int cross_cells = 0;
  for (Eigen::Index r = 0; r < lab.opt_nt_acc.cells.rows(); ++r) {
    for (Eigen::Index c = 0; c < lab.opt_nt_acc.cells.cols(); ++c) {
      if (r == c) continue;
      if (lab.opt_nt_acc.cells(r, c) >= 100.0) all_below_clean = false;
      cross_total += lab.opt_nt_acc.cells(r, c);
      ++cross_cells;
    }
  }
  const double mean_cross = cross_total / cross_cells;

  bool rmsd_matched = true;
  for (Eigen::Index r = 0; r < lab.opt_nt_acc.mean_rmsd.size(); ++r) {
    if (std::abs(lab.opt_nt_acc.mean_rmsd[r] - lab.cfg.attack.target_rmsd) >
        lab.cfg.attack.rmsd_tolerance)
      rmsd_matched = false;
  }

  const bool pass = all_below_clean && rmsd_matched && mean_cross <= 70.0;
  report("C4 nontargeted-transfer", pass,
         "mean cross accuracy " + fmt1(mean_cross) +
             "% (bound 70%), every cell below 100%: " +
             (all_below_clean ? "yes" : "no") + ", RMSD matched +-" +
             fmt1(lab.cfg.attack.rmsd_tolerance) + ": " +
             (rmsd_matched ? "yes" : "no"));
}

void criterion_targets_do_not_transfer(const Lab& lab) {
  double worst_own = 100.0;
  double worst_cross = 0.0;
  for (Eigen::Index r = 0; r < lab.opt_t_match.cells.rows(); ++r) {
    for (Eigen::Index c = 0; c < lab.opt_t_match.cells.cols(); ++c) {
      if (r == c)
        worst_own = std::min(worst_own, lab.opt_t_match.cells(r, c));
      else
        worst_cross = std::max(worst_cross, lab.opt_t_match.cells(r, c));
    }
  }
  const bool pass = worst_own >= 95.0 && worst_cross <= 10.0;
  report("C5 targets-do-not-transfer", pass,
         "own matching >= " + fmt1(worst_own) + "% (bound 95%), cross <= " +
             fmt1(worst_cross) + "% (bound 10%)");
}

double best_single_cross_matching(const Lab& lab) {
  double best = 0.0;
  for (Eigen::Index r = 0; r < lab.opt_t_match.cells.rows(); ++r)
    for (Eigen::Index c = 0; c < lab.opt_t_match.cells.cols(); ++c)
      if (r != c) best = std::max(best, lab.opt_t_match.cells(r, c));
  return best;
}

void criterion_ensemble_targeted(const Lab& lab, const EnsembleProducts& ens,
                                 TransferMatrix* matrix_out) {
  const TransferMatrix m =
      transfer_matrix(ens.targeted, lab.examples, lab.test_set.ids,
                      lab.model_ptrs, MatrixKind::MatchingRate, 1,
                      lab.cfg.threads);
  *matrix_out = m;
  double held_out_total = 0.0;
  for (Eigen::Index h = 0; h < m.cells.rows(); ++h)
    held_out_total += m.cells(h, h);
  const double held_out_mean = held_out_total / m.cells.rows();
  const double single_best = best_single_cross_matching(lab);
  const bool pass = held_out_mean > single_best + 15.0;
  report("C6 ensemble-makes-targets-transfer", pass,
         "mean held-out matching " + fmt1(held_out_mean) +
             "% vs best single cross " + fmt1(single_best) +
             "% (margin 15 points)");
}

std::vector<double> min_single_cross_per_eval(const Lab& lab) {
  std::vector<double> mins(lab.models.size(), 100.0);
  for (Eigen::Index r = 0; r < lab.opt_nt_acc.cells.rows(); ++r)
    for (Eigen::Index c = 0; c < lab.opt_nt_acc.cells.cols(); ++c)
      if (r != c)
        mins[static_cast<size_t>(c)] =
            std::min(mins[static_cast<size_t>(c)], lab.opt_nt_acc.cells(r, c));
  return mins;
}

void criterion_ensemble_nontargeted(const Lab& lab, const EnsembleProducts& ens,
                                    TransferMatrix* matrix_out) {
  const TransferMatrix m =
      transfer_matrix(ens.nontargeted, lab.examples, lab.test_set.ids,
                      lab.model_ptrs, MatrixKind::Accuracy, 1,
                      lab.cfg.threads);
  *matrix_out = m;
  const std::vector<double> single_min = min_single_cross_per_eval(lab);
  bool pass = true;
  double worst_ratio = 0.0;
  for (Eigen::Index h = 0; h < m.cells.rows(); ++h) {
    const double bound = 0.5 * single_min[static_cast<size_t>(h)];
    if (m.cells(h, h) > bound) pass = false;
    if (single_min[static_cast<size_t>(h)] > 0)
      worst_ratio = std::max(
          worst_ratio, m.cells(h, h) / single_min[static_cast<size_t>(h)]);
  }
  report("C7 ensemble-near-perfect-transfer", pass,
         "worst held-out / best-single ratio " + fmt1(worst_ratio) +
             " (bound 0.5)");
}

void criterion_min_rmsd(const Lab& lab) {
  const Model& source = lab.models[0];
  const Model& eval = lab.models[2];  // dense2 -> conv_small
  std::vector<double> fg_vals, fgs_vals;
  bool all_found = true;
  bool minimal_ok = true;

  const int n = static_cast<int>(lab.examples.size());
  std::vector<MinRmsdResult> fg(static_cast<size_t>(n)),
      fgs(static_cast<size_t>(n));
  parallel_for(n, lab.cfg.threads, [&](int i) {
    const LabeledExample& e = lab.examples[static_cast<size_t>(i)];
    fg[static_cast<size_t>(i)] = min_transferable_rmsd(
        source, eval, e, DirectionKind::FG, lab.cfg.evaluation.scan_step,
        lab.cfg.evaluation.scan_max_b);
    fgs[static_cast<size_t>(i)] = min_transferable_rmsd(
        source, eval, e, DirectionKind::FGS, lab.cfg.evaluation.scan_step,
        lab.cfg.evaluation.scan_max_b);
  });

  for (int i = 0; i < n; ++i) {
    const LabeledExample& e = lab.examples[static_cast<size_t>(i)];
    for (const auto& [kind, result] :
         {std::pair<DirectionKind, const MinRmsdResult*>{DirectionKind::FG,
                                                         &fg[static_cast<size_t>(i)]},
          {DirectionKind::FGS, &fgs[static_cast<size_t>(i)]}}) {
      if (!result->found) {
        all_found = false;
        continue;
      }
      (kind == DirectionKind::FG ? fg_vals : fgs_vals).push_back(result->rmsd);
      // Re-scan below the accepted sample: no smaller sampled B fools both.
      if (result->sample_index > 0) {
        const VecD delta = attack_direction(source, e, kind);
        const DirectionScan below = scan_direction(
            {&source, &eval}, e, delta, lab.cfg.evaluation.scan_step,
            result->b - lab.cfg.evaluation.scan_step * 0.5);
        for (int s = 0; s < below.samples(); ++s) {
          if (below.correct[0][static_cast<size_t>(s)] == 0 &&
              below.correct[1][static_cast<size_t>(s)] == 0)
            minimal_ok = false;
        }
      }
    }
  }

  const double fg_median = median_of(fg_vals);
  const double fgs_median = median_of(fgs_vals);
  const bool pass = all_found && minimal_ok && fg_median <= fgs_median;
  report("C8 fg-beats-fgs-minimal-rmsd", pass,
         "median FG " + fmt1(fg_median) + " <= median FGS " +
             fmt1(fgs_median) + ", all found: " + (all_found ? "yes" : "no") +
             ", re-scan minimal: " + (minimal_ok ? "yes" : "no"));
}

void criterion_intervals(const Lab& lab) {
  const Model& source = lab.models[0];
  bool found_multi = false;
  bool round_trip_ok = true;
  int scanned = 0;
  std::string where;

  for (size_t ev = 0; ev < lab.models.size() && !found_multi; ++ev) {
    if (&lab.models[ev] == &source) continue;
    for (size_t i = 0; i < lab.examples.size() && !found_multi; ++i) {
      const LabeledExample& e = lab.examples[i];
      const auto intervals = adversarial_intervals(
          source, lab.models[ev], e, DirectionKind::FG,
          lab.cfg.evaluation.scan_step, lab.cfg.evaluation.scan_max_b);
      ++scanned;

      // Round trip against the raw correctness bits.
      const VecD delta = attack_direction(source, e, DirectionKind::FG);
      const DirectionScan scan =
          scan_direction({&lab.models[ev]}, e, delta,
                         lab.cfg.evaluation.scan_step,
                         lab.cfg.evaluation.scan_max_b);
      std::vector<std::uint8_t> rebuilt(
          static_cast<size_t>(scan.samples()), 1);
      for (const BInterval& iv : intervals)
        for (int s = 0; s < scan.samples(); ++s)
          if (scan.b_at(s) >= iv.begin - 1e-12 &&
              scan.b_at(s) <= iv.end + 1e-12)
            rebuilt[static_cast<size_t>(s)] = 0;
      if (rebuilt != scan.correct.front()) round_trip_ok = false;

      if (intervals.size() >= 2) {
        found_multi = true;
        where = lab.models[ev].name() + ", image " +
                std::to_string(lab.test_set.ids[i]);
      }
    }
  }
  report("C9 non-contiguous-intervals", found_multi && round_trip_ok,
         found_multi
             ? ">=2 disjoint intervals at (" + where + ") after " +
                   std::to_string(scanned) + " scans; round trips exact: " +
                   (round_trip_ok ? "yes" : "no")
             : "no multi-interval pair found in " + std::to_string(scanned) +
                   " scans");
}

void criterion_noise(const Lab& lab) {
  const auto rows = gaussian_baseline(lab.model_ptrs, lab.examples, {25.0},
                                      100, 1, Rng::mix(lab.cfg.seed, 0x4015eU),
                                      lab.cfg.threads);
  const NoiseRow& row = rows.front();
  const bool rmsd_ok = row.mean_rmsd >= 22.0 && row.mean_rmsd <= 25.0;

  // RMSD-matched FG attack on each model, evaluated on itself.
  bool margin_ok = true;
  double worst_margin = 1e9;
  for (size_t m = 0; m < lab.models.size(); ++m) {
    AttackSpec fg;
    fg.method = AttackMethod::FG;
    fg.distortion = calibrate_distortion(lab.models[m], lab.examples, fg,
                                         row.mean_rmsd, 0.5);
    const AdvSet adv = run_attack_batch(lab, lab.models[m], fg, "fg_noise_matched");
    int correct = 0;
    for (size_t i = 0; i < adv.images.size(); ++i)
      if (topk_correct(forward(lab.models[m], adv.images[i]),
                       lab.examples[i].ground_truth, 1))
        ++correct;
    const double attack_acc = 100.0 * correct / adv.images.size();
    const double margin =
        row.accuracy_percent[static_cast<Eigen::Index>(m)] - attack_acc;
    worst_margin = std::min(worst_margin, margin);
    if (margin < 30.0) margin_ok = false;
  }
  report("C10 gaussian-baseline", rmsd_ok && margin_ok,
         "std-25 mean RMSD " + fmt1(row.mean_rmsd) +
             " (bounds [22, 25]), worst noise-vs-attack margin " +
             fmt1(worst_margin) + " points (bound 30)");
}

void criterion_cosine(const Lab& lab) {
  const CosineMatrix m = cosine_matrix(lab.model_ptrs, lab.examples);
  double mean_abs = 0.0;
  int cells = 0;
  for (Eigen::Index r = 0; r < m.mean_abs_cos.rows(); ++r)
    for (Eigen::Index c = 0; c < m.mean_abs_cos.cols(); ++c)
      if (r != c) {
        mean_abs += m.mean_abs_cos(r, c);
        ++cells;
      }
  mean_abs /= cells;

  const int n = lab.pool.shape.size();
  const double baseline = std::sqrt(2.0 / (std::numbers::pi * n));
  bool diag_ok = true;
  for (Eigen::Index d = 0; d < m.mean_cos.rows(); ++d)
    if (std::abs(m.mean_cos(d, d) - 1.0) > 1e-9) diag_ok = false;

  const bool pass = diag_ok && mean_abs <= 3.0 * baseline;
  report("C11 gradient-near-orthogonality", pass,
         "mean pairwise |cos| " + std::to_string(mean_abs) + " vs 3x baseline " +
             std::to_string(3.0 * baseline) + ", unit diagonal: " +
             (diag_ok ? "yes" : "no"));
}

void criterion_planes(const Lab& lab) {
  const LabeledExample& pinned = lab.examples.front();
  bool labels_ok = true;
  bool origin_ok = true;
  int worst_labels = 0;
  const int res = lab.cfg.geometry.resolution;

  for (size_t m = 0; m < lab.models.size(); ++m) {
    for (const double extent_half :
         {lab.cfg.geometry.zoom_in, lab.cfg.geometry.zoom_out}) {
      const PlaneExtent extent{-extent_half, extent_half, -extent_half,
                               extent_half};
      const Plane plane = make_plane(
          lab.models[m], pinned, PlaneAxis::Gradient,
          Rng::mix(lab.cfg.seed, 0x9a23U + m), extent, res, res);
      const LabelGrid grid = scan_plane({&lab.models[m]}, plane,
                                        lab.cfg.threads)
                                 .front();
      const int labels = region_label_count(grid);
      worst_labels = std::max(worst_labels, labels);
      if (labels > 5) labels_ok = false;  // 50% of the 10 classes
      if (grid(res / 2, res / 2) !=
          forward(lab.models[m], pinned.image).top1())
        origin_ok = false;
    }
  }
  report("C12 plane-structure", labels_ok && origin_ok,
         "max distinct labels per plane " + std::to_string(worst_labels) +
             " (bound 5), origin equals clean prediction: " +
             (origin_ok ? "yes" : "no"));
}

void criterion_same_mistake(const Lab& lab) {
  const double baseline = 100.0 / 9.0;  // uniform wrong-label chance
  double best = 0.0;
  std::string best_pair;
  for (const AdvSet& adv : lab.opt_nt) {
    for (size_t i = 0; i < lab.models.size(); ++i) {
      for (size_t j = i + 1; j < lab.models.size(); ++j) {
        const auto pct =
            same_mistake(adv, lab.examples, lab.models[i], lab.models[j]);
        if (pct && *pct > best) {
          best = *pct;
          best_pair = adv.source + ": " + lab.models[i].name() + "+" +
                      lab.models[j].name();
        }
      }
    }
  }
  report("C13 same-mistake-effect", best >= 2.0 * baseline,
         "best pair " + best_pair + " at " + fmt1(best) + "% (bound " +
             fmt1(2.0 * baseline) + "%)");
}

void criterion_mw(const Lab& lab, const EnsembleProducts& ens) {
  std::vector<double> mw_rmsds, eq_rmsds;
  for (const AdvSet& adv : ens.mw)
    mw_rmsds.insert(mw_rmsds.end(), adv.rmsds.begin(), adv.rmsds.end());
  for (const AdvSet& adv : ens.nontargeted)
    eq_rmsds.insert(eq_rmsds.end(), adv.rmsds.begin(), adv.rmsds.end());
  const double mw_mean = mean_of(mw_rmsds);
  const double eq_mean = mean_of(eq_rmsds);

  const TransferMatrix m =
      transfer_matrix(ens.mw, lab.examples, lab.test_set.ids, lab.model_ptrs,
                      MatrixKind::Accuracy, 1, lab.cfg.threads);
  const std::vector<double> single_min = min_single_cross_per_eval(lab);
  bool acc_ok = true;
  for (Eigen::Index h = 0; h < m.cells.rows(); ++h)
    if (m.cells(h, h) > 0.5 * single_min[static_cast<size_t>(h)])
      acc_ok = false;

  const bool pass = mw_mean < eq_mean && acc_ok && ens.traces_ok;
  report("C14 multiplicative-weight-ensemble", pass,
         "mean RMSD " + fmt1(mw_mean) + " < equal-weight " + fmt1(eq_mean) +
             ", held-out bound: " + (acc_ok ? "yes" : "no") +
             ", traces exact: " + (ens.traces_ok ? "yes" : ens.trace_detail));
}

void criterion_determinism() {
  const auto dir1 = std::filesystem::temp_directory_path() / "advlab_accept_run1";
  const auto dir2 = std::filesystem::temp_directory_path() / "advlab_accept_run2";
  std::filesystem::remove_all(dir1);
  std::filesystem::remove_all(dir2);

  const std::string m1 = run_experiment(reduced_pipeline_config(dir1.string()));
  const std::string m2 = run_experiment(reduced_pipeline_config(dir2.string()));

  bool identical = m1 == m2;
  int compared = 0;
  std::string mismatch;
  for (const auto& entry :
       std::filesystem::recursive_directory_iterator(dir1)) {
    if (!entry.is_regular_file()) continue;
    if (entry.path().extension() != ".csv") continue;
    const auto rel = std::filesystem::relative(entry.path(), dir1);
    const std::string a = read_file_bytes(entry.path());
    const std::string b = read_file_bytes(dir2 / rel);
    ++compared;
    if (a != b) {
      identical = false;
      mismatch = rel.string();
    }
  }
  report("C15 byte-determinism", identical && compared > 0,
         identical ? "manifest and " + std::to_string(compared) +
                         " CSV files byte-identical across runs"
                   : "mismatch at " + mismatch);
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  Lab lab;
  lab.cfg.out =
      (std::filesystem::temp_directory_path() / "advlab_acceptance").string();

  std::printf("setup: generating data and training the five stock models...\n");
  std::fflush(stdout);
  const int model_count = static_cast<int>(lab.cfg.models.size());
  const int total = model_count * lab.cfg.data.train_count +
                    lab.cfg.data.blackbox_count + lab.cfg.data.pool_count;
  const Dataset corpus =
      generate_dataset(lab.cfg.data.generator, Rng::mix(lab.cfg.seed, 0xda7aU),
                       total, lab.cfg.data.noise_std);
  lab.train_split =
      slice_dataset(corpus, 0, model_count * lab.cfg.data.train_count);
  lab.pool = slice_dataset(corpus, total - lab.cfg.data.pool_count, total);

  TrainHyperparams hp;
  hp.epochs = lab.cfg.train.epochs;
  hp.batch_size = lab.cfg.train.batch;
  hp.learning_rate = lab.cfg.train.learning_rate;
  hp.momentum = lab.cfg.train.momentum;
  hp.accuracy_floor = lab.cfg.train.floor;
  lab.models.reserve(stock_architectures().size());
  for (size_t k = 0; k < stock_architectures().size(); ++k) {
    const std::string& arch = stock_architectures()[k];
    hp.seed = Rng::mix(Rng::mix(lab.cfg.seed, 0x7ea1U), crc32_str(arch));
    hp.augment_noise = lab.cfg.models[k].augment;
    const Dataset slice = slice_dataset(
        lab.train_split, static_cast<int>(k) * lab.cfg.data.train_count,
        static_cast<int>(k + 1) * lab.cfg.data.train_count);
    lab.models.push_back(train(stock_model_spec(arch), slice, hp));
  }
  for (const Model& m : lab.models) lab.model_ptrs.push_back(&m);

  lab.test_set = select_test_set(lab.model_ptrs, lab.pool,
                                 Rng::mix(lab.cfg.seed, 0x7e57U),
                                 lab.cfg.testset.size);
  lab.examples = lab.test_set.materialize(lab.pool);

  std::printf("setup: calibrating and generating single-model attacks...\n");
  std::fflush(stdout);
  for (const Model& model : lab.models) {
    AttackSpec opt_nt;
    opt_nt.method = AttackMethod::OPT;
    opt_nt.lambda = lab.cfg.attack.lambda;
    opt_nt.iterations = lab.cfg.attack.iterations;
    opt_nt.learning_rate = calibrate_opt_learning_rate(
        model, lab.examples, opt_nt, lab.cfg.attack.target_rmsd,
        lab.cfg.attack.rmsd_tolerance, 0.125, 32.0, lab.cfg.threads);
    lab.opt_lrs.push_back(opt_nt.learning_rate);
    lab.opt_nt.push_back(run_attack_batch(lab, model, opt_nt, "opt_nontargeted"));

    AttackSpec opt_t = opt_nt;
    opt_t.mode = AttackMode::Targeted;
    opt_t.learning_rate = calibrate_opt_success_rate(
        model, lab.examples, opt_t, lab.cfg.attack.success_floor, 0.125, 32.0,
        lab.cfg.threads);
    lab.opt_t.push_back(run_attack_batch(lab, model, opt_t, "opt_targeted"));
  }
  lab.opt_nt_acc =
      transfer_matrix(lab.opt_nt, lab.examples, lab.test_set.ids,
                      lab.model_ptrs, MatrixKind::Accuracy, 1, lab.cfg.threads);
  lab.opt_t_match = transfer_matrix(lab.opt_t, lab.examples, lab.test_set.ids,
                                    lab.model_ptrs, MatrixKind::MatchingRate,
                                    1, lab.cfg.threads);

  criterion_gradients(lab);
  criterion_attack_oracles();
  criterion_diagonal(lab);
  criterion_transfer(lab);
  criterion_targets_do_not_transfer(lab);

  std::printf("setup: generating leave-one-out ensemble attacks...\n");
  std::fflush(stdout);
  const EnsembleProducts ens = run_ensembles(lab);
  TransferMatrix ens_t_match, ens_nt_acc;
  criterion_ensemble_targeted(lab, ens, &ens_t_match);
  criterion_ensemble_nontargeted(lab, ens, &ens_nt_acc);
  criterion_min_rmsd(lab);
  criterion_intervals(lab);
  criterion_noise(lab);
  criterion_cosine(lab);
  criterion_planes(lab);
  criterion_same_mistake(lab);
  criterion_mw(lab, ens);
  criterion_determinism();

  int failures = 0;
  for (const Criterion& c : g_results)
    if (!c.pass) ++failures;
  const auto elapsed = std::chrono::duration_cast<std::chrono::seconds>(
                           std::chrono::steady_clock::now() - t0)
                           .count();
  std::printf("%d/%zu criteria passed in %llds\n",
              static_cast<int>(g_results.size()) - failures, g_results.size(),
              static_cast<long long>(elapsed));
  return failures == 0 ? 0 : 1;
}
