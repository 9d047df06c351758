#include "advlab/experiment.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace advlab {

namespace {

using nlohmann::json;

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::uint64_t name_seed(std::uint64_t base, std::uint64_t tag,
                        const std::string& name) {
  return Rng::mix(Rng::mix(base, tag), crc32_str(name));
}

const char* kindName(MatrixKind kind) {
  return kind == MatrixKind::Accuracy ? "accuracy" : "matching_rate";
}

// ---- stage-local io helpers ----

Dataset load_pool(const std::filesystem::path& root) {
  return load_dataset(root / "data" / "pool.atds");
}

struct TestContext {
  TestSet set;
  std::vector<LabeledExample> examples;
};

TestContext load_test_context(const Config& cfg,
                              const std::filesystem::path& root,
                              const LoadedModels& models) {
  const Dataset pool = load_pool(root);
  TestContext ctx;
  ctx.set = load_testset(root);
  ctx.set.verify(models.all, pool);  // invariants re-checked at load time
  ctx.examples = ctx.set.materialize(pool);
  (void)cfg;
  return ctx;
}

AdvSet attack_batch(const Model& model,
                    const std::vector<LabeledExample>& examples,
                    const std::vector<int>& ids, const AttackSpec& spec,
                    const std::string& method, int threads) {
  AdvSet adv;
  adv.source = model.name();
  adv.method = method;
  adv.ids = ids;
  adv.images.resize(examples.size());
  adv.rmsds.resize(examples.size());
  parallel_for(static_cast<int>(examples.size()), threads, [&](int i) {
    const AdversarialResult result =
        spec.method == AttackMethod::OPT
            ? optimization_attack(model, examples[static_cast<size_t>(i)], spec)
            : fast_gradient_attack(model, examples[static_cast<size_t>(i)],
                                   spec);
    adv.images[static_cast<size_t>(i)] = result.adv_image;
    adv.rmsds[static_cast<size_t>(i)] = result.rmsd;
  });
  return adv;
}

double mean_of(const std::vector<double>& v) {
  double total = 0.0;
  for (double x : v) total += x;
  return v.empty() ? 0.0 : total / static_cast<double>(v.size());
}

}  // namespace

// ---- renderers ----

std::string matrix_csv(const TransferMatrix& matrix) {
  std::ostringstream os;
  os << "source,mean_rmsd";
  for (const auto& name : matrix.evaluators) os << "," << name;
  os << "\n";
  for (size_t r = 0; r < matrix.sources.size(); ++r) {
    os << matrix.sources[r] << ","
       << fmt(matrix.mean_rmsd[static_cast<Eigen::Index>(r)], 2);
    for (size_t c = 0; c < matrix.evaluators.size(); ++c)
      os << ","
         << fmt(matrix.cells(static_cast<Eigen::Index>(r),
                             static_cast<Eigen::Index>(c)),
                2);
    os << "\n";
  }
  return os.str();
}

std::string adv_sidecar_csv(const AdvSet& adv) {
  std::ostringstream os;
  os << "id,rmsd,source\n";
  for (size_t i = 0; i < adv.ids.size(); ++i)
    os << adv.ids[i] << "," << fmt(adv.rmsds[i], 6) << "," << adv.source
       << "\n";
  return os.str();
}

std::string noise_csv(const std::vector<NoiseRow>& rows,
                      const std::vector<std::string>& model_names) {
  std::ostringstream os;
  os << "std,mean_rmsd";
  for (const auto& name : model_names) os << "," << name;
  os << "\n";
  for (const NoiseRow& row : rows) {
    os << fmt(row.std_dev, 2) << "," << fmt(row.mean_rmsd, 2);
    for (Eigen::Index i = 0; i < row.accuracy_percent.size(); ++i)
      os << "," << fmt(row.accuracy_percent[i], 2);
    os << "\n";
  }
  return os.str();
}

std::string cosine_csv(const CosineMatrix& matrix, bool absolute) {
  const MatD& cells = absolute ? matrix.mean_abs_cos : matrix.mean_cos;
  std::ostringstream os;
  os << "model";
  for (const auto& name : matrix.models) os << "," << name;
  os << "\n";
  for (size_t r = 0; r < matrix.models.size(); ++r) {
    os << matrix.models[r];
    for (size_t c = 0; c < matrix.models.size(); ++c)
      os << ","
         << fmt(cells(static_cast<Eigen::Index>(r),
                      static_cast<Eigen::Index>(c)),
                4);
    os << "\n";
  }
  return os.str();
}

std::string grid_csv(const Plane& plane, const LabelGrid& grid) {
  std::ostringstream os;
  os << "u,v,label\n";
  for (int iv = 0; iv < plane.nv; ++iv)
    for (int iu = 0; iu < plane.nu; ++iu)
      os << fmt(plane.u_at(iu), 4) << "," << fmt(plane.v_at(iv), 4) << ","
         << grid(iv, iu) << "\n";
  return os.str();
}

std::string grid_pgm(const LabelGrid& grid, int num_classes) {
  std::ostringstream os;
  os << "P5\n" << grid.cols() << " " << grid.rows() << "\n255\n";
  for (Eigen::Index r = 0; r < grid.rows(); ++r)
    for (Eigen::Index c = 0; c < grid.cols(); ++c) {
      const int gray = num_classes > 1
                           ? (grid(r, c) * 255) / (num_classes - 1)
                           : 0;
      os.put(static_cast<char>(gray));
    }
  return os.str();
}

std::string weight_trace_csv(const WeightTrace& trace,
                             const std::vector<std::string>& member_names) {
  std::ostringstream os;
  os << "iteration,model,weight\n";
  for (Eigen::Index it = 0; it < trace.w.rows(); ++it)
    for (size_t m = 0; m < member_names.size(); ++m)
      os << it + 1 << "," << member_names[m] << ","
         << fmt(trace.w(it, static_cast<Eigen::Index>(m)), 9) << "\n";
  return os.str();
}

std::string logit_profile_csv(const LogitProfile& profile) {
  std::ostringstream os;
  os << "b,label,logit\n";
  for (size_t s = 0; s < profile.bs.size(); ++s)
    for (size_t l = 0; l < profile.labels.size(); ++l)
      os << fmt(profile.bs[s], 4) << "," << profile.labels[l] << ","
         << fmt(profile.logits(static_cast<Eigen::Index>(s),
                               static_cast<Eigen::Index>(l)),
                6)
         << "\n";
  return os.str();
}

// ---- artifact io ----

LoadedModels load_models(const Config& cfg, const std::filesystem::path& root) {
  LoadedModels out;
  out.storage.reserve(cfg.models.size() + 1);
  for (const auto& entry : cfg.models)
    out.storage.push_back(load_model(root / "models" / (entry.name + ".atlm")));
  out.storage.push_back(
      load_model(root / "models" / (cfg.blackbox.name + ".atlm")));
  for (size_t i = 0; i + 1 < out.storage.size(); ++i)
    out.attackable.push_back(&out.storage[i]);
  out.blackbox = &out.storage.back();
  out.all = out.attackable;
  out.all.push_back(out.blackbox);
  return out;
}

void save_testset(OutputSink& sink, const TestSet& set) {
  json doc;
  doc["seed"] = set.seed;
  doc["ids"] = set.ids;
  doc["targets"] = set.targets;
  sink.write("testset.json", doc.dump(2) + "\n");
}

TestSet load_testset(const std::filesystem::path& root) {
  const json doc = json::parse(read_file_bytes(root / "testset.json"));
  TestSet set;
  set.seed = doc.at("seed").get<std::uint64_t>();
  set.ids = doc.at("ids").get<std::vector<int>>();
  set.targets = doc.at("targets").get<std::vector<int>>();
  return set;
}

void save_adv_set(OutputSink& sink, const std::string& relative_base,
                  const AdvSet& adv,
                  const std::vector<LabeledExample>& examples, int num_classes,
                  const ImageShape& shape) {
  Dataset ds;
  ds.num_classes = num_classes;
  ds.shape = shape;
  ds.provenance = adv.source + "/" + adv.method;
  ds.examples.reserve(adv.images.size());
  for (size_t i = 0; i < adv.images.size(); ++i) {
    LabeledExample e;
    e.image = adv.images[i];
    e.ground_truth = examples[i].ground_truth;
    e.target_label = examples[i].target_label;
    ds.examples.push_back(std::move(e));
  }
  sink.write(relative_base + ".atds", encode_dataset(ds));
  sink.write(relative_base + ".csv", adv_sidecar_csv(adv));
}

AdvSet load_adv_set(const std::filesystem::path& root,
                    const std::string& relative_base, std::string source,
                    std::string method) {
  const Dataset ds = load_dataset(root / (relative_base + ".atds"));
  AdvSet adv;
  adv.source = std::move(source);
  adv.method = std::move(method);
  for (const auto& e : ds.examples) adv.images.push_back(e.image);

  const std::string csv = read_file_bytes(root / (relative_base + ".csv"));
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw SerializationError("malformed sidecar row '" + line + "'");
    adv.ids.push_back(std::stoi(line.substr(0, c1)));
    adv.rmsds.push_back(std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
  }
  if (adv.ids.size() != adv.images.size())
    throw SerializationError("sidecar and image counts differ for '" +
                             relative_base + "'");
  return adv;
}

// ---- stages ----

void stage_gen_data(const Config& cfg, OutputSink& sink) {
  // One corpus, split disjointly: a private training slice per registered
  // model, one for the black box, and the selection pool.
  const int models = static_cast<int>(cfg.models.size());
  const int total = models * cfg.data.train_count + cfg.data.blackbox_count +
                    cfg.data.pool_count;
  const Dataset corpus = generate_dataset(
      cfg.data.generator, Rng::mix(cfg.seed, 0xda7aU), total, cfg.data.noise_std);
  const Dataset train =
      slice_dataset(corpus, 0, models * cfg.data.train_count);
  const Dataset bbox =
      slice_dataset(corpus, models * cfg.data.train_count,
                    models * cfg.data.train_count + cfg.data.blackbox_count);
  const Dataset pool = slice_dataset(corpus, total - cfg.data.pool_count, total);
  sink.write("data/train.atds", encode_dataset(train));
  sink.write("data/blackbox_train.atds", encode_dataset(bbox));
  sink.write("data/pool.atds", encode_dataset(pool));
}

void stage_train(const Config& cfg, OutputSink& sink) {
  const Dataset train_split =
      load_dataset(sink.root() / "data" / "train.atds");
  const Dataset bbox_split =
      load_dataset(sink.root() / "data" / "blackbox_train.atds");

  TrainHyperparams hp;
  hp.epochs = cfg.train.epochs;
  hp.batch_size = cfg.train.batch;
  hp.learning_rate = cfg.train.learning_rate;
  hp.momentum = cfg.train.momentum;
  hp.accuracy_floor = cfg.train.floor;

  for (size_t k = 0; k < cfg.models.size(); ++k) {
    const Config::ModelEntry& entry = cfg.models[k];
    hp.seed = name_seed(cfg.seed, 0x7ea1U, entry.name);
    hp.augment_noise = entry.augment;
    const Dataset slice = slice_dataset(
        train_split, static_cast<int>(k) * cfg.data.train_count,
        static_cast<int>(k + 1) * cfg.data.train_count);
    const Model model =
        train(stock_model_spec(entry.arch, entry.name), slice, hp);
    sink.write("models/" + entry.name + ".atlm", encode_model(model));
  }
  hp.seed = name_seed(cfg.seed, 0x7ea1U, cfg.blackbox.name);
  hp.augment_noise = cfg.train.blackbox_augment;
  const Model bbox =
      train(stock_model_spec(cfg.blackbox.arch, cfg.blackbox.name), bbox_split,
            hp);
  sink.write("models/" + cfg.blackbox.name + ".atlm", encode_model(bbox));
}

void stage_select_testset(const Config& cfg, OutputSink& sink) {
  const LoadedModels models = load_models(cfg, sink.root());
  const Dataset pool = load_pool(sink.root());
  const TestSet set = select_test_set(models.all, pool,
                                      Rng::mix(cfg.seed, 0x7e57U),
                                      cfg.testset.size);
  save_testset(sink, set);
}

void stage_attack(const Config& cfg, OutputSink& sink) {
  const LoadedModels models = load_models(cfg, sink.root());
  const TestContext ctx = load_test_context(cfg, sink.root(), models);
  const int threads = cfg.threads;

  json calibration;
  for (const Model* model : models.attackable) {
    AttackSpec opt_nt;
    opt_nt.method = AttackMethod::OPT;
    opt_nt.mode = AttackMode::Nontargeted;
    opt_nt.lambda = cfg.attack.lambda;
    opt_nt.iterations = cfg.attack.iterations;
    opt_nt.learning_rate = calibrate_opt_learning_rate(
        *model, ctx.examples, opt_nt, cfg.attack.target_rmsd,
        cfg.attack.rmsd_tolerance, 0.125, 32.0, threads);

    AttackSpec opt_t = opt_nt;
    opt_t.mode = AttackMode::Targeted;
    opt_t.learning_rate = calibrate_opt_success_rate(
        *model, ctx.examples, opt_t, cfg.attack.success_floor, 0.125, 32.0,
        threads);

    AttackSpec fg_nt;
    fg_nt.method = AttackMethod::FG;
    fg_nt.mode = AttackMode::Nontargeted;
    fg_nt.distortion = calibrate_distortion(*model, ctx.examples, fg_nt,
                                            cfg.attack.target_rmsd,
                                            cfg.attack.rmsd_tolerance);
    AttackSpec fgs_nt;
    fgs_nt.method = AttackMethod::FGS;
    fgs_nt.mode = AttackMode::Nontargeted;
    fgs_nt.distortion = calibrate_distortion(*model, ctx.examples, fgs_nt,
                                             cfg.attack.target_rmsd,
                                             cfg.attack.rmsd_tolerance);
    AttackSpec fg_t = fg_nt;
    fg_t.mode = AttackMode::Targeted;
    AttackSpec fgs_t = fgs_nt;
    fgs_t.mode = AttackMode::Targeted;

    const std::vector<std::pair<std::string, const AttackSpec*>> jobs = {
        {"opt_nontargeted", &opt_nt}, {"opt_targeted", &opt_t},
        {"fg_nontargeted", &fg_nt},   {"fg_targeted", &fg_t},
        {"fgs_nontargeted", &fgs_nt}, {"fgs_targeted", &fgs_t}};
    for (const auto& [method, spec] : jobs) {
      const AdvSet adv = attack_batch(*model, ctx.examples, ctx.set.ids,
                                      *spec, method, threads);
      save_adv_set(sink, "attacks/" + model->name() + "_" + method, adv,
                   ctx.examples, model->num_classes(), model->input_shape());
      calibration[model->name()][method] = {
          {"learning_rate", spec->learning_rate},
          {"distortion", spec->distortion},
          {"iterations", spec->iterations},
          {"lambda", spec->lambda},
          {"mean_rmsd", mean_of(adv.rmsds)}};
    }
  }
  sink.write("attacks/calibration.json", calibration.dump(2) + "\n");
}

void stage_attack_ensemble(const Config& cfg, OutputSink& sink) {
  const LoadedModels models = load_models(cfg, sink.root());
  const TestContext ctx = load_test_context(cfg, sink.root(), models);
  const int threads = cfg.threads;
  const int n = static_cast<int>(ctx.examples.size());

  for (size_t hold = 0; hold < models.attackable.size(); ++hold) {
    const std::string& held_name = models.attackable[hold]->name();
    std::vector<const Model*> members;
    std::vector<std::string> member_names;
    for (size_t i = 0; i < models.attackable.size(); ++i) {
      if (i == hold) continue;
      members.push_back(models.attackable[i]);
      member_names.push_back(models.attackable[i]->name());
    }
    const std::string base = "attacks_ensemble/minus_" + held_name + "_";

    EnsembleSpec equal;
    equal.members = member_names;
    equal.learning_rate = cfg.ensemble.learning_rate;
    equal.iterations = cfg.ensemble.iterations;

    EnsembleSpec mw = equal;
    mw.variant = EnsembleVariant::Multiplicative;
    mw.step_rule = StepRule::SignOfGradient;
    mw.learning_rate = cfg.ensemble.mw_learning_rate;
    mw.eta = cfg.ensemble.eta;

    auto run_batch = [&](const std::string& method, AttackMode mode,
                         auto&& attack_one) {
      AdvSet adv;
      adv.source = "-" + held_name;
      adv.method = method;
      adv.ids = ctx.set.ids;
      adv.images.resize(static_cast<size_t>(n));
      adv.rmsds.resize(static_cast<size_t>(n));
      parallel_for(n, threads, [&](int i) {
        const AdversarialResult result =
            attack_one(ctx.examples[static_cast<size_t>(i)], i);
        adv.images[static_cast<size_t>(i)] = result.adv_image;
        adv.rmsds[static_cast<size_t>(i)] = result.rmsd;
      });
      save_adv_set(sink, base + method, adv, ctx.examples,
                   members.front()->num_classes(),
                   members.front()->input_shape());
      (void)mode;
      return mean_of(adv.rmsds);
    };

    EnsembleSpec equal_t = equal;
    equal_t.mode = AttackMode::Targeted;
    equal_t.learning_rate = cfg.ensemble.targeted_learning_rate;
    const double rmsd_opt_t =
        run_batch("ens_opt_targeted", AttackMode::Targeted,
                  [&](const LabeledExample& e, int) {
                    return ensemble_optimization_attack(members, e, equal_t);
                  });

    EnsembleSpec equal_nt = equal;
    const double rmsd_opt_nt =
        run_batch("ens_opt_nontargeted", AttackMode::Nontargeted,
                  [&](const LabeledExample& e, int) {
                    return ensemble_optimization_attack(members, e, equal_nt);
                  });

    // The weight trace of the first test image is kept for audit.
    run_batch("ens_mw_nontargeted", AttackMode::Nontargeted,
              [&](const LabeledExample& e, int index) {
                auto [result, trace] = ensemble_mw_attack(members, e, mw);
                if (index == 0)
                  sink.write(base + "mw_weights.csv",
                             weight_trace_csv(trace, member_names));
                return result;
              });

    // Fast-gradient forms at the RMSD of the matching optimization attack.
    EnsembleSpec fg_nt = equal_nt;
    fg_nt.distortion = calibrate_ensemble_distortion(
        members, ctx.examples, fg_nt, AttackMethod::FG, rmsd_opt_nt,
        cfg.attack.rmsd_tolerance);
    run_batch("ens_fg_nontargeted", AttackMode::Nontargeted,
              [&](const LabeledExample& e, int) {
                return ensemble_fast_gradient(members, e, fg_nt,
                                              AttackMethod::FG);
              });
    EnsembleSpec fgs_nt = equal_nt;
    fgs_nt.distortion = calibrate_ensemble_distortion(
        members, ctx.examples, fgs_nt, AttackMethod::FGS, rmsd_opt_nt,
        cfg.attack.rmsd_tolerance);
    run_batch("ens_fgs_nontargeted", AttackMode::Nontargeted,
              [&](const LabeledExample& e, int) {
                return ensemble_fast_gradient(members, e, fgs_nt,
                                              AttackMethod::FGS);
              });
    EnsembleSpec fg_t = equal_t;
    fg_t.distortion = calibrate_ensemble_distortion(
        members, ctx.examples, fg_t, AttackMethod::FG, rmsd_opt_t,
        cfg.attack.rmsd_tolerance);
    run_batch("ens_fg_targeted", AttackMode::Targeted,
              [&](const LabeledExample& e, int) {
                return ensemble_fast_gradient(members, e, fg_t,
                                              AttackMethod::FG);
              });
    EnsembleSpec fgs_t = equal_t;
    fgs_t.distortion = calibrate_ensemble_distortion(
        members, ctx.examples, fgs_t, AttackMethod::FGS, rmsd_opt_t,
        cfg.attack.rmsd_tolerance);
    run_batch("ens_fgs_targeted", AttackMode::Targeted,
              [&](const LabeledExample& e, int) {
                return ensemble_fast_gradient(members, e, fgs_t,
                                              AttackMethod::FGS);
              });
  }
}

namespace {

void write_matrix(OutputSink& sink, const Config& cfg, const std::string& name,
                  const TransferMatrix& matrix) {
  sink.write("tables/" + name + ".csv", matrix_csv(matrix));
  json meta;
  meta["kind"] = kindName(matrix.kind);
  meta["k"] = matrix.k;
  meta["sources"] = matrix.sources;
  meta["evaluators"] = matrix.evaluators;
  meta["config_hash"] = cfg.hash();
  meta["seed"] = cfg.seed;
  std::vector<double> rmsd(matrix.mean_rmsd.data(),
                           matrix.mean_rmsd.data() + matrix.mean_rmsd.size());
  meta["mean_rmsd"] = rmsd;
  std::vector<std::vector<double>> cells;
  for (Eigen::Index r = 0; r < matrix.cells.rows(); ++r)
    cells.emplace_back(matrix.cells.row(r).begin(), matrix.cells.row(r).end());
  meta["cells"] = cells;
  sink.write("tables/" + name + ".json", meta.dump(2) + "\n");
}

}  // namespace

void stage_evaluate(const Config& cfg, OutputSink& sink) {
  const LoadedModels models = load_models(cfg, sink.root());
  const TestContext ctx = load_test_context(cfg, sink.root(), models);
  const int threads = cfg.threads;

  struct Group {
    std::string method;
    MatrixKind kind;
    bool ensemble;
  };
  const std::vector<Group> groups = {
      {"opt_nontargeted", MatrixKind::Accuracy, false},
      {"fg_nontargeted", MatrixKind::Accuracy, false},
      {"fgs_nontargeted", MatrixKind::Accuracy, false},
      {"opt_targeted", MatrixKind::MatchingRate, false},
      {"fg_targeted", MatrixKind::MatchingRate, false},
      {"fgs_targeted", MatrixKind::MatchingRate, false},
      {"ens_opt_targeted", MatrixKind::MatchingRate, true},
      {"ens_opt_nontargeted", MatrixKind::Accuracy, true},
      {"ens_mw_nontargeted", MatrixKind::Accuracy, true},
      {"ens_fg_nontargeted", MatrixKind::Accuracy, true},
      {"ens_fgs_nontargeted", MatrixKind::Accuracy, true},
      {"ens_fg_targeted", MatrixKind::MatchingRate, true},
      {"ens_fgs_targeted", MatrixKind::MatchingRate, true},
  };

  // Clean baseline: the test set itself, which is 100% by construction.
  {
    AdvSet clean;
    clean.source = "clean";
    clean.method = "clean";
    clean.ids = ctx.set.ids;
    for (const auto& e : ctx.examples) {
      clean.images.push_back(e.image);
      clean.rmsds.push_back(0.0);
    }
    for (int k : cfg.evaluation.k_depths)
      write_matrix(sink, cfg, "clean_accuracy_top" + std::to_string(k),
                   transfer_matrix({clean}, ctx.examples, ctx.set.ids,
                                   models.all, MatrixKind::Accuracy, k,
                                   threads));
  }

  std::map<std::string, std::vector<AdvSet>> loaded;
  for (const Group& group : groups) {
    std::vector<AdvSet> sets;
    if (!group.ensemble) {
      for (const auto& entry : cfg.models) {
        const std::string base = "attacks/" + entry.name + "_" + group.method;
        if (!std::filesystem::exists(sink.root() / (base + ".atds"))) continue;
        sets.push_back(load_adv_set(sink.root(), base, entry.name, group.method));
      }
    } else {
      for (const auto& entry : cfg.models) {
        const std::string base =
            "attacks_ensemble/minus_" + entry.name + "_" + group.method;
        if (!std::filesystem::exists(sink.root() / (base + ".atds"))) continue;
        sets.push_back(
            load_adv_set(sink.root(), base, "-" + entry.name, group.method));
      }
    }
    if (sets.empty()) continue;  // evaluation-only runs have no attack files
    for (int k : cfg.evaluation.k_depths)
      write_matrix(sink, cfg, group.method + "_top" + std::to_string(k),
                   transfer_matrix(sets, ctx.examples, ctx.set.ids, models.all,
                                   group.kind, k, threads));
    loaded[group.method] = std::move(sets);
  }

  // Same-mistake and wrong-label studies on the pinned source model.
  for (const std::string method :
       {"opt_nontargeted", "fg_nontargeted", "fgs_nontargeted"}) {
    const auto it = loaded.find(method);
    if (it == loaded.end()) continue;
    const AdvSet* pinned = nullptr;
    for (const AdvSet& adv : it->second)
      if (adv.source == cfg.evaluation.scan_source) pinned = &adv;
    if (!pinned) continue;

    std::ostringstream os;
    os << "model";
    for (const Model* m : models.attackable) os << "," << m->name();
    os << "\n";
    for (const Model* a : models.attackable) {
      os << a->name();
      for (const Model* b : models.attackable) {
        if (a == b) {
          os << ",100.00";
          continue;
        }
        const auto pct = same_mistake(*pinned, ctx.examples, *a, *b);
        os << "," << (pct ? fmt(*pct, 2) : "n/a");
      }
      os << "\n";
    }
    sink.write("tables/same_mistake_" + cfg.evaluation.scan_source + "_" +
                   method + ".csv",
               os.str());

    if (method == "opt_nontargeted") {
      for (const Model* m : models.all) {
        std::ostringstream hs;
        hs << "label,percent\n";
        for (const auto& [label, pct] :
             wrong_label_histogram(*pinned, ctx.examples, *m))
          hs << label << "," << fmt(pct, 2) << "\n";
        sink.write("tables/wrong_labels_" + m->name() + ".csv", hs.str());
      }
    }
  }
}

namespace {

const Model* find_model(const LoadedModels& models, const std::string& name) {
  for (const Model* m : models.all)
    if (m->name() == name) return m;
  throw ConfigError("model '" + name + "' is not registered");
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

void stage_min_rmsd(const Config& cfg, OutputSink& sink) {
  const LoadedModels models = load_models(cfg, sink.root());
  const TestContext ctx = load_test_context(cfg, sink.root(), models);
  const Model* source = find_model(models, cfg.evaluation.scan_source);
  const Model* eval = find_model(models, cfg.evaluation.scan_eval);

  const int n = static_cast<int>(ctx.examples.size());
  std::vector<MinRmsdResult> fg(static_cast<size_t>(n)),
      fgs(static_cast<size_t>(n));
  parallel_for(n, cfg.threads, [&](int i) {
    const LabeledExample& e = ctx.examples[static_cast<size_t>(i)];
    fg[static_cast<size_t>(i)] =
        min_transferable_rmsd(*source, *eval, e, DirectionKind::FG,
                              cfg.evaluation.scan_step,
                              cfg.evaluation.scan_max_b);
    fgs[static_cast<size_t>(i)] =
        min_transferable_rmsd(*source, *eval, e, DirectionKind::FGS,
                              cfg.evaluation.scan_step,
                              cfg.evaluation.scan_max_b);
  });

  std::ostringstream os;
  os << "id,fg_found,fg_b,fg_rmsd,fgs_found,fgs_b,fgs_rmsd\n";
  std::vector<double> fg_vals, fgs_vals;
  for (int i = 0; i < n; ++i) {
    const MinRmsdResult& a = fg[static_cast<size_t>(i)];
    const MinRmsdResult& b = fgs[static_cast<size_t>(i)];
    os << ctx.set.ids[static_cast<size_t>(i)] << "," << (a.found ? 1 : 0)
       << "," << fmt(a.b, 4) << "," << fmt(a.rmsd, 4) << ","
       << (b.found ? 1 : 0) << "," << fmt(b.b, 4) << "," << fmt(b.rmsd, 4)
       << "\n";
    if (a.found) fg_vals.push_back(a.rmsd);
    if (b.found) fgs_vals.push_back(b.rmsd);
  }
  const std::string pair_name =
      cfg.evaluation.scan_source + "_to_" + cfg.evaluation.scan_eval;
  sink.write("tables/min_rmsd_" + pair_name + ".csv", os.str());

  json summary;
  summary["source"] = cfg.evaluation.scan_source;
  summary["eval"] = cfg.evaluation.scan_eval;
  summary["fg_found"] = fg_vals.size();
  summary["fgs_found"] = fgs_vals.size();
  summary["fg_median_rmsd"] = median_of(fg_vals);
  summary["fgs_median_rmsd"] = median_of(fgs_vals);
  sink.write("tables/min_rmsd_" + pair_name + ".json", summary.dump(2) + "\n");
}

void stage_intervals(const Config& cfg, OutputSink& sink) {
  const LoadedModels models = load_models(cfg, sink.root());
  const TestContext ctx = load_test_context(cfg, sink.root(), models);
  const Model* source = find_model(models, cfg.evaluation.scan_source);
  const Model* eval = find_model(models, cfg.evaluation.scan_eval);

  const int n = static_cast<int>(ctx.examples.size());
  std::vector<std::vector<BInterval>> all(static_cast<size_t>(n));
  parallel_for(n, cfg.threads, [&](int i) {
    all[static_cast<size_t>(i)] = adversarial_intervals(
        *source, *eval, ctx.examples[static_cast<size_t>(i)],
        DirectionKind::FG, cfg.evaluation.scan_step, cfg.evaluation.scan_max_b);
  });

  std::ostringstream os;
  os << "id,b_start,b_end\n";
  int multi = 0;
  for (int i = 0; i < n; ++i) {
    const auto& intervals = all[static_cast<size_t>(i)];
    if (intervals.size() >= 2) ++multi;
    for (const BInterval& iv : intervals)
      os << ctx.set.ids[static_cast<size_t>(i)] << "," << fmt(iv.begin, 4)
         << "," << fmt(iv.end, 4) << "\n";
  }
  const std::string pair_name =
      cfg.evaluation.scan_source + "_to_" + cfg.evaluation.scan_eval;
  sink.write("tables/intervals_" + pair_name + ".csv", os.str());

  json summary;
  summary["source"] = cfg.evaluation.scan_source;
  summary["eval"] = cfg.evaluation.scan_eval;
  summary["images_with_multiple_intervals"] = multi;
  sink.write("tables/intervals_" + pair_name + ".json", summary.dump(2) + "\n");
}

void stage_noise_baseline(const Config& cfg, OutputSink& sink) {
  const LoadedModels models = load_models(cfg, sink.root());
  const TestContext ctx = load_test_context(cfg, sink.root(), models);
  const auto rows = gaussian_baseline(
      models.all, ctx.examples, cfg.evaluation.noise_stds,
      cfg.evaluation.noises_per_image, 1, Rng::mix(cfg.seed, 0x4015eU),
      cfg.threads);
  std::vector<std::string> names;
  for (const Model* m : models.all) names.push_back(m->name());
  sink.write("tables/noise.csv", noise_csv(rows, names));
}

void stage_cosine(const Config& cfg, OutputSink& sink) {
  const LoadedModels models = load_models(cfg, sink.root());
  const TestContext ctx = load_test_context(cfg, sink.root(), models);
  const CosineMatrix matrix = cosine_matrix(models.attackable, ctx.examples);
  sink.write("tables/cosine.csv", cosine_csv(matrix, false));
  sink.write("tables/cosine_abs.csv", cosine_csv(matrix, true));
}

void stage_plane(const Config& cfg, OutputSink& sink) {
  const LoadedModels models = load_models(cfg, sink.root());
  const TestContext ctx = load_test_context(cfg, sink.root(), models);
  const Model* source = find_model(models, cfg.evaluation.scan_source);
  const LabeledExample& pinned = ctx.examples.front();
  const int classes = source->num_classes();
  const int res = cfg.geometry.resolution;

  json legend;
  for (int label = 0; label < classes; ++label)
    legend[std::to_string(label)] =
        classes > 1 ? (label * 255) / (classes - 1) : 0;
  sink.write("geometry/plane_legend.json", legend.dump(2) + "\n");

  std::ostringstream regions;
  regions << "plane,model,labels\n";
  const auto scan_and_write = [&](const std::string& plane_name,
                                  const Plane& plane) {
    const auto grids = scan_plane(models.all, plane, cfg.threads);
    for (size_t m = 0; m < models.all.size(); ++m) {
      const std::string base =
          "geometry/plane_" + plane_name + "_" + models.all[m]->name();
      sink.write(base + ".csv", grid_csv(plane, grids[m]));
      sink.write(base + ".pgm", grid_pgm(grids[m], classes));
      regions << plane_name << "," << models.all[m]->name() << ","
              << region_label_count(grids[m]) << "\n";
    }
  };

  for (const auto& [zoom_name, extent_half] :
       std::vector<std::pair<std::string, double>>{
           {"zoom_in", cfg.geometry.zoom_in},
           {"zoom_out", cfg.geometry.zoom_out}}) {
    const PlaneExtent extent{-extent_half, extent_half, -extent_half,
                             extent_half};
    const Plane plane =
        make_plane(*source, pinned, PlaneAxis::Gradient,
                   Rng::mix(cfg.seed, 0x9a23U), extent, res, res);
    scan_and_write(zoom_name, plane);
  }

  // Targeted-direction plane: the axis is the difference between the pinned
  // image and its targeted ensemble attack (held-out model excluded).
  {
    std::vector<const Model*> members;
    for (const Model* m : models.attackable)
      if (m->name() != cfg.evaluation.scan_eval) members.push_back(m);
    EnsembleSpec spec;
    spec.mode = AttackMode::Targeted;
    spec.learning_rate = cfg.ensemble.learning_rate;
    spec.iterations = cfg.ensemble.iterations;
    const AdversarialResult adv =
        ensemble_optimization_attack(members, pinned, spec);
    const PlaneExtent extent{-cfg.geometry.zoom_in, cfg.geometry.zoom_in,
                             -cfg.geometry.zoom_in, cfg.geometry.zoom_in};
    const Plane plane = make_plane(
        *source, pinned, PlaneAxis::TargetedAdvDirection,
        Rng::mix(cfg.seed, 0x9a24U), extent, res, res, &adv.adv_image);
    scan_and_write("targeted", plane);
  }

  sink.write("geometry/regions.csv", regions.str());
}

void stage_logit_profile(const Config& cfg, OutputSink& sink) {
  const LoadedModels models = load_models(cfg, sink.root());
  const TestContext ctx = load_test_context(cfg, sink.root(), models);
  const LabeledExample& pinned = ctx.examples.front();

  std::vector<double> bs;
  for (int i = 0; i < cfg.geometry.logit_samples; ++i)
    bs.push_back(cfg.geometry.logit_max_b * i /
                 (cfg.geometry.logit_samples - 1));
  for (const Model* m : models.attackable) {
    const LogitProfile profile =
        logit_profile(*m, pinned, DirectionKind::FG, bs);
    sink.write("geometry/logit_" + m->name() + ".csv",
               logit_profile_csv(profile));
  }
}

std::string run_experiment(const Config& cfg) {
  cfg.validate();
  OutputSink sink(cfg.out);

  using Stage = void (*)(const Config&, OutputSink&);
  const std::vector<std::pair<const char*, Stage>> stages = {
      {"gen-data", stage_gen_data},
      {"train", stage_train},
      {"select-testset", stage_select_testset},
      {"attack", stage_attack},
      {"attack-ensemble", stage_attack_ensemble},
      {"evaluate", stage_evaluate},
      {"min-rmsd", stage_min_rmsd},
      {"intervals", stage_intervals},
      {"noise-baseline", stage_noise_baseline},
      {"cosine", stage_cosine},
      {"plane", stage_plane},
      {"logit-profile", stage_logit_profile},
  };

  std::vector<std::string> completed;
  auto render_manifest = [&](const std::string& failed) {
    json doc;
    doc["format"] = "advlab-manifest/1";
    doc["config_hash"] = cfg.hash();
    doc["seed"] = cfg.seed;
    doc["stages_completed"] = completed;
    if (!failed.empty()) doc["failed_stage"] = failed;
    json files = json::object();
    for (const auto& [path, crc] : sink.files()) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", crc);
      files[path] = buf;
    }
    doc["files"] = files;
    return doc.dump(2) + "\n";
  };

  for (const auto& [name, stage] : stages) {
    try {
      stage(cfg, sink);
      completed.push_back(name);
    } catch (const std::exception& e) {
      const std::string manifest = render_manifest(name);
      write_file_bytes(std::filesystem::path(cfg.out) / "manifest.json",
                       manifest);
      throw StageError(name, e.what());
    }
  }
  const std::string manifest = render_manifest("");
  write_file_bytes(std::filesystem::path(cfg.out) / "manifest.json", manifest);
  return manifest;
}

}  // namespace advlab
