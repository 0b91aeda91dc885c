#pragma once

#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "neuroenc/analysis.hpp"
#include "neuroenc/csv.hpp"
#include "neuroenc/encoding.hpp"
#include "neuroenc/experiment_config.hpp"
#include "neuroenc/image.hpp"
#include "neuroenc/synthetic.hpp"
#include "neuroenc/transfer.hpp"
#include "neuroenc/tuning.hpp"

namespace neuroenc {

namespace fs = std::filesystem;

inline std::string subject_name(int s) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "s%02d", s);
  return buf;
}
inline std::string external_name(int s) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "e%02d", s);
  return buf;
}

/// Bounded worker fan-out over independent tasks; rethrows the first task
/// failure. jobs <= 1 degenerates to a plain loop.
template <typename Fn>
void parallel_tasks(int n_tasks, int jobs, Fn&& fn) {
  if (jobs <= 1 || n_tasks <= 1) {
    for (int i = 0; i < n_tasks; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  const int workers = std::min(jobs, n_tasks);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n_tasks; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

/// Full-pipeline driver. Every stage reads its prerequisites from disk and
/// writes artifacts stamped with the config hash, so stages can run in one
/// process or as separate CLI invocations.
class Experiment {
 public:
  Experiment(ExperimentConfig cfg, fs::path out_dir)
      : cfg_(std::move(cfg)), root_(std::move(out_dir)) {
    cfg_.finalize_seeds();
    hash_ = cfg_.hash();
    stamp_ = CsvStamp{hash_, cfg_.seed};
    fs::create_directories(root_);
    write_or_check_config();
  }

  const std::string& config_hash() const { return hash_; }
  const ExperimentConfig& config() const { return cfg_; }
  const fs::path& root() const { return root_; }

  /// Worker count for independent (subject, roi) tuning jobs.
  void set_jobs(int jobs) { jobs_ = std::max(1, jobs); }

  static const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = {
        "synth",   "pretrain", "cv",        "tune", "encode", "transfer",
        "external", "probe",   "landscape", "mi",   "saliency", "report"};
    return names;
  }

  void run_stage(const std::string& stage) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      if (stage == "synth") synth();
      else if (stage == "pretrain") pretrain();
      else if (stage == "cv") cv();
      else if (stage == "tune") tune();
      else if (stage == "encode") encode();
      else if (stage == "transfer") transfer();
      else if (stage == "external") external();
      else if (stage == "probe") probe();
      else if (stage == "landscape") landscape();
      else if (stage == "mi") mi();
      else if (stage == "saliency") saliency();
      else if (stage == "report") report();
      else throw InvalidInput("unknown stage: " + stage);
    } catch (const std::exception& e) {
      write_error_manifest(stage, e.what());
      throw;
    }
    std::printf("[stage %s] %.1fs\n", stage.c_str(),
                std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                              t0)
                    .count());
  }

  /// Runs every stage in order, stopping after `upto` when given.
  void run_all(const std::string& upto = "") {
    for (const auto& s : stage_names()) {
      run_stage(s);
      if (!upto.empty() && s == upto) break;
    }
  }

  // -------------------------------------------------------------------------
  // Stage: synth
  // -------------------------------------------------------------------------

  void synth() {
    for (int s = 0; s < cfg_.cohort.subjects; ++s) {
      auto ds = make_subject(cfg_.cohort, s, "cohort", subject_name(s));
      save_dataset(ds, subject_manifest(s));
    }
    // Pretraining set: stands in for the classification pretraining corpus;
    // disjoint generator stream from every subject.
    {
      SubjectDataset pre;
      pre.subject_id = "pretrain";
      pre.stimuli = generate_stimuli(cfg_.pretrain_images, cfg_.cohort.image_size,
                                     cfg_.cohort.images,
                                     seed_tag(cfg_.seed, "pretrainset"), "pre");
      save_dataset(pre, pretrain_manifest());
    }
    if (cfg_.probe.enabled) {
      SubjectDataset ps;
      ps.subject_id = "probeset";
      ps.stimuli = generate_stimuli(cfg_.probe.n_images, cfg_.cohort.image_size,
                                    cfg_.cohort.images,
                                    seed_tag(cfg_.seed, "probeset"), "probe");
      ps = split_dataset(ps, cfg_.probe.test_fraction,
                         seed_tag(cfg_.seed, "probesplit"));
      save_dataset(ps, probeset_manifest());
    }
    if (cfg_.external.enabled) {
      CohortConfig ext = cfg_.cohort;
      ext.subjects = cfg_.external.subjects;
      ext.n_images = cfg_.external.n_images;
      ext.subject_noise_scale.clear();
      for (auto& roi : ext.rois) roi.noise_std *= cfg_.external.noise_scale;
      for (int s = 0; s < ext.subjects; ++s) {
        auto ds = make_subject(ext, s, "external", external_name(s));
        save_dataset(ds, external_manifest(s));
      }
    }
    if (cfg_.saliency.enabled) {
      const Hemisphere side = hemisphere_from_string(cfg_.saliency.side);
      CohortConfig sal;
      sal.subjects = 1;
      sal.n_images = cfg_.saliency.n_images;
      sal.image_size = cfg_.cohort.image_size;
      sal.test_fraction = cfg_.cohort.test_fraction;
      sal.teacher_seed = cfg_.cohort.teacher_seed;
      sal.images = cfg_.cohort.images;
      sal.images.bilateral = true;
      sal.images.label_side = side;
      sal.rois = {{"lat", cfg_.saliency.voxels, cfg_.saliency.teacher_tap,
                   cfg_.saliency.noise_std, side}};
      auto ds = make_subject(sal, 0, "saliency", "x00");
      save_dataset(ds, saliency_manifest());
    }
    std::printf("[synth] cohort=%d external=%d probe=%d saliency=%d\n",
                cfg_.cohort.subjects,
                cfg_.external.enabled ? cfg_.external.subjects : 0,
                cfg_.probe.enabled ? 1 : 0, cfg_.saliency.enabled ? 1 : 0);
  }

  // -------------------------------------------------------------------------
  // Stage: pretrain
  // -------------------------------------------------------------------------

  void pretrain() {
    auto pre = load_dataset(pretrain_manifest());
    BackboneF model = build_backbone(cfg_.backbone);
    model.provenance().config_hash = hash_;
    auto log = pretrain_backbone(model, pre.stimuli, cfg_.pretrain);
    save_backbone(pretrained_path(), model);
    CsvWriter csv(root_ / "logs" / "pretrain.csv", &stamp_);
    csv.row({"epoch", "train_loss", "val_loss"});
    for (std::size_t e = 0; e < log.train_loss.size(); ++e)
      csv.row({std::to_string(e), fmt_num(log.train_loss[e]),
               fmt_num(log.val_loss[e])});
    std::printf("[pretrain] val_ce %.4f -> %.4f acc %.3f\n",
                log.initial_val_loss,
                log.val_loss.empty() ? log.initial_val_loss : log.val_loss.back(),
                log.val_accuracy);
  }

  // -------------------------------------------------------------------------
  // Stage: cv
  // -------------------------------------------------------------------------

  void cv() {
    BackboneF control = load_backbone(pretrained_path());
    const auto layers = cv_layers(control);
    json selected;
    MatD fig2(static_cast<Index>(cfg_.cohort.rois.size()),
              static_cast<Index>(layers.size()));
    const std::vector<int> ref_subjects =
        cfg_.cv.per_subject ? all_subject_indices()
                            : std::vector<int>{cfg_.cv.reference_subject};
    for (int s : ref_subjects) {
      auto ds = load_dataset(subject_manifest(s));
      for (std::size_t ri = 0; ri < cfg_.cohort.rois.size(); ++ri) {
        const auto& roi = cfg_.cohort.rois[ri];
        CVResult res = select_hyperparams(
            control, ds, roi.name, layers, cfg_.cv.alphas, cfg_.cv.d,
            cfg_.cv.folds,
            seed_combine(seed_tag(cfg_.seed, "cv"),
                         static_cast<std::uint64_t>(ri)));
        const std::string key =
            cfg_.cv.per_subject ? roi.name + "@" + subject_name(s) : roi.name;
        selected[key] = {{"layer", res.selected_layer},
                         {"alpha", res.selected_alpha}};
        CsvWriter grid(root_ / "cv" / ("cv_" + key + ".csv"), &stamp_);
        std::vector<std::string> head{"layer"};
        for (double a : res.alphas) head.push_back(fmt_num(a));
        grid.row(head);
        for (std::size_t li = 0; li < res.layers.size(); ++li) {
          std::vector<std::string> row{res.layers[li]};
          for (Index ai = 0; ai < res.scores.cols(); ++ai)
            row.push_back(fmt_num(res.scores(static_cast<Index>(li), ai)));
          grid.row(row);
        }
        if (!cfg_.cv.per_subject || s == cfg_.cv.reference_subject)
          for (std::size_t li = 0; li < layers.size(); ++li)
            fig2(static_cast<Index>(ri), static_cast<Index>(li)) =
                res.scores.row(static_cast<Index>(li)).maxCoeff();
        std::printf("[cv] %s: layer=%s alpha=%g\n", key.c_str(),
                    res.selected_layer.c_str(), res.selected_alpha);
      }
    }
    {
      std::ofstream os(root_ / "cv" / "selected.json");
      json out = {{"config_hash", hash_}, {"selected", selected}};
      os << out.dump(2) << "\n";
    }
    CsvWriter fig(root_ / "cv" / "layer_scores.csv", &stamp_);
    std::vector<std::string> head{"roi"};
    for (const auto& l : layers) head.push_back(l);
    fig.row(head);
    for (std::size_t ri = 0; ri < cfg_.cohort.rois.size(); ++ri) {
      std::vector<std::string> row{cfg_.cohort.rois[ri].name};
      for (Index li = 0; li < fig2.cols(); ++li)
        row.push_back(fmt_num(fig2(static_cast<Index>(ri), li)));
      fig.row(row);
    }
    save_heatmap_png(root_ / "cv" / "layer_scores.png", fig2, 24,
                     {{"config_hash", hash_}});
  }

  // -------------------------------------------------------------------------
  // Stage: tune (cl + reg + pooled)
  // -------------------------------------------------------------------------

  void tune() {
    tune_cl();
    tune_reg();
    if (cfg_.tuning.pooled_enabled) tune_pooled();
  }

  void tune_cl() {
    const auto tasks = roi_subject_tasks(cfg_.tuning.cl_rois);
    parallel_tasks(static_cast<int>(tasks.size()), jobs_, [&](int i) {
      const auto& [roi, s] = tasks[static_cast<std::size_t>(i)];
      const auto sel = selected_for(roi, 0);
      auto ds = load_dataset(subject_manifest(s));
      BackboneF model = load_backbone(pretrained_path());
      CLConfig c = cfg_.tuning.cl;
      c.seed = seed_combine(seed_tag(cfg_.tuning.cl.seed, roi),
                            static_cast<std::uint64_t>(s));
      auto [heads, log] = cl_finetune(model, ds, roi, c, sel.first);
      model.provenance().config_hash = hash_;
      save_backbone(model_path("cl", subject_name(s), roi), model);
      save_heads(heads_path("cl", subject_name(s), roi), heads);
      write_train_log("cl_" + subject_name(s) + "_" + roi, log);
      static std::mutex print_mutex;
      std::lock_guard<std::mutex> lock(print_mutex);
      std::printf("[tune cl] %s %s: loss %.4f -> %.4f\n", subject_name(s).c_str(),
                  roi.c_str(), log.epoch_loss.empty() ? 0.0 : log.epoch_loss.front(),
                  log.epoch_loss.empty() ? 0.0 : log.epoch_loss.back());
    });
  }

  void tune_reg() {
    const auto tasks = roi_subject_tasks(cfg_.tuning.reg_rois);
    parallel_tasks(static_cast<int>(tasks.size()), jobs_, [&](int i) {
      const auto& [roi, s] = tasks[static_cast<std::size_t>(i)];
      const auto sel = selected_for(roi, 0);
      auto ds = load_dataset(subject_manifest(s));
      BackboneF model = load_backbone(pretrained_path());
      RegressionConfig c = cfg_.tuning.reg;
      c.seed = seed_combine(seed_tag(cfg_.tuning.reg.seed, roi),
                            static_cast<std::uint64_t>(s));
      auto log = regression_finetune(model, ds, roi, c, sel.first);
      model.provenance().config_hash = hash_;
      save_backbone(model_path("reg", subject_name(s), roi), model);
      write_train_log("reg_" + subject_name(s) + "_" + roi, log);
      static std::mutex print_mutex;
      std::lock_guard<std::mutex> lock(print_mutex);
      std::printf("[tune reg] %s %s: mse %.4f -> %.4f\n", subject_name(s).c_str(),
                  roi.c_str(), log.epoch_loss.empty() ? 0.0 : log.epoch_loss.front(),
                  log.epoch_loss.empty() ? 0.0 : log.epoch_loss.back());
    });
  }

  void tune_pooled() {
    for (const auto& roi : cfg_.tuning.pooled_rois) {
      const auto sel = selected_for(roi, 0);
      std::vector<SubjectDataset> storage;
      storage.reserve(static_cast<std::size_t>(cfg_.cohort.subjects));
      for (int s = 0; s < cfg_.cohort.subjects; ++s)
        storage.push_back(load_dataset(subject_manifest(s)));
      std::vector<const SubjectDataset*> refs;
      for (const auto& ds : storage) refs.push_back(&ds);
      BackboneF model = load_backbone(pretrained_path());
      CLConfig c = cfg_.tuning.cl;
      c.pooled = true;
      c.dh_mode = cfg_.tuning.pooled_dh_mode;
      c.dh_constant = cfg_.tuning.pooled_dh_constant;
      c.seed = seed_tag(cfg_.tuning.cl.seed, "pooled-" + roi);
      auto [heads, log] = pooled_finetune(model, refs, roi, c, sel.first);
      model.provenance().config_hash = hash_;
      save_backbone(model_path("pooled", "all", roi), model);
      save_heads(heads_path("pooled", "all", roi), heads);
      write_train_log("pooled_all_" + roi, log);
      std::printf("[tune pooled] %s: loss %.4f -> %.4f\n", roi.c_str(),
                  log.epoch_loss.empty() ? 0.0 : log.epoch_loss.front(),
                  log.epoch_loss.empty() ? 0.0 : log.epoch_loss.back());
    }
  }

  // -------------------------------------------------------------------------
  // Stage: encode
  // -------------------------------------------------------------------------

  void encode() {
    BackboneF control = load_backbone(pretrained_path());
    CsvWriter csv(root_ / "encode" / "encode.csv", &stamp_);
    csv.row({"kind", "subject", "roi", "tap", "alpha", "rho_bar"});
    for (int s = 0; s < cfg_.cohort.subjects; ++s) {
      auto ds = load_dataset(subject_manifest(s));
      for (const auto& roi : cfg_.cohort.rois) {
        const auto sel = selected_for(roi.name, s);
        encode_one(csv, control, ds, roi.name, sel, "control");
        for (const char* kind : {"cl", "reg"}) {
          const fs::path mp = model_path(kind, subject_name(s), roi.name);
          if (!fs::exists(mp)) continue;
          BackboneF tuned = load_backbone(mp);
          encode_one(csv, tuned, ds, roi.name, sel, kind);
        }
        const fs::path pp = model_path("pooled", "all", roi.name);
        if (fs::exists(pp)) {
          BackboneF pooled = load_backbone(pp);
          encode_one(csv, pooled, ds, roi.name, sel, "pooled");
        }
      }
    }
  }

  // -------------------------------------------------------------------------
  // Stage: transfer
  // -------------------------------------------------------------------------

  void transfer() {
    BackboneF control = load_backbone(pretrained_path());
    for (const auto& roi : cfg_.tuning.cl_rois) {
      std::vector<SubjectDataset> targets;
      for (int s = 0; s < cfg_.cohort.subjects; ++s)
        targets.push_back(load_dataset(subject_manifest(s)));
      CsvWriter csv(root_ / "transfer" / ("transfer_" + roi + ".csv"), &stamp_);
      csv.row({"source", "target", "roi", "rho_tuned", "rho_control",
               "pct_improved"});
      MatD pct(cfg_.cohort.subjects, cfg_.cohort.subjects);
      for (int i = 0; i < cfg_.cohort.subjects; ++i) {
        BackboneF tuned = load_backbone(model_path("cl", subject_name(i), roi));
        for (int j = 0; j < cfg_.cohort.subjects; ++j) {
          const auto sel = selected_for(roi, j);
          TransferResult r = cross_subject_encode(
              tuned, control, targets[static_cast<std::size_t>(j)], roi,
              cfg_.cv.d, sel.second);
          pct(i, j) = r.pct_improved;
          csv.row({r.source_subject, r.target_subject, r.roi,
                   fmt_num(r.rho_bar_tuned), fmt_num(r.rho_bar_control),
                   fmt_num(r.pct_improved)});
        }
      }
      save_heatmap_png(root_ / "transfer" / ("transfer_" + roi + ".png"), pct,
                       32, {{"config_hash", hash_}});
      std::printf("[transfer] %s: mean off-diag pct %.1f\n", roi.c_str(),
                  offdiag_mean(pct));
    }
  }

  // -------------------------------------------------------------------------
  // Stage: external validation
  // -------------------------------------------------------------------------

  void external() {
    if (!cfg_.external.enabled) return;
    BackboneF control = load_backbone(pretrained_path());
    std::vector<SubjectDataset> storage;
    for (int s = 0; s < cfg_.external.subjects; ++s)
      storage.push_back(load_dataset(external_manifest(s)));
    std::vector<const SubjectDataset*> refs;
    for (const auto& ds : storage) refs.push_back(&ds);

    CsvWriter csv(root_ / "external" / "external.csv", &stamp_);
    csv.row({"subject", "roi", "rho_ctrl", "rho_cl", "rho_reg",
             "pct_cl_vs_ctrl", "pct_cl_vs_reg", "alpha"});
    const std::string source = subject_name(cfg_.external.source_subject);
    for (const auto& roi : cfg_.external.rois) {
      BackboneF cl_model = load_backbone(model_path("cl", source, roi));
      BackboneF reg_model = load_backbone(model_path("reg", source, roi));
      auto rows = external_validate(cl_model, reg_model, control, refs, {roi},
                                    cfg_.external.top_k, cfg_.cv.d,
                                    cfg_.cv.alphas, cfg_.cv.folds,
                                    seed_tag(cfg_.seed, "external-cv"));
      for (const auto& r : rows)
        csv.row({r.subject, r.roi, fmt_num(r.rho_ctrl), fmt_num(r.rho_cl),
                 fmt_num(r.rho_reg), fmt_num(r.pct_cl_vs_ctrl),
                 fmt_num(r.pct_cl_vs_reg), fmt_num(r.selected_alpha)});
    }
  }

  // -------------------------------------------------------------------------
  // Stage: probes
  // -------------------------------------------------------------------------

  void probe() {
    if (!cfg_.probe.enabled) return;
    auto ps = load_dataset(probeset_manifest());
    const auto train = ps.train_indices();
    const auto test = ps.test_indices();
    CsvWriter csv(root_ / "probe" / "probe.csv", &stamp_);
    csv.row({"model", "group", "accuracy"});
    StimulusSet test_stim = ps.stimuli.subset(test);
    for (const auto& [id, group, path] : model_catalog()) {
      BackboneF model = load_backbone(path);
      auto res = linear_probe(model, ps.stimuli, train, test, cfg_.probe.l2);
      MatD table = probe_probabilities(model, res.probe, test_stim);
      neb::save(root_ / "probe" / ("table_" + id + ".neb"),
                table.cast<float>());
      csv.row({id, group, fmt_num(res.accuracy)});
      std::printf("[probe] %s acc %.3f\n", id.c_str(), res.accuracy);
    }
  }

  // -------------------------------------------------------------------------
  // Stage: landscape
  // -------------------------------------------------------------------------

  void landscape() {
    if (!cfg_.probe.enabled) return;
    auto table = read_csv(root_ / "probe" / "probe.csv");
    check_stamp(table, "probe/probe.csv");
    std::vector<std::string> ids, groups;
    std::vector<double> accs;
    for (std::size_t r = 1; r < table.rows.size(); ++r) {
      ids.push_back(table.rows[r][0]);
      groups.push_back(table.rows[r][1]);
      accs.push_back(std::stod(table.rows[r][2]));
    }
    std::vector<MatD> tables;
    for (const auto& id : ids)
      tables.push_back(
          neb::load(root_ / "probe" / ("table_" + id + ".neb")).cast<double>());
    MatD d = bhattacharyya_dissimilarity(tables);
    MatD coords = mds_embed(d, 2);
    CsvWriter csv(root_ / "landscape" / "landscape.csv", &stamp_);
    csv.row({"model", "group", "accuracy", "x", "y"});
    std::vector<int> group_ids;
    std::map<std::string, int> group_index;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      group_index.emplace(groups[i], static_cast<int>(group_index.size()));
      group_ids.push_back(group_index[groups[i]]);
      csv.row({ids[i], groups[i], fmt_num(accs[i]), fmt_num(coords(static_cast<Index>(i), 0)),
               fmt_num(coords(static_cast<Index>(i), 1))});
    }
    save_scatter_png(root_ / "landscape" / "landscape.png", coords, group_ids,
                     420, {{"config_hash", hash_}});
    CsvWriter dcsv(root_ / "landscape" / "dissimilarity.csv", &stamp_);
    for (Index i = 0; i < d.rows(); ++i) {
      std::vector<std::string> row;
      for (Index j = 0; j < d.cols(); ++j) row.push_back(fmt_num(d(i, j)));
      dcsv.row(row);
    }
  }

  // -------------------------------------------------------------------------
  // Stage: MI bounds
  // -------------------------------------------------------------------------

  void mi() {
    if (!cfg_.mi.enabled) return;
    CsvWriter csv(root_ / "mi" / "mi.csv", &stamp_);
    csv.row({"subject", "roi", "k", "batches", "value_bits", "ceiling_bits",
             "max_batch_bits"});
    for (const auto& roi : cfg_.tuning.cl_rois) {
      for (int s = 0; s < cfg_.cohort.subjects; ++s) {
        auto ds = load_dataset(subject_manifest(s));
        BackboneF model = load_backbone(model_path("cl", subject_name(s), roi));
        auto heads = load_heads(heads_path("cl", subject_name(s), roi));
        auto est = mi_lower_bound(model, heads, ds, roi, cfg_.mi.batch_size,
                                  cfg_.mi.batches,
                                  seed_combine(seed_tag(cfg_.seed, "mi"),
                                               static_cast<std::uint64_t>(s)));
        const double max_batch =
            *std::max_element(est.per_batch_bits.begin(), est.per_batch_bits.end());
        csv.row({subject_name(s), roi, std::to_string(est.k),
                 std::to_string(est.batches), fmt_num(est.value_bits),
                 fmt_num(est.ceiling_bits), fmt_num(max_batch)});
        std::printf("[mi] %s %s: %.3f bits (cap %.3f)\n", subject_name(s).c_str(),
                    roi.c_str(), est.value_bits, est.ceiling_bits);
      }
    }
  }

  // -------------------------------------------------------------------------
  // Stage: saliency
  // -------------------------------------------------------------------------

  void saliency() {
    if (!cfg_.saliency.enabled) return;
    auto ds = load_dataset(saliency_manifest());
    const Hemisphere side = hemisphere_from_string(cfg_.saliency.side);

    BackboneF frozen = load_backbone(pretrained_path());
    BackboneF tuned = load_backbone(pretrained_path());
    CLConfig c = cfg_.tuning.cl;
    c.seed = seed_tag(cfg_.tuning.cl.seed, "saliency");
    auto [heads, log] = cl_finetune(tuned, ds, "lat", c, cfg_.saliency.teacher_tap);
    tuned.provenance().config_hash = hash_;
    save_backbone(model_path("cl", "x00", "lat"), tuned);
    write_train_log("cl_x00_lat", log);

    const auto train = ds.train_indices();
    const auto test = ds.test_indices();
    auto frozen_probe = linear_probe(frozen, ds.stimuli, train, test, cfg_.probe.l2);
    auto tuned_probe = linear_probe(tuned, ds.stimuli, train, test, cfg_.probe.l2);

    const std::string conv_tap = cfg_.saliency.conv_tap.empty()
                                     ? frozen.last_conv_tap()
                                     : cfg_.saliency.conv_tap;
    const int n_probe = std::min<int>(cfg_.saliency.n_probe,
                                      static_cast<int>(test.size()));
    CsvWriter csv(root_ / "saliency" / "saliency.csv", &stamp_);
    csv.row({"image", "class", "p_frozen", "p_tuned", "frac_frozen",
             "frac_tuned"});
    int cl_wins = 0;
    for (int i = 0; i < n_probe; ++i) {
      const int img = test[static_cast<std::size_t>(i)];
      const int cls = ds.stimuli.labels[static_cast<std::size_t>(img)];
      auto sm_frozen = grad_cam(frozen, frozen_probe.probe, ds.stimuli, img, cls,
                                conv_tap);
      auto sm_tuned = grad_cam(tuned, tuned_probe.probe, ds.stimuli, img, cls,
                               conv_tap);
      const double f0 = half_mass_fraction(sm_frozen.grid, side);
      const double f1 = half_mass_fraction(sm_tuned.grid, side);
      if (f1 > f0) ++cl_wins;
      csv.row({ds.stimuli.image_ids[static_cast<std::size_t>(img)],
               std::to_string(cls), fmt_num(sm_frozen.probability),
               fmt_num(sm_tuned.probability), fmt_num(f0), fmt_num(f1)});
      if (i < 4) {
        save_salience_overlay_png(
            root_ / "saliency" / ("overlay_frozen_" + std::to_string(i) + ".png"),
            ds.stimuli, img, sm_frozen.overlay, {{"config_hash", hash_}});
        save_salience_overlay_png(
            root_ / "saliency" / ("overlay_tuned_" + std::to_string(i) + ".png"),
            ds.stimuli, img, sm_tuned.overlay, {{"config_hash", hash_}});
        neb::save(root_ / "saliency" / ("grid_tuned_" + std::to_string(i) + ".neb"),
                  sm_tuned.grid.cast<float>());
      }
    }
    std::printf("[saliency] tuned beats frozen on %d/%d probes\n", cl_wins,
                n_probe);
  }

  // -------------------------------------------------------------------------
  // Stage: report
  // -------------------------------------------------------------------------

  void report() {
    auto enc = read_csv(root_ / "encode" / "encode.csv");
    check_stamp(enc, "encode/encode.csv");
    // kind -> (subject, roi) -> rho_bar
    std::map<std::string, std::map<std::string, double>> rho;
    for (std::size_t r = 1; r < enc.rows.size(); ++r) {
      const auto& row = enc.rows[r];
      rho[row[0]][row[1] + "/" + row[2]] = std::stod(row[5]);
    }
    CsvWriter csv(root_ / "report" / "report.csv", &stamp_);
    csv.row({"subject", "roi", "ctrl_rho", "cl_rho", "reg_rho", "pct_cl_gt_ctrl",
             "pct_cl_gt_reg"});
    json sig;
    for (const auto& roi : cfg_.tuning.cl_rois) {
      std::vector<double> ctrl_list, cl_list;
      double sum_ctrl = 0, sum_cl = 0, sum_reg = 0, sum_p1 = 0, sum_p2 = 0;
      int n_reg = 0;
      for (int s = 0; s < cfg_.cohort.subjects; ++s) {
        const std::string key = subject_name(s) + "/" + roi;
        const double c0 = rho.at("control").at(key);
        const double c1 = rho.at("cl").at(key);
        VecD rho_ctrl = load_rho("control", subject_name(s), roi);
        VecD rho_cl = load_rho("cl", subject_name(s), roi);
        const double p1 = percent_improved(rho_cl, rho_ctrl);
        std::string reg_cell, p2_cell;
        if (rho.count("reg") && rho.at("reg").count(key)) {
          const double c2 = rho.at("reg").at(key);
          VecD rho_reg = load_rho("reg", subject_name(s), roi);
          const double p2 = percent_improved(rho_cl, rho_reg);
          reg_cell = fmt_num(c2);
          p2_cell = fmt_num(p2);
          sum_reg += c2;
          sum_p2 += p2;
          ++n_reg;
        }
        csv.row({subject_name(s), roi, fmt_num(c0), fmt_num(c1), reg_cell,
                 fmt_num(p1), p2_cell});
        ctrl_list.push_back(c0);
        cl_list.push_back(c1);
        sum_ctrl += c0;
        sum_cl += c1;
        sum_p1 += p1;
      }
      const double ns = cfg_.cohort.subjects;
      csv.row({"all", roi, fmt_num(sum_ctrl / ns), fmt_num(sum_cl / ns),
               n_reg ? fmt_num(sum_reg / n_reg) : std::string(),
               fmt_num(sum_p1 / ns),
               n_reg ? fmt_num(sum_p2 / n_reg) : std::string()});
      if (cfg_.cohort.subjects >= 2) {
        StatReport st = paired_ttest(cl_list, ctrl_list, TTail::one,
                                     static_cast<int>(cfg_.tuning.cl_rois.size()));
        sig[roi] = st.to_json();
      }
    }
    {
      std::ofstream os(root_ / "report" / "significance.json");
      json out = {{"config_hash", hash_}, {"tests", sig}};
      os << out.dump(2) << "\n";
    }
  }

  // -------------------------------------------------------------------------
  // Shared paths and helpers
  // -------------------------------------------------------------------------

  fs::path subject_manifest(int s) const {
    return root_ / "cohort" / subject_name(s) / "manifest.json";
  }
  fs::path external_manifest(int s) const {
    return root_ / "external_cohort" / external_name(s) / "manifest.json";
  }
  fs::path pretrain_manifest() const {
    return root_ / "pretrainset" / "manifest.json";
  }
  fs::path probeset_manifest() const {
    return root_ / "probeset" / "manifest.json";
  }
  fs::path saliency_manifest() const {
    return root_ / "saliency_cohort" / "x00" / "manifest.json";
  }
  fs::path pretrained_path() const { return root_ / "models" / "pretrained.ckpt"; }
  fs::path model_path(const std::string& kind, const std::string& subject,
                      const std::string& roi) const {
    return root_ / "models" / (kind + "_" + subject + "_" + roi + ".ckpt");
  }
  fs::path heads_path(const std::string& kind, const std::string& subject,
                      const std::string& roi) const {
    return root_ / "models" / (kind + "_" + subject + "_" + roi + ".heads.ckpt");
  }

  /// Selected (layer, alpha) for a ROI; per-subject entries take precedence.
  std::pair<std::string, double> selected_for(const std::string& roi,
                                              int subject) const {
    std::ifstream is(root_ / "cv" / "selected.json");
    if (!is) throw IoError("cv selections missing; run the cv stage first");
    json j;
    is >> j;
    require(j.at("config_hash") == hash_,
            "cv selections were produced by a different config");
    const auto& sel = j.at("selected");
    const std::string per = roi + "@" + subject_name(subject);
    const auto& entry = sel.contains(per) ? sel.at(per) : sel.at(roi);
    return {entry.at("layer").get<std::string>(),
            entry.at("alpha").get<double>()};
  }

 private:
  SubjectDataset make_subject(const CohortConfig& cohort, int s,
                              const std::string& stream_tag,
                              const std::string& id) {
    SyntheticSpec spec;
    spec.subject_id = id;
    spec.n_images = cohort.n_images;
    spec.image_size = cohort.image_size;
    spec.teacher_seed = cohort.teacher_seed;
    spec.subject_seed = seed_combine(seed_tag(cfg_.seed, stream_tag),
                                     static_cast<std::uint64_t>(s));
    spec.images = cohort.images;
    spec.rois = cohort.rois;
    if (static_cast<std::size_t>(s) < cohort.subject_noise_scale.size())
      for (auto& roi : spec.rois)
        roi.noise_std *= cohort.subject_noise_scale[static_cast<std::size_t>(s)];
    spec.teacher_config =
        BackboneConfig::desk_default(cohort.images.num_classes, cohort.image_size);
    auto ds = generate_synthetic_subject(spec);
    return split_dataset(ds, cohort.test_fraction,
                         seed_combine(seed_tag(cfg_.seed, stream_tag + "-split"),
                                      static_cast<std::uint64_t>(s)));
  }

  void encode_one(CsvWriter& csv, BackboneF& model, const SubjectDataset& ds,
                  const std::string& roi_name,
                  const std::pair<std::string, double>& sel,
                  const std::string& kind) {
    auto pipe = fit_encoding_pipeline(model, ds, roi_name, sel.first, cfg_.cv.d,
                                      sel.second);
    auto score = evaluate_pipeline(pipe, model, ds);
    MatF rho = score.rho.cast<float>();
    neb::save(rho_path(kind, ds.subject_id, roi_name), rho);
    csv.row({kind, ds.subject_id, roi_name, sel.first, fmt_num(sel.second),
             fmt_num(score.rho_bar)});
    std::printf("[encode] %s %s %s: rho_bar %.4f\n", kind.c_str(),
                ds.subject_id.c_str(), roi_name.c_str(), score.rho_bar);
  }

  fs::path rho_path(const std::string& kind, const std::string& subject,
                    const std::string& roi) const {
    return root_ / "encode" / ("rho_" + kind + "_" + subject + "_" + roi + ".neb");
  }

  VecD load_rho(const std::string& kind, const std::string& subject,
                const std::string& roi) const {
    MatF m = neb::load(rho_path(kind, subject, roi));
    return Eigen::Map<VecF>(m.data(), m.size()).cast<double>();
  }

  /// Catalog of every tuned/frozen model the probe stage evaluates.
  std::vector<std::tuple<std::string, std::string, fs::path>> model_catalog()
      const {
    std::vector<std::tuple<std::string, std::string, fs::path>> out;
    out.push_back({"control", "control", pretrained_path()});
    for (const auto& roi : cfg_.tuning.cl_rois)
      for (int s = 0; s < cfg_.cohort.subjects; ++s) {
        const auto p = model_path("cl", subject_name(s), roi);
        if (fs::exists(p))
          out.push_back({"cl_" + subject_name(s) + "_" + roi, "cl_" + roi, p});
      }
    for (const auto& roi : cfg_.tuning.reg_rois)
      for (int s = 0; s < cfg_.cohort.subjects; ++s) {
        const auto p = model_path("reg", subject_name(s), roi);
        if (fs::exists(p))
          out.push_back({"reg_" + subject_name(s) + "_" + roi, "reg_" + roi, p});
      }
    for (const auto& roi : cfg_.tuning.pooled_rois) {
      const auto p = model_path("pooled", "all", roi);
      if (fs::exists(p)) out.push_back({"pooled_all_" + roi, "pooled_" + roi, p});
    }
    return out;
  }

  std::vector<int> all_subject_indices() const {
    std::vector<int> v;
    for (int s = 0; s < cfg_.cohort.subjects; ++s) v.push_back(s);
    return v;
  }

  std::vector<std::pair<std::string, int>> roi_subject_tasks(
      const std::vector<std::string>& rois) const {
    std::vector<std::pair<std::string, int>> tasks;
    for (const auto& roi : rois)
      for (int s = 0; s < cfg_.cohort.subjects; ++s) tasks.push_back({roi, s});
    return tasks;
  }

  void write_train_log(const std::string& name, const TrainLog& log) {
    CsvWriter csv(root_ / "logs" / (name + ".csv"), &stamp_);
    csv.row({"epoch", "loss", "val_loss"});
    for (std::size_t e = 0; e < log.epoch_loss.size(); ++e)
      csv.row({std::to_string(e), fmt_num(log.epoch_loss[e]),
               e < log.val_loss.size() ? fmt_num(log.val_loss[e]) : std::string()});
  }

  static double offdiag_mean(const MatD& m) {
    double sum = 0;
    int count = 0;
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j)
        if (i != j) {
          sum += m(i, j);
          ++count;
        }
    return count ? sum / count : 0.0;
  }

  void check_stamp(const CsvTable& t, const std::string& what) const {
    require(t.has_stamp && t.stamp.config_hash == hash_,
            what + " was produced by a different config hash");
  }

  void write_or_check_config() {
    const fs::path cpath = root_ / "config.json";
    if (fs::exists(cpath)) {
      std::ifstream is(cpath);
      cjson j;
      is >> j;
      require(j.value("config_hash", std::string()) == hash_,
              "output directory already holds artifacts for a different config");
      return;
    }
    std::ofstream os(cpath);
    cjson j = cfg_.to_json();
    j["config_hash"] = hash_;
    os << j.dump(2) << "\n";
  }

  void write_error_manifest(const std::string& stage, const std::string& what) {
    std::ofstream os(root_ / "error.json");
    cjson j = {{"stage", stage}, {"error", what}, {"config_hash", hash_}};
    os << j.dump(2) << "\n";
  }

  ExperimentConfig cfg_;
  fs::path root_;
  std::string hash_;
  CsvStamp stamp_;
  int jobs_ = 1;

  std::vector<std::string> cv_layers(const BackboneF& model) const {
    if (!cfg_.cv.layers.empty()) return cfg_.cv.layers;
    std::vector<std::string> all;
    for (const auto& t : model.taps()) all.push_back(t.name);
    return all;
  }
};

}  // namespace neuroenc
