#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attnfd/netpbm.hpp"
#include "attnfd/train.hpp"

namespace fs = std::filesystem;
using namespace attnfd;

namespace {

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

std::string fmt(double v) {
  return std::isnan(v) ? std::string("nan") : detail::format_real(real(v));
}

std::string metrics_text(const EvalResult& ev) {
  std::string out;
  out += "val_miou = " + fmt(ev.miou) + "\n";
  out += "val_acc = " + fmt(ev.acc) + "\n";
  for (std::size_t k = 0; k < ev.per_class.per_class.size(); ++k) {
    const bool def = ev.per_class.defined[k] != 0;
    out += "per_class_iou." + std::to_string(k) + " = " +
           (def ? fmt(double(ev.per_class.per_class[k])) : std::string("nan")) + "\n";
  }
  return out;
}

std::string log_text(const std::vector<EpochRow>& rows) {
  std::string out = epoch_log_header() + "\n";
  for (const EpochRow& r : rows) out += format_epoch_row(r) + "\n";
  return out;
}

struct CommonArgs {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
};

RunConfig effective_config(const CommonArgs& a) {
  RunConfig cfg;
  if (!a.config_path.empty()) cfg = load_config_file(a.config_path);
  if (a.seed_set) cfg.seed = a.seed;
  cfg.validate();
  return cfg;
}

std::string index_name(const char* stem, int i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%05d.%s", stem, i, ext);
  return buf;
}

void cmd_gen_data(const CommonArgs& a) {
  RunConfig cfg = effective_config(a);
  const fs::path out(a.out_dir);
  fs::create_directories(out / "images");
  fs::create_directories(out / "labels");
  const ShapesSpec spec = cfg.shapes_spec();
  std::vector<std::pair<std::string, std::string>> train_rows, val_rows;
  const int total = cfg.train_count + cfg.val_count;
  for (int i = 0; i < total; ++i) {
    const std::string img = "images/" + index_name("img", i, "ppm");
    const std::string lab = "labels/" + index_name("lab", i, "pgm");
    Sample s = generate(spec, uint64_t(i));
    save_sample(s, (out / img).string(), (out / lab).string());
    (i < cfg.train_count ? train_rows : val_rows).emplace_back(img, lab);
  }
  save_manifest((out / "train.txt").string(), train_rows);
  save_manifest((out / "val.txt").string(), val_rows);
  write_text_file(out / "config.txt", config_to_text(cfg));
  std::cout << "wrote " << train_rows.size() << " train + " << val_rows.size()
            << " val samples to " << out.string() << "\n";
}

std::pair<std::vector<Sample>, std::vector<Sample>> load_split(const RunConfig& cfg) {
  if (cfg.data_dir.empty())
    throw ConfigError("data.dir is not set; point it at a gen-data output directory");
  const fs::path d(cfg.data_dir);
  return {load_dataset((d / "train.txt").string()), load_dataset((d / "val.txt").string())};
}

void write_run_outputs(const fs::path& out, const RunConfig& cfg, const TrainResult& res) {
  fs::create_directories(out);
  write_text_file(out / "config.txt", config_to_text(cfg));
  write_text_file(out / "log.tsv", log_text(res.rows));
  save_checkpoint((out / "checkpoint.afd").string(), res.checkpoint);
  write_text_file(out / "metrics.txt", metrics_text(res.final_eval));
}

RowCallback row_printer() {
  return [](const EpochRow& r) {
    std::cout << format_epoch_row(r) << "\n";
    std::cout.flush();
  };
}

void cmd_train_teacher(const CommonArgs& a) {
  RunConfig cfg = effective_config(a);
  auto [train_data, val_data] = load_split(cfg);
  std::cout << epoch_log_header() << "\n";
  TrainResult res = train_teacher(cfg, train_data, val_data, row_printer());
  write_run_outputs(fs::path(a.out_dir), cfg, res);
  std::cout << "val_miou = " << fmt(res.final_eval.miou) << "\n";
  std::cout << "val_acc = " << fmt(res.final_eval.acc) << "\n";
}

void cmd_distill(const CommonArgs& a, const std::string& teacher_path) {
  RunConfig cfg = effective_config(a);
  Checkpoint teacher_ckpt = load_checkpoint(teacher_path);
  auto [train_data, val_data] = load_split(cfg);
  std::cout << epoch_log_header() << "\n";
  TrainResult res =
      distill_student(cfg, teacher_ckpt, train_data, val_data, nullptr, row_printer());
  write_run_outputs(fs::path(a.out_dir), cfg, res);
  std::cout << "val_miou = " << fmt(res.final_eval.miou) << "\n";
  std::cout << "val_acc = " << fmt(res.final_eval.acc) << "\n";
}

void cmd_eval(const std::string& ckpt_path, const std::string& manifest_path,
              const std::string& out_dir) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  std::vector<Sample> data = load_dataset(manifest_path);
  EvalResult ev;
  if (ck.kind == Checkpoint::Kind::teacher) {
    TeacherModel m = load_teacher(ck);
    ev = evaluate(m.net, data, m.cfg.batch_size);
  } else {
    StudentModel m = load_student(ck);
    ev = evaluate(m.net, data, m.cfg.batch_size);
  }
  std::cout << metrics_text(ev);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text_file(fs::path(out_dir) / "metrics.txt", metrics_text(ev));
  }
}

std::vector<real> channel_mean(const Tensor& f) {
  const int c = f.extent(1), h = f.extent(2), w = f.extent(3);
  std::vector<real> m(std::size_t(h) * w, 0);
  for (int ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < int64_t(h) * w; ++i)
      m[std::size_t(i)] += f[int64_t(ch) * h * w + i];
  for (real& v : m) v /= real(c);
  return m;
}

void write_heatmap(const fs::path& path, const std::vector<real>& map, int h, int w) {
  real lo = map[0], hi = map[0];
  for (real v : map) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  ByteImage img;
  img.w = w;
  img.h = h;
  img.v.assign(map.size(), 128);
  if (hi == lo) {
    std::cerr << "warning: " << path.filename().string()
              << ": constant map, writing mid-gray\n";
  } else {
    for (std::size_t i = 0; i < map.size(); ++i)
      img.v[i] = uint8_t(std::lround(double((map[i] - lo) / (hi - lo)) * 255.0));
  }
  save_pgm(path.string(), img);
}

void viz_one_tap(const fs::path& out, const char* tap, const Var& feat,
                 const CbamParams& cbam) {
  CbamOut o = cbam_refine(feat, bind_cbam_const(cbam));
  const Tensor& fv = feat.value();
  const int h = fv.extent(2), w = fv.extent(3);
  write_heatmap(out / (std::string(tap) + "_raw.pgm"), channel_mean(fv), h, w);
  write_heatmap(out / (std::string(tap) + "_mc_weighted.pgm"),
                channel_mean(o.intermediate.value()), h, w);
  write_heatmap(out / (std::string(tap) + "_refined.pgm"), channel_mean(o.refined.value()), h,
                w);
  const Tensor& ms = o.ms.value();
  std::vector<real> ms_map(ms.data(), ms.data() + ms.size());
  write_heatmap(out / (std::string(tap) + "_ms.pgm"), ms_map, ms.extent(2), ms.extent(3));
}

void cmd_viz_attn(const std::string& ckpt_path, const std::string& image_path,
                  const std::string& out_dir) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  Tensor img = load_ppm(image_path);
  Tensor batch({1, img.extent(0), img.extent(1), img.extent(2)});
  std::copy(img.data(), img.data() + img.size(), batch.data());
  const fs::path out(out_dir);
  fs::create_directories(out);
  if (ck.kind == Checkpoint::Kind::teacher) {
    TeacherModel m = load_teacher(ck);
    TapBundle tb = forward_with_taps(m.net, nullptr, Var::constant(std::move(batch)));
    const TapId all_taps[3] = {TapId::B, TapId::E, TapId::D};
    for (int i = 0; i < 3; ++i)
      viz_one_tap(out, tap_name(all_taps[i]), tap_feature(tb, all_taps[i]),
                  m.cbams[std::size_t(i)]);
  } else {
    StudentModel m = load_student(ck);
    if (m.taps.count() == 0)
      throw ConfigError("checkpoint has no attention blocks (method is not attnfd)");
    TapBundle tb = forward_with_taps(m.net, nullptr, Var::constant(std::move(batch)));
    for (TapEntry& e : m.taps.taps) {
      Var aligned = align_student_feature(tap_feature(tb, e.id), e, nullptr);
      viz_one_tap(out, tap_name(e.id), aligned, e.student_cbam);
    }
  }
  std::cout << "wrote heatmaps to " << out.string() << "\n";
}

void add_common(CLI::App* sub, CommonArgs& a, bool out_required) {
  sub->add_option("--config", a.config_path, "key=value config file");
  sub->add_option("--seed", a.seed, "seed override")->each([&a](const std::string&) {
    a.seed_set = true;
  });
  auto* out = sub->add_option("--out", a.out_dir, "output directory");
  if (out_required) out->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention-guided feature distillation on synthetic shapes"};
  app.require_subcommand(1);

  CommonArgs gen_args, teach_args, distill_args;
  std::string teacher_path, ckpt_path, manifest_path, eval_out, viz_image, viz_out;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, gen_args, true);

  CLI::App* teach = app.add_subcommand("train-teacher", "train and calibrate the teacher");
  add_common(teach, teach_args, true);

  CLI::App* dist = app.add_subcommand("distill", "train a student against a frozen teacher");
  add_common(dist, distill_args, true);
  dist->add_option("--teacher", teacher_path, "teacher checkpoint")->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  eval->add_option("--manifest", manifest_path, "dataset manifest")->required();
  eval->add_option("--out", eval_out, "optional output directory");

  CLI::App* viz = app.add_subcommand("viz-attn", "write attention heatmaps for one image");
  viz->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  viz->add_option("--image", viz_image, "input PPM image")->required();
  viz->add_option("--out", viz_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 64;
  }

  try {
    if (gen->parsed()) cmd_gen_data(gen_args);
    if (teach->parsed()) cmd_train_teacher(teach_args);
    if (dist->parsed()) cmd_distill(distill_args, teacher_path);
    if (eval->parsed()) cmd_eval(ckpt_path, manifest_path, eval_out);
    if (viz->parsed()) cmd_viz_attn(ckpt_path, viz_image, viz_out);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return 3;
  } catch (const ParseError& e) {
    std::cerr << "error: parse: " << e.what() << "\n";
    return 4;
  } catch (const ConsistencyError& e) {
    std::cerr << "error: consistency: " << e.what() << "\n";
    return 5;
  } catch (const LabelError& e) {
    std::cerr << "error: consistency: " << e.what() << "\n";
    return 5;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric: " << e.what() << "\n";
    return 6;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 70;
  }
  return 0;
}
