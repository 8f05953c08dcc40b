// Command-line driver: dataset generation, the two training stages,
// evaluation, and visualization. Exit codes: 0 success, 1 runtime failure,
// 2 usage or contract error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "selfsup/training.hpp"

namespace fs = std::filesystem;
using namespace selfsup;

namespace {

// Distinct colors per class id for label visualization.
const uint8_t kPalette[8][3] = {{230, 60, 50},   {60, 190, 70},  {55, 90, 220},  {235, 200, 40},
                                {175, 70, 200},  {70, 200, 200}, {240, 130, 40}, {150, 150, 150}};

std::array<uint8_t, 3> depth_colormap(double d) {
  // log-depth mapped through a blue -> green -> red ramp over [0.5, 25]
  const double t = std::clamp((std::log(d) - std::log(0.5)) / (std::log(25.0) - std::log(0.5)),
                              0.0, 1.0);
  const auto ramp = [](double x) { return uint8_t(std::lround(255 * std::clamp(x, 0.0, 1.0))); };
  return {ramp(2 * t - 0.5), ramp(1.5 - std::fabs(2 * t - 1) * 1.5), ramp(1.0 - 2 * t)};
}

struct TrainFlags {
  std::string config, data, ckpt_in, ckpt_out, log;
  int steps = -1;
  int batch = -1;
  int64_t seed = -1;
  double lr = -1;
  bool no_augment = false;
};

void add_train_flags(CLI::App* cmd, TrainFlags* f) {
  cmd->add_option("--config", f->config, "JSON config file; flags override its fields");
  cmd->add_option("--data", f->data, "dataset directory");
  cmd->add_option("--ckpt-in", f->ckpt_in, "checkpoint to initialize from");
  cmd->add_option("--ckpt-out", f->ckpt_out, "checkpoint output path");
  cmd->add_option("--log", f->log, "training log path (train_log.jsonl)");
  cmd->add_option("--steps", f->steps, "optimizer steps");
  cmd->add_option("--batch", f->batch, "snippets or frames per step");
  cmd->add_option("--seed", f->seed, "RNG seed");
  cmd->add_option("--lr", f->lr, "learning rate");
  cmd->add_flag("--no-augment", f->no_augment, "disable scale/crop augmentation");
}

TrainConfig resolve_config(const TrainFlags& f, const std::string& stage) {
  TrainConfig cfg;
  if (!f.config.empty()) {
    cfg = load_train_config(f.config);
  } else {
    cfg.adam.lr = stage == "selfsup" ? 2e-4 : 1e-3;
  }
  cfg.stage = stage;
  if (!f.data.empty()) cfg.data_dir = f.data;
  if (!f.ckpt_in.empty()) cfg.ckpt_in = f.ckpt_in;
  if (!f.ckpt_out.empty()) cfg.ckpt_out = f.ckpt_out;
  if (!f.log.empty()) cfg.log_path = f.log;
  if (f.steps >= 0) cfg.steps = f.steps;
  if (f.batch >= 1) cfg.batch = f.batch;
  if (f.seed >= 0) cfg.seed = uint64_t(f.seed);
  if (f.lr >= 0) cfg.adam.lr = f.lr;
  if (f.no_augment) cfg.augment = false;
  check(!cfg.data_dir.empty(), "a dataset is required (--data or config)");
  return cfg;
}

int cmd_gen_data(uint64_t seed, int frames, const std::string& out, int classes, bool dynamic,
                 int label_stride, bool force) {
  check(frames >= 3, "--frames must be at least 3 (snippets need 3 frames)");
  if (fs::exists(out) && !fs::is_empty(out) && !force)
    throw contract_error("output directory exists and is not empty; pass --force to overwrite");
  GenOptions opt;
  opt.num_classes = classes;
  opt.dynamic = dynamic;
  auto seq = generate_sequence(seed, frames, opt);
  write_dataset(out, seq, label_stride);
  std::cout << "wrote " << seq.frames.size() << " frames (" << opt.width << "x" << opt.height
            << ", " << classes << " classes" << (dynamic ? ", dynamic" : "") << ", labels every "
            << label_stride << ") to " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data, const std::string& task,
             const std::string& scale_mode, const std::string& out_dir) {
  const auto ck = load_checkpoint(ckpt_path);
  if (task == "odom")
    check(ck.stage == "selfsup", "odometry evaluation needs a self-supervised checkpoint "
                                 "(the supervised stage leaves ego-motion untrained)");
  auto seq = read_dataset(data);
  std::vector<int> eval_frames;
  for (int i = 0; i < int(seq.frames.size()); ++i)
    if (seq.frames[i].has_depth && seq.frames[i].has_labels) eval_frames.push_back(i);
  check(!eval_frames.empty(), "dataset has no ground truth to evaluate against");

  nlohmann::json rep;
  std::string out_name;
  if (task == "depth") {
    DepthNet net(ck.arch);
    load_into_nets(ck, &net, nullptr, nullptr);
    const auto mode = scale_mode == "none" ? ScaleMode::kNone : ScaleMode::kMedian;
    const auto m = evaluate_depth(net, seq, eval_frames, mode);
    rep = {{"abs_rel", m.abs_rel}, {"sq_rel", m.sq_rel},   {"rmse", m.rmse},
           {"rmse_log", m.rmse_log}, {"delta1", m.delta1}, {"delta2", m.delta2},
           {"delta3", m.delta3},   {"scale", m.scale},     {"scale_mode", scale_mode}};
    out_name = "eval_depth.json";
    std::cout << "abs_rel   sq_rel    rmse      rmse_log  d<1.25    scale\n";
    std::printf("%-9.4f %-9.4f %-9.4f %-9.4f %-9.4f %-9.4f\n", m.abs_rel, m.sq_rel, m.rmse,
                m.rmse_log, m.delta1, m.scale);
  } else if (task == "seg") {
    SegNet net(ck.arch);
    load_into_nets(ck, nullptr, &net, nullptr);
    const auto m = evaluate_seg(net, seq, eval_frames);
    rep["mean_iou"] = m.mean_iou;
    rep["class_iou"] = m.class_iou;
    out_name = "eval_seg.json";
    std::cout << "class ious:";
    for (size_t c = 0; c < m.class_iou.size(); ++c)
      if (m.class_present[c])
        std::printf(" %zu:%.3f", c, m.class_iou[c]);
      else
        std::printf(" %zu:n/a", c);
    std::printf("\nmean IoU %.4f\n", m.mean_iou);
  } else if (task == "odom") {
    PoseNet net(ck.arch);
    load_into_nets(ck, nullptr, nullptr, &net);
    const auto snippets = make_snippets(seq, 1, 1);
    const double e = evaluate_odom(net, seq, snippets);
    rep = {{"ate", e}, {"snippets", snippets.size()}};
    out_name = "eval_odom.json";
    std::printf("ATE %.6f over %zu snippets\n", e, snippets.size());
  } else {
    throw contract_error("--task must be depth, seg, or odom");
  }
  fs::create_directories(out_dir);
  std::ofstream((fs::path(out_dir) / out_name)) << rep.dump(2) << "\n";
  return 0;
}

int cmd_render(const std::string& ckpt_path, const std::string& data, int frame,
               const std::string& out_prefix) {
  const auto ck = load_checkpoint(ckpt_path);
  auto seq = read_dataset(data);
  check(frame >= 0 && frame < int(seq.frames.size()), "--frame index out of range");
  const auto& fr = seq.frames[frame];
  check(fr.has_depth && fr.has_labels, "render needs a frame with ground truth");
  const int w = seq.intrinsics.width, h = seq.intrinsics.height, hw = w * h;

  DepthNet depth_net(ck.arch);
  SegNet seg_net(ck.arch);
  load_into_nets(ck, &depth_net, &seg_net, nullptr);
  Tape tape;
  auto pred_depth = depth_net.forward(tape, fr.image).depth[0];
  auto pred_probs = seg_net.forward(tape, fr.image).probs[0];

  // three panels side by side: input | ground truth | prediction
  auto panel = [&](const std::function<std::array<uint8_t, 3>(int, int)>& mid,
                   const std::function<std::array<uint8_t, 3>(int, int)>& right) {
    ImageU8 img;
    img.width = 3 * w;
    img.height = h;
    img.channels = 3;
    img.pixels.resize(size_t(img.width) * h * 3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < 3 * w; ++x) {
        std::array<uint8_t, 3> rgb;
        if (x < w) {
          for (int c = 0; c < 3; ++c)
            rgb[c] = uint8_t(std::lround(fr.image->data[c * hw + y * w + x] * 255));
        } else if (x < 2 * w) {
          rgb = mid(x - w, y);
        } else {
          rgb = right(x - 2 * w, y);
        }
        for (int c = 0; c < 3; ++c) img.pixels[(size_t(y) * 3 * w + x) * 3 + c] = rgb[c];
      }
    return img;
  };

  write_png(out_prefix + "_depth.png",
            panel([&](int x, int y) { return depth_colormap(fr.depth[y * w + x]); },
                  [&](int x, int y) { return depth_colormap(pred_depth->data[y * w + x]); }));

  auto label_color = [&](int id) {
    return std::array<uint8_t, 3>{kPalette[id % 8][0], kPalette[id % 8][1], kPalette[id % 8][2]};
  };
  write_png(out_prefix + "_seg.png",
            panel([&](int x, int y) { return label_color(fr.labels[y * w + x]); },
                  [&](int x, int y) {
                    int best = 0;
                    for (int c = 1; c < ck.arch.num_classes; ++c)
                      if (pred_probs->data[c * hw + y * w + x] >
                          pred_probs->data[best * hw + y * w + x])
                        best = c;
                    return label_color(best);
                  }));
  std::cout << "wrote " << out_prefix << "_depth.png and " << out_prefix << "_seg.png\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bootstrapped self-supervised depth, segmentation, and ego-motion on synthetic video"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  uint64_t g_seed = 0;
  int g_frames = 120, g_classes = 6, g_label_stride = 1;
  bool g_dynamic = false, g_force = false;
  std::string g_out;
  gen->add_option("--seed", g_seed, "scene/trajectory seed");
  gen->add_option("--frames", g_frames, "number of frames");
  gen->add_option("--out", g_out, "output directory")->required();
  gen->add_option("--classes", g_classes, "semantic class count");
  gen->add_option("--label-stride", g_label_stride, "keep ground truth every Nth frame");
  gen->add_flag("--dynamic", g_dynamic, "include one moving object");
  gen->add_flag("--force", g_force, "overwrite an existing non-empty directory");

  TrainFlags sup_flags, self_flags;
  auto* sup = app.add_subcommand("train-sup", "supervised bootstrap stage");
  add_train_flags(sup, &sup_flags);
  auto* self = app.add_subcommand("train-selfsup", "self-supervised refinement stage");
  add_train_flags(self, &self_flags);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string e_ckpt, e_data, e_task = "depth", e_scale = "median", e_out = ".";
  eval->add_option("--ckpt", e_ckpt, "checkpoint path")->required();
  eval->add_option("--data", e_data, "dataset directory")->required();
  eval->add_option("--task", e_task, "depth | seg | odom");
  eval->add_option("--scale-mode", e_scale, "median | none (depth task)");
  eval->add_option("--out-dir", e_out, "directory for the JSON report");

  auto* render = app.add_subcommand("render", "write comparison panels for one frame");
  std::string r_ckpt, r_data, r_out = "render";
  int r_frame = 0;
  render->add_option("--ckpt", r_ckpt, "checkpoint path")->required();
  render->add_option("--data", r_data, "dataset directory")->required();
  render->add_option("--frame", r_frame, "frame index");
  render->add_option("--out", r_out, "output file prefix");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(g_seed, g_frames, g_out, g_classes, g_dynamic, g_label_stride, g_force);
    if (sup->parsed()) {
      auto cfg = resolve_config(sup_flags, "supervised");
      auto res = train_supervised(cfg);
      std::cout << "supervised stage done: " << cfg.steps << " steps, loss " << res.first_loss
                << " -> " << res.last_loss << "\n";
      return 0;
    }
    if (self->parsed()) {
      auto cfg = resolve_config(self_flags, "selfsup");
      if (cfg.ckpt_in.empty()) {
        std::cerr << "self-supervised stage requires a supervised checkpoint\n";
        return 2;
      }
      auto res = train_selfsup(cfg, load_checkpoint(cfg.ckpt_in));
      std::cout << "selfsup stage done: " << cfg.steps << " steps, loss " << res.first_loss
                << " -> " << res.last_loss << "\n";
      return 0;
    }
    if (eval->parsed()) return cmd_eval(e_ckpt, e_data, e_task, e_scale, e_out);
    if (render->parsed()) return cmd_render(r_ckpt, r_data, r_frame, r_out);
  } catch (const contract_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
