#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>

#include <pthread.h>

#include "CLI11.hpp"
#include "config_format.hpp"
#include "headsplat/errors.hpp"
#include "headsplat/harness.hpp"
#include "headsplat/serve.hpp"

namespace hs = headsplat;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void log(const std::string& msg) { std::cerr << msg << '\n'; }

// Options every verb accepts.
struct Common {
  std::string report;
  int threads = 0;

  hs::RasterConfig raster() const {
    hs::RasterConfig r;
    r.threads = threads;
    return r;
  }
  hs::AnimationConfig animation() const {
    hs::AnimationConfig a;
    a.threads = threads;
    return a;
  }
};

CLI::App* verb(CLI::App& parent, const std::string& name, const std::string& description, Common& common) {
  auto* app = parent.add_subcommand(name, description);
  app->fallthrough();
  app->add_option("--report", common.report, "Where to write the JSON report");
  app->add_option("--threads", common.threads, "Worker threads, 0 = all cores")->check(CLI::NonNegativeNumber);
  return app;
}

void write_report(const Common& common, const fs::path& fallback, json report) {
  const fs::path path = common.report.empty() ? fallback : fs::path(common.report);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << report.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write report: " + path.string());
  log("report: " + path.string());
}

fs::path beside(const std::string& out, const std::string& suffix) { return fs::path(out + suffix); }

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// Accepts bare parameter JSON or a dataset sidecar ({"params": {...}}).
hs::FlameParams read_params(const fs::path& path, const hs::HeadTemplate& tmpl) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw hs::FormatError(path.string() + ": " + e.what());
  }
  auto p = hs::params_from_json(j.contains("params") ? j.at("params") : j);
  p.validate(tmpl);
  return p;
}

hs::CanonicalAvatar load_posable(const std::string& avatar, const std::string& residuals, const hs::HeadTemplate& tmpl) {
  auto a = hs::load_avatar(avatar);
  hs::check_compatible(a, tmpl);
  if (!residuals.empty()) a = hs::apply_residuals(a, hs::load_residuals(residuals));
  return a;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::size_t> conditioning_indices(const hs::SubjectDataset& d, std::size_t s, std::uint64_t seed) {
  if (s == 0 || d.size() < 2 * s) {
    throw std::invalid_argument("dataset has " + std::to_string(d.size()) + " frames, need at least " +
                                std::to_string(2 * std::max<std::size_t>(s, 1)));
  }
  return hs::few_to_many_split(d.size(), s, d.size() - s, seed).conditioning;
}

void add_template_gen(CLI::App& root) {
  auto* group = root.add_subcommand("template", "Head template files");
  group->fallthrough();
  group->require_subcommand(1);
  struct Opts {
    Common common;
    std::uint64_t seed = 0;
    int vertices = 2000;
    int identity = 8;
    int expression = 10;
    int bones = 4;
    double corrective = 0.0;
    std::string out;
  };
  auto o = std::make_shared<Opts>();
  auto* app = verb(*group, "gen", "Generate a synthetic head template", o->common);
  app->add_option("--seed", o->seed);
  app->add_option("--vertices", o->vertices)->check(CLI::Range(12, 1000000));
  app->add_option("--identity", o->identity)->check(CLI::NonNegativeNumber);
  app->add_option("--expression", o->expression)->check(CLI::NonNegativeNumber);
  app->add_option("--bones", o->bones)->check(CLI::Range(1, 64));
  app->add_option("--corrective", o->corrective, "Amplitude of pose-corrective blendshapes, meters");
  app->add_option("--out", o->out, "Output .ght file")->required();
  app->callback([o] {
    hs::SyntheticTemplateOptions t;
    t.corrective_amplitude = o->corrective;
    const auto tmpl = hs::generate_synthetic_template(o->seed, o->vertices, o->identity, o->expression, o->bones, t);
    hs::save_template(o->out, tmpl);
    log("template: " + std::to_string(tmpl.num_vertices()) + " vertices, " + std::to_string(tmpl.faces.size()) +
        " faces -> " + o->out);
    write_report(o->common, beside(o->out, ".report.json"),
                 {{"command", "template gen"},
                  {"out", o->out},
                  {"vertices", tmpl.num_vertices()},
                  {"faces", tmpl.faces.size()},
                  {"identity", tmpl.num_identity()},
                  {"expression", tmpl.num_expression()},
                  {"bones", tmpl.num_bones()},
                  {"template_crc", tmpl.crc()}});
  });
}

void add_avatar(CLI::App& root) {
  auto* group = root.add_subcommand("avatar", "Canonical avatars");
  group->fallthrough();
  group->require_subcommand(1);
  {
    struct Opts {
      Common common;
      std::string tmpl, out;
      std::size_t count = 20000;
      std::uint64_t seed = 0;
    };
    auto o = std::make_shared<Opts>();
    auto* app = verb(*group, "upsample", "Sample Gaussian anchors on a template surface", o->common);
    app->add_option("--template", o->tmpl)->required()->check(CLI::ExistingFile);
    app->add_option("--count", o->count, "Number of Gaussians")->check(CLI::PositiveNumber);
    app->add_option("--seed", o->seed);
    app->add_option("--out", o->out, "Output .gha file")->required();
    app->callback([o] {
      const auto tmpl = hs::load_template(o->tmpl);
      const auto avatar = hs::init_avatar(hs::upsample_anchors(tmpl, o->count, o->seed));
      hs::save_avatar(o->out, avatar);
      log("avatar: " + std::to_string(avatar.size()) + " Gaussians -> " + o->out);
      write_report(o->common, beside(o->out, ".report.json"),
                   {{"command", "avatar upsample"},
                    {"out", o->out},
                    {"gaussians", avatar.size()},
                    {"template_crc", avatar.template_crc}});
    });
  }
  {
    struct Opts {
      Common common;
      std::string avatar, tmpl, dataset, out, mode = "fitted";
      std::size_t conditioning = 4;
      std::uint64_t seed = 0;
    };
    auto o = std::make_shared<Opts>();
    auto* app = verb(*group, "init", "Initialize avatar colors from conditioning frames", o->common);
    app->add_option("--avatar", o->avatar)->required()->check(CLI::ExistingFile);
    app->add_option("--template", o->tmpl)->required()->check(CLI::ExistingFile);
    app->add_option("--dataset", o->dataset, "Dataset directory (fitted mode)");
    app->add_option("--conditioning", o->conditioning, "Number of conditioning frames");
    app->add_option("--seed", o->seed, "Split seed, and color seed in random mode");
    app->add_option("--mode", o->mode)->check(CLI::IsMember({"fitted", "random"}));
    app->add_option("--out", o->out, "Output .gha file")->required();
    app->callback([o] {
      const auto tmpl = hs::load_template(o->tmpl);
      const auto avatar = load_posable(o->avatar, "", tmpl);
      json report{{"command", "avatar init"}, {"out", o->out}, {"mode", o->mode}};
      hs::CanonicalAvatar result;
      if (o->mode == "random") {
        result = hs::random_initialization(avatar, o->seed);
      } else {
        if (o->dataset.empty()) throw CLI::ValidationError("--dataset", "required in fitted mode");
        const auto d = hs::SubjectDataset::load(o->dataset);
        const auto idx = conditioning_indices(d, o->conditioning, o->seed);
        bool fitted = false;
        const auto frames = hs::training_frames(d, avatar, tmpl, idx, {}, &fitted);
        result = hs::fitted_initialization(avatar, tmpl, frames, o->common.raster(), o->common.animation());
        report["conditioning"] = idx;
        report["fitted_params"] = fitted;
      }
      hs::save_avatar(o->out, result);
      log("avatar init (" + o->mode + ") -> " + o->out);
      write_report(o->common, beside(o->out, ".report.json"), report);
    });
  }
}

void add_dataset(CLI::App& root) {
  auto* group = root.add_subcommand("dataset", "Synthetic datasets");
  group->fallthrough();
  group->require_subcommand(1);
  struct Opts {
    Common common;
    std::string tmpl, out;
    std::uint64_t seed = 0;
    int frames = 12, width = 128, height = 128;
    std::size_t gaussians = 20000;
  };
  auto o = std::make_shared<Opts>();
  auto* app = verb(*group, "synth", "Render a synthetic subject along a smooth trajectory", o->common);
  app->add_option("--template", o->tmpl)->required()->check(CLI::ExistingFile);
  app->add_option("--seed", o->seed);
  app->add_option("--frames", o->frames)->check(CLI::PositiveNumber);
  app->add_option("--width", o->width)->check(CLI::Range(1, 8192));
  app->add_option("--height", o->height)->check(CLI::Range(1, 8192));
  app->add_option("--gaussians", o->gaussians)->check(CLI::PositiveNumber);
  app->add_option("--out", o->out, "Output directory")->required();
  app->callback([o] {
    const auto tmpl = hs::load_template(o->tmpl);
    hs::SyntheticSubjectOptions s;
    s.gaussians = o->gaussians;
    s.raster = o->common.raster();
    const auto t0 = std::chrono::steady_clock::now();
    const auto d = hs::make_synthetic_subject(tmpl, o->seed, o->frames, hs::Camera::normalized(o->width, o->height),
                                              o->out, s);
    log("dataset: " + std::to_string(d.size()) + " frames -> " + o->out);
    write_report(o->common, fs::path(o->out) / "synth_report.json",
                 {{"command", "dataset synth"},
                  {"out", o->out},
                  {"frames", d.size()},
                  {"gaussians", o->gaussians},
                  {"size", {o->width, o->height}},
                  {"template_crc", d.template_crc},
                  {"wall_time_s", seconds_since(t0)}});
  });
}

void add_fit(CLI::App& root) {
  struct Opts {
    Common common;
    std::string avatar, tmpl, residuals, dataset, image, init, truth, out;
    int frame = -1, steps = 300;
    double lr = 0.01;
  };
  auto o = std::make_shared<Opts>();
  auto* app = verb(root, "fit", "Estimate expression, articulation and head pose for one image", o->common);
  app->add_option("--avatar", o->avatar)->required()->check(CLI::ExistingFile);
  app->add_option("--template", o->tmpl)->required()->check(CLI::ExistingFile);
  app->add_option("--residuals", o->residuals, "Optional .ghr residuals applied to the avatar");
  app->add_option("--dataset", o->dataset, "Dataset directory; use with --frame");
  app->add_option("--frame", o->frame, "Frame index in --dataset");
  app->add_option("--image", o->image, "PNG target, viewed with the normalized camera");
  app->add_option("--init", o->init, "Initial parameters JSON (default: rest pose in view)");
  app->add_option("--ground-truth", o->truth, "Parameters JSON to score against");
  app->add_option("--steps", o->steps)->check(CLI::NonNegativeNumber);
  app->add_option("--lr", o->lr)->check(CLI::PositiveNumber);
  app->add_option("--out", o->out, "Output parameters JSON")->required();
  app->callback([o] {
    const auto tmpl = hs::load_template(o->tmpl);
    const auto avatar = load_posable(o->avatar, o->residuals, tmpl);
    hs::Image target;
    hs::Camera cam;
    hs::FitFlameOptions f;
    f.steps = o->steps;
    f.lr = o->lr;
    f.raster = o->common.raster();
    f.animation = o->common.animation();
    if (!o->dataset.empty()) {
      const auto d = hs::SubjectDataset::load(o->dataset);
      if (o->frame < 0 || static_cast<std::size_t>(o->frame) >= d.size()) {
        throw CLI::ValidationError("--frame", "out of range for the dataset");
      }
      target = d.image(o->frame);
      cam = d.camera(d.frames[o->frame].camera_id);
      if (o->truth.empty()) f.ground_truth = d.params(o->frame);
    } else if (!o->image.empty()) {
      target = hs::read_png(o->image).rgb;
      cam = hs::Camera::normalized(target.width, target.height);
    } else {
      throw CLI::ValidationError("fit", "give --dataset with --frame, or --image");
    }
    if (!o->truth.empty()) f.ground_truth = read_params(o->truth, tmpl);
    const auto init = o->init.empty() ? hs::viewing_params(tmpl) : read_params(o->init, tmpl);
    const auto fit = hs::fit_flame(avatar, tmpl, target, cam, init, f);
    write_json(o->out, hs::params_to_json(fit.params));
    log("fit: loss " + std::to_string(fit.report.initial_loss) + " -> " + std::to_string(fit.report.best_loss) +
        " in " + std::to_string(fit.report.wall_time_s) + " s -> " + o->out);
    auto report = fit.report.to_json();
    report["command"] = "fit";
    report["out"] = o->out;
    write_report(o->common, beside(o->out, ".report.json"), report);
  });
}

void add_personalize(CLI::App& root) {
  struct Opts {
    Common common;
    std::string avatar, tmpl, dataset, init = "fitted", out, out_avatar;
    std::size_t conditioning = 4;
    std::uint64_t seed = 0;
    int steps = 500, log_every = 50;
    double lr = 1e-4;
  };
  auto o = std::make_shared<Opts>();
  auto* app = verb(root, "personalize", "Optimize per-Gaussian residuals on conditioning frames", o->common);
  app->add_option("--avatar", o->avatar)->required()->check(CLI::ExistingFile);
  app->add_option("--template", o->tmpl)->required()->check(CLI::ExistingFile);
  app->add_option("--dataset", o->dataset)->required()->check(CLI::ExistingDirectory);
  app->add_option("--conditioning", o->conditioning, "Number of conditioning frames");
  app->add_option("--seed", o->seed, "Split seed");
  app->add_option("--steps", o->steps)->check(CLI::NonNegativeNumber);
  app->add_option("--lr", o->lr)->check(CLI::PositiveNumber);
  app->add_option("--init", o->init, "Color initialization before optimizing")
      ->check(CLI::IsMember({"none", "fitted", "random"}));
  app->add_option("--log-every", o->log_every)->check(CLI::PositiveNumber);
  app->add_option("--out", o->out, "Output .ghr residuals, relative to the initialized avatar")->required();
  app->add_option("--out-avatar", o->out_avatar, "Also write the personalized avatar (.gha)");
  app->callback([o] {
    const auto tmpl = hs::load_template(o->tmpl);
    const auto base = load_posable(o->avatar, "", tmpl);
    const auto d = hs::SubjectDataset::load(o->dataset);
    const auto idx = conditioning_indices(d, o->conditioning, o->seed);
    bool fitted = false;
    const auto frames = hs::training_frames(d, base, tmpl, idx, {}, &fitted);
    hs::CanonicalAvatar start = base;
    if (o->init == "fitted") start = hs::fitted_initialization(base, tmpl, frames, o->common.raster());
    if (o->init == "random") start = hs::random_initialization(base, o->seed);
    hs::PersonalizeOptions p;
    p.steps = o->steps;
    p.lr = o->lr;
    p.raster = o->common.raster();
    p.animation = o->common.animation();
    p.on_step = [o](int step, double loss) {
      if (step % o->log_every == 0) log("step " + std::to_string(step) + " loss " + std::to_string(loss));
    };
    const auto result = hs::personalize(start, tmpl, frames, p);
    hs::save_residuals(o->out, result.residuals, tmpl.crc());
    if (!o->out_avatar.empty()) hs::save_avatar(o->out_avatar, hs::apply_residuals(start, result.residuals));
    if (o->init != "none" && o->out_avatar.empty()) {
      log("note: residuals apply to the " + o->init + "-initialized avatar; pass --out-avatar to keep it");
    }
    log("personalize: loss " + std::to_string(result.report.initial_loss) + " -> " +
        std::to_string(result.report.final_loss) + " in " + std::to_string(result.report.wall_time_s) + " s");
    auto report = result.report.to_json();
    report["command"] = "personalize";
    report["out"] = o->out;
    report["init"] = o->init;
    report["conditioning"] = idx;
    report["fitted_params"] = fitted;
    report["max_abs_residual"] = result.residuals.max_abs();
    write_report(o->common, beside(o->out, ".report.json"), report);
  });
}

void add_render(CLI::App& root) {
  struct Opts {
    Common common;
    std::string avatar, tmpl, residuals, params, out, f32;
    int width = 504, height = 504;
  };
  auto o = std::make_shared<Opts>();
  auto* app = verb(root, "render", "Render one posed frame", o->common);
  app->add_option("--avatar", o->avatar)->required()->check(CLI::ExistingFile);
  app->add_option("--template", o->tmpl)->required()->check(CLI::ExistingFile);
  app->add_option("--residuals", o->residuals);
  app->add_option("--params", o->params, "Parameters JSON (default: rest pose in view)");
  app->add_option("--width", o->width)->check(CLI::Range(1, 8192));
  app->add_option("--height", o->height)->check(CLI::Range(1, 8192));
  app->add_option("--out", o->out, "Output PNG (RGBA)")->required();
  app->add_option("--f32", o->f32, "Also write the float RGB image");
  app->callback([o] {
    const auto tmpl = hs::load_template(o->tmpl);
    const auto avatar = load_posable(o->avatar, o->residuals, tmpl);
    const auto params = o->params.empty() ? hs::viewing_params(tmpl) : read_params(o->params, tmpl);
    const auto t0 = std::chrono::steady_clock::now();
    const auto frame = hs::render(hs::pose_avatar(avatar, tmpl, params, o->common.animation()),
                                  hs::Camera::normalized(o->width, o->height), o->common.raster());
    const double elapsed = seconds_since(t0);
    if (fs::path(o->out).has_parent_path()) fs::create_directories(fs::path(o->out).parent_path());
    hs::write_png(o->out, frame.rgb, &frame.alpha);
    if (!o->f32.empty()) hs::write_f32(o->f32, frame.rgb);
    log("render -> " + o->out);
    write_report(o->common, beside(o->out, ".report.json"),
                 {{"command", "render"},
                  {"out", o->out},
                  {"size", {o->width, o->height}},
                  {"gaussians", avatar.size()},
                  {"params", hs::params_to_json(params)},
                  {"wall_time_s", elapsed}});
  });
}

void add_animate(CLI::App& root) {
  struct Opts {
    Common common;
    std::string avatar, tmpl, residuals, params, out;
    int frames = 30, width = 256, height = 256;
    std::uint64_t seed = 0;
  };
  auto o = std::make_shared<Opts>();
  auto* app = verb(root, "animate", "Render a parameter sequence to PNG frames", o->common);
  app->add_option("--avatar", o->avatar)->required()->check(CLI::ExistingFile);
  app->add_option("--template", o->tmpl)->required()->check(CLI::ExistingFile);
  app->add_option("--residuals", o->residuals);
  app->add_option("--params", o->params, "JSON array of parameter objects (default: a smooth random trajectory)");
  app->add_option("--frames", o->frames, "Trajectory length when --params is absent")->check(CLI::PositiveNumber);
  app->add_option("--seed", o->seed, "Trajectory seed");
  app->add_option("--width", o->width)->check(CLI::Range(1, 8192));
  app->add_option("--height", o->height)->check(CLI::Range(1, 8192));
  app->add_option("--out", o->out, "Output directory")->required();
  app->callback([o] {
    const auto tmpl = hs::load_template(o->tmpl);
    const auto avatar = load_posable(o->avatar, o->residuals, tmpl);
    std::vector<hs::FlameParams> seq;
    if (o->params.empty()) {
      seq = hs::smooth_trajectory(tmpl, o->frames, o->seed);
    } else {
      std::ifstream in(o->params);
      if (!in) throw std::runtime_error("cannot open " + o->params);
      const auto j = json::parse(in);
      if (!j.is_array()) throw hs::FormatError(o->params + ": expected a JSON array");
      for (const auto& item : j) {
        seq.push_back(hs::params_from_json(item.contains("params") ? item.at("params") : item));
        seq.back().validate(tmpl);
      }
    }
    fs::create_directories(o->out);
    const hs::Rig rig(tmpl, avatar);
    const auto cam = hs::Camera::normalized(o->width, o->height);
    std::vector<double> frame_ms;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto frame = hs::render(rig.pose(avatar, seq[i], o->common.animation()), cam, o->common.raster());
      frame_ms.push_back(1e3 * seconds_since(t0));
      char name[32];
      std::snprintf(name, sizeof name, "frame_%04zu.png", i);
      hs::write_png(fs::path(o->out) / name, frame.rgb, &frame.alpha);
    }
    double total = 0.0;
    for (double ms : frame_ms) total += ms;
    const double fps = total > 0.0 ? 1e3 * static_cast<double>(seq.size()) / total : 0.0;
    log("animate: " + std::to_string(seq.size()) + " frames at " + std::to_string(fps) + " FPS -> " + o->out);
    write_report(o->common, fs::path(o->out) / "animate_report.json",
                 {{"command", "animate"},
                  {"out", o->out},
                  {"frames", seq.size()},
                  {"size", {o->width, o->height}},
                  {"frame_ms", frame_ms},
                  {"fps", fps}});
  });
}

void add_eval(CLI::App& root) {
  struct Opts {
    Common common;
    std::string avatar, tmpl, residuals, dataset, csv;
    std::size_t conditioning = 4;
    std::uint64_t seed = 0;
    int fit_steps = 300;
  };
  auto o = std::make_shared<Opts>();
  auto* app = verb(root, "eval", "Few-to-many evaluation: PSNR and SSIM on held-out frames", o->common);
  app->add_option("--avatar", o->avatar)->required()->check(CLI::ExistingFile);
  app->add_option("--template", o->tmpl)->required()->check(CLI::ExistingFile);
  app->add_option("--residuals", o->residuals);
  app->add_option("--dataset", o->dataset)->required()->check(CLI::ExistingDirectory);
  app->add_option("--conditioning", o->conditioning, "Number of conditioning frames excluded from scoring");
  app->add_option("--seed", o->seed, "Split seed");
  app->add_option("--fit-steps", o->fit_steps, "fit steps for frames without parameter sidecars");
  app->add_option("--csv", o->csv, "CSV report path (default: beside the JSON report)");
  app->callback([o] {
    const auto tmpl = hs::load_template(o->tmpl);
    const auto avatar = load_posable(o->avatar, o->residuals, tmpl);
    const auto d = hs::SubjectDataset::load(o->dataset);
    hs::EvalOptions e;
    e.conditioning = o->conditioning;
    e.seed = o->seed;
    e.raster = o->common.raster();
    e.fit.steps = o->fit_steps;
    e.fit.raster = o->common.raster();
    const auto report = hs::evaluate(d, avatar, tmpl, e);
    const fs::path json_path = o->common.report.empty() ? fs::path("eval_report.json") : fs::path(o->common.report);
    const fs::path csv_path = o->csv.empty() ? fs::path(json_path).replace_extension(".csv") : fs::path(o->csv);
    if (json_path.has_parent_path()) fs::create_directories(json_path.parent_path());
    if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
    report.write(json_path, csv_path);
    log("eval: mean PSNR " + std::to_string(report.mean_psnr) + " dB, SSIM " + std::to_string(report.mean_ssim) +
        " over " + std::to_string(report.frames.size()) + " frames");
    log("report: " + json_path.string() + ", " + csv_path.string());
  });
}

void add_bench(CLI::App& root) {
  struct Opts {
    Common common;
    std::string avatar, tmpl;
    int frames = 100, width = 504, height = 504;
    std::size_t gaussians = 80000;
    std::uint64_t seed = 0;
  };
  auto o = std::make_shared<Opts>();
  auto* app = verb(root, "bench", "Time pose + render over random smooth parameters", o->common);
  app->add_option("--avatar", o->avatar, "Avatar to time (default: a synthetic subject)");
  app->add_option("--template", o->tmpl, "Template (default: a synthetic template)");
  app->add_option("--gaussians", o->gaussians, "Synthetic subject size when --avatar is absent")
      ->check(CLI::PositiveNumber);
  app->add_option("--frames", o->frames)->check(CLI::PositiveNumber);
  app->add_option("--width", o->width)->check(CLI::Range(1, 8192));
  app->add_option("--height", o->height)->check(CLI::Range(1, 8192));
  app->add_option("--seed", o->seed);
  app->callback([o] {
    const auto tmpl = o->tmpl.empty() ? hs::generate_synthetic_template(o->seed, 2000, 8, 10, 4)
                                      : hs::load_template(o->tmpl);
    hs::CanonicalAvatar avatar;
    if (o->avatar.empty()) {
      hs::SyntheticSubjectOptions s;
      s.gaussians = o->gaussians;
      avatar = hs::synthetic_subject(tmpl, o->seed, s);
    } else {
      avatar = load_posable(o->avatar, "", tmpl);
    }
    const auto r = hs::bench_animate(avatar, tmpl, hs::Camera::normalized(o->width, o->height), o->frames, o->seed,
                                     o->common.raster());
    auto j = r.to_json();
    j["command"] = "bench";
    log("bench: " + std::to_string(r.gaussians) + " Gaussians at " + std::to_string(r.width) + "x" +
        std::to_string(r.height) + ", " + std::to_string(r.threads) + " threads: mean " + std::to_string(r.mean_fps) +
        " FPS, median " + std::to_string(r.median_fps) + " FPS, pose " + std::to_string(r.pose_per_second) + "/s");
    write_report(o->common, "bench_report.json", j);
  });
}

void add_serve(CLI::App& root) {
  struct Opts {
    Common common;
    std::string avatar, tmpl, address = "127.0.0.1";
    unsigned short port = 8765;
    int max_dim = 2048;
  };
  auto o = std::make_shared<Opts>();
  auto* app = verb(root, "serve", "Websocket service rendering frames for streamed parameters", o->common);
  app->add_option("--avatar", o->avatar)->required()->check(CLI::ExistingFile);
  app->add_option("--template", o->tmpl)->required()->check(CLI::ExistingFile);
  app->add_option("--address", o->address);
  app->add_option("--port", o->port, "0 picks a free port");
  app->add_option("--max-dim", o->max_dim, "Largest accepted frame side")->check(CLI::PositiveNumber);
  app->callback([o] {
    hs::ServeOptions s;
    s.address = o->address;
    s.port = o->port;
    s.max_dim = o->max_dim;
    s.raster = o->common.raster();
    auto server = hs::Server::from_files(o->avatar, o->tmpl, s);
    if (!o->common.report.empty()) {
      write_report(o->common, o->common.report,
                   {{"command", "serve"}, {"address", o->address}, {"port", server.port()}});
    }
    log("serving on ws://" + o->address + ":" + std::to_string(server.port()));
    // Block the signals before any server thread exists, then wait for them here.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);
    server.start();
    int received = 0;
    sigwait(&signals, &received);
    server.stop();
    log("serve: stopped");
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Animatable 3D Gaussian head avatars"};
  app.require_subcommand(1);
  auto config = std::make_shared<hs::cli::JsonOrTomlConfig>();
  app.config_formatter(config);
  app.set_config("--config", "", "TOML or JSON file with option values for the verb; flags override it");
  add_template_gen(app);
  add_avatar(app);
  add_dataset(app);
  add_fit(app);
  add_personalize(app);
  add_render(app);
  add_animate(app);
  add_eval(app);
  add_bench(app);
  add_serve(app);
  CLI::App* node = &app;
  for (int i = 1; i < argc && argv[i][0] != '-'; ++i) {
    node = node->get_subcommand_no_throw(argv[i]);
    if (!node) break;
    config->section.push_back(argv[i]);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
