// hpc: generate synthetic scenes, encode them into streams, decode, inspect
// and sweep lambda.
//
// Exit codes: 0 success, 2 configuration error, 3 malformed input, 4 training
// divergence or encoder/decoder disagreement.

#include <spawn.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hpc/bitstream.hpp"
#include "hpc/metrics.hpp"
#include "hpc/scene.hpp"
#include "hpc/trainer.hpp"
#include "json.hpp"

extern char** environ;

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

enum Exit { kOk = 0, kConfig = 2, kFormat = 3, kDiverged = 4 };

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t default_seed() {
  const char* env = std::getenv("HPC_SEED");
  if (env == nullptr || *env == '\0') return 1;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(env, &used);
    if (used != std::string(env).size()) throw std::invalid_argument(env);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("HPC_SEED is not an unsigned integer: ") + env);
  }
}

hpc::bitstream::Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_file(const std::string& path, std::string_view data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw ConfigError("failed writing " + path);
}

json psnr_json(double v) { return std::isfinite(v) ? json(v) : json("inf"); }

// ---- RD settings: defaults, then config file, then flags ----

struct RdFlags {
  std::string config_path;
  hpc::trainer::RdConfig cfg;
  bool no_nnc = false, no_ila = false, no_cla = false, warm = false;
  std::vector<CLI::Option*> options;
  CLI::Option *o_no_nnc = nullptr, *o_no_ila = nullptr, *o_no_cla = nullptr, *o_warm = nullptr;
  std::vector<std::pair<CLI::Option*, std::function<void(hpc::trainer::RdConfig&)>>> setters;
};

template <typename T>
void add_value(CLI::App& app, RdFlags& f, const std::string& name, T hpc::trainer::RdConfig::*field,
               const std::string& help) {
  auto holder = std::make_shared<T>();
  auto* opt = app.add_option(name, *holder, help);
  f.setters.emplace_back(opt, [holder, field](hpc::trainer::RdConfig& c) { c.*field = *holder; });
}

void add_rd_flags(CLI::App& app, RdFlags& f) {
  app.add_option("--config", f.config_path, "JSON file with RD settings; flags given here override it");
  add_value(app, f, "--lambda", &hpc::trainer::RdConfig::lambda, "rate weight (bits per pixel)");
  add_value(app, f, "--lambda-ssim", &hpc::trainer::RdConfig::lambda_ssim, "weight of 1 - SSIM in the distortion");
  add_value(app, f, "--iterations", &hpc::trainer::RdConfig::iterations, "optimizer steps per frame");
  add_value(app, f, "--lr", &hpc::trainer::RdConfig::lr, "learning rate for network parameters");
  add_value(app, f, "--latent-lr", &hpc::trainer::RdConfig::latent_lr, "learning rate for latent embeddings");
  add_value(app, f, "--entropy-lr", &hpc::trainer::RdConfig::entropy_lr, "learning rate for the factorized model");
  add_value(app, f, "--eta-lr", &hpc::trainer::RdConfig::eta_lr, "learning rate for the P-frame scaling eta");
  add_value(app, f, "--latent-init-std", &hpc::trainer::RdConfig::latent_init_std, "std of fresh latents");
  add_value(app, f, "--seed", &hpc::trainer::RdConfig::seed, "training seed (default HPC_SEED or 1)");
  add_value(app, f, "--bits", &hpc::trainer::RdConfig::bits, "network bit depth B (4, 8 or 16)");
  add_value(app, f, "--gop", &hpc::trainer::RdConfig::gop, "GOP size; 1 makes every frame intra");
  f.o_no_nnc = app.add_flag("--no-nnc", f.no_nnc, "store networks as raw float32");
  f.o_no_ila = app.add_flag("--no-ila", f.no_ila, "disable inner-scale aggregation");
  f.o_no_cla = app.add_flag("--no-cla", f.no_cla, "single-scale latents, no cross-scale aggregation");
  f.o_warm = app.add_flag("--warm-start", f.warm, "start each frame's latents from the previous frame's");
}

void apply_json(hpc::trainer::RdConfig& c, const json& j) {
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "lambda_ssim") c.lambda_ssim = v.get<double>();
      else if (key == "iterations") c.iterations = v.get<std::size_t>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "latent_lr") c.latent_lr = v.get<double>();
      else if (key == "entropy_lr") c.entropy_lr = v.get<double>();
      else if (key == "eta_lr") c.eta_lr = v.get<double>();
      else if (key == "latent_init_std") c.latent_init_std = v.get<double>();
      else if (key == "warm_start_latents") c.warm_start_latents = v.get<bool>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "bits") c.bits = v.get<int>();
      else if (key == "gop") c.gop = v.get<std::uint32_t>();
      else if (key == "nnc") c.nnc = v.get<bool>();
      else if (key == "ila") c.ila = v.get<bool>();
      else if (key == "cla") c.cla = v.get<bool>();
      else throw ConfigError("unknown config key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

json to_json(const hpc::trainer::RdConfig& c) {
  return {{"lambda", c.lambda},       {"lambda_ssim", c.lambda_ssim},
          {"iterations", c.iterations}, {"lr", c.lr},
          {"latent_lr", c.latent_lr}, {"entropy_lr", c.entropy_lr},
          {"eta_lr", c.eta_lr},       {"latent_init_std", c.latent_init_std},
          {"warm_start_latents", c.warm_start_latents},
          {"seed", c.seed},           {"bits", c.bits},
          {"gop", c.gop},             {"nnc", c.nnc},
          {"ila", c.ila},             {"cla", c.cla}};
}

hpc::trainer::RdConfig resolve(const RdFlags& f) {
  hpc::trainer::RdConfig c;
  c.seed = default_seed();
  if (!f.config_path.empty()) {
    const auto bytes = read_file(f.config_path);
    json j;
    try {
      j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
      throw ConfigError(f.config_path + ": " + e.what());
    }
    apply_json(c, j);
  }
  for (const auto& [opt, set] : f.setters)
    if (opt->count() > 0) set(c);
  if (f.o_no_nnc->count() > 0) c.nnc = false;
  if (f.o_no_ila->count() > 0) c.ila = false;
  if (f.o_no_cla->count() > 0) c.cla = false;
  if (f.o_warm->count() > 0) c.warm_start_latents = true;
  return c;
}

void log_config(const std::string& what, const json& j) { std::cerr << "resolved " << what << ": " << j.dump() << '\n'; }

// ---- subcommands ----

struct GenArgs {
  std::optional<std::uint64_t> seed;
  hpc::scene::SceneParams params;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  auto p = a.params;
  p.seed = a.seed ? *a.seed : default_seed();
  log_config("scene", {{"seed", p.seed},
                       {"anchors", p.anchors},
                       {"frames", p.frames},
                       {"clusters", p.clusters},
                       {"height", p.height},
                       {"width", p.width},
                       {"max_angle_deg", p.max_angle_deg},
                       {"max_translation", p.max_translation},
                       {"feature_drift", p.feature_drift}});
  auto s = hpc::scene::generate_scene(p);
  const auto bytes = hpc::scene::write_scene(s);
  write_file(a.out, {reinterpret_cast<const char*>(bytes.data()), bytes.size()});
  std::cout << "wrote " << a.out << " (" << bytes.size() << " bytes, " << p.frames << " frames, " << p.anchors
            << " anchors)\n";
  return kOk;
}

struct EncodeArgs {
  std::string scene, out, csv, report;
};

int cmd_encode(const EncodeArgs& a, const RdFlags& f) {
  const auto cfg = resolve(f);
  log_config("config", to_json(cfg));
  auto scene = hpc::scene::read_scene(read_file(a.scene));
  scene.frames.resize(1);  // only frame 0 and the images are ever used
  auto res = hpc::trainer::run_stream(scene, cfg);
  write_file(a.out, {reinterpret_cast<const char*>(res.bytes.data()), res.bytes.size()});
  if (!a.csv.empty()) write_file(a.csv, res.report.to_csv());
  if (!a.report.empty()) {
    auto j = json::parse(res.report.to_json());
    j["config"] = to_json(cfg);
    write_file(a.report, j.dump(2));
  }
  std::cout << "wrote " << a.out << ": " << res.bytes.size() << " bytes, " << res.report.mean_kb()
            << " KB/frame, mean PSNR " << res.report.mean_psnr() << " dB\n";
  return kOk;
}

struct DecodeArgs {
  std::string in, out_dir, scene;
};

int cmd_decode(const DecodeArgs& a) {
  log_config("decode", {{"in", a.in}, {"out_dir", a.out_dir}, {"scene", a.scene}});
  const auto bytes = read_file(a.in);
  std::optional<hpc::scene::SyntheticScene> scene;
  if (!a.scene.empty()) scene = hpc::scene::read_scene(read_file(a.scene));
  auto dec = hpc::trainer::decode_stream(bytes);
  if (scene && (scene->images.size() != dec.frames.size() || scene->params.height != dec.config.height ||
                scene->params.width != dec.config.width)) {
    throw ConfigError("scene does not match the stream");
  }
  fs::create_directories(a.out_dir);
  json frames = json::array();
  int bad = 0;
  for (const auto& fr : dec.frames) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03u.ppm", fr.index);
    hpc::deform::write_ppm((fs::path(a.out_dir) / name).string(), fr.image);
    json j{{"frame", fr.index}, {"flagged", fr.flagged}};
    if (!fr.error.empty()) j["error"] = fr.error;
    if (scene) {
      const auto img = hpc::deform::image_tensor(fr.image), gt = hpc::deform::image_tensor(scene->images[fr.index]);
      j["psnr"] = psnr_json(hpc::metrics::psnr(img, gt));
      j["ssim"] = hpc::metrics::ssim(img, gt).item();
    }
    if (fr.flagged) {
      ++bad;
      std::cerr << "frame " << fr.index << " flagged" << (fr.error.empty() ? "" : ": " + fr.error) << '\n';
    }
    frames.push_back(std::move(j));
  }
  json out{{"frames", frames}, {"flagged", bad}};
  write_file((fs::path(a.out_dir) / "metrics.json").string(), out.dump(2));
  std::cout << "decoded " << dec.frames.size() << " frames into " << a.out_dir << " (" << bad << " flagged)\n";
  return kOk;
}

json inspect_json(std::span<const std::uint8_t> bytes) {
  auto parsed = hpc::bitstream::read_stream(bytes);
  const auto& h = parsed.header;
  json j;
  j["header"] = {{"version", h.version},     {"frames", h.frames},       {"anchors", h.anchors},
                 {"offsets", h.offsets},     {"feature_dim", h.feature_dim}, {"channels", h.channels},
                 {"levels", h.levels},       {"bit_depth", h.bit_depth}, {"gop", h.gop},
                 {"raw_networks", (h.flags & hpc::bitstream::kRawNetworks) != 0},
                 {"ila", (h.flags & hpc::bitstream::kUseIla) != 0},
                 {"height", h.height},       {"width", h.width}};
  j["header_bytes"] = hpc::bitstream::StreamHeader::kSize;
  j["initial_bytes"] = parsed.initial_payload.size();
  j["chunks"] = json::array();
  for (const auto& rec : parsed.chunks) {
    json c{{"offset", rec.offset}, {"chunk_bytes", rec.size}};
    if (rec.chunk) {
      hpc::bitstream::ChunkSizes sizes;
      hpc::bitstream::write_chunk(*rec.chunk, &sizes);
      c["frame"] = rec.chunk->index;
      c["type"] = rec.chunk->type == hpc::netcodec::FrameType::kIntra ? "I" : "P";
      c["latent_bytes"] = sizes.latent;
      c["network_bytes"] = sizes.network;
      c["overhead_bytes"] = sizes.overhead();
      c["epsilons"] = rec.chunk->epsilons;
    } else {
      c["error"] = rec.error;
    }
    j["chunks"].push_back(std::move(c));
  }
  return j;
}

int cmd_inspect(const std::string& in, bool as_json) {
  const auto bytes = read_file(in);
  const auto j = inspect_json(bytes);
  if (as_json) {
    std::cout << j.dump(2) << '\n';
    return kOk;
  }
  const auto& h = j["header"];
  std::cout << in << ": " << bytes.size() << " bytes, " << h["frames"] << " frames, " << h["anchors"]
            << " anchors, B=" << h["bit_depth"] << ", GOP " << h["gop"]
            << (h["raw_networks"].get<bool>() ? ", raw networks" : "") << '\n';
  std::cout << "  header " << j["header_bytes"] << " B, initial frame " << j["initial_bytes"] << " B\n";
  std::cout << "  frame type   total  latent  network  overhead  epsilons\n";
  for (const auto& c : j["chunks"]) {
    if (c.contains("error")) {
      std::cout << "  chunk at " << c["offset"] << ": " << c["error"].get<std::string>() << '\n';
      continue;
    }
    std::ostringstream eps;
    for (const auto& e : c["epsilons"]) eps << e.get<double>() << ' ';
    char line[160];
    std::snprintf(line, sizeof line, "  %5u %4s %7zu %7zu %8zu %9zu  %s\n", c["frame"].get<unsigned>(),
                  c["type"].get<std::string>().c_str(), c["chunk_bytes"].get<std::size_t>(),
                  c["latent_bytes"].get<std::size_t>(), c["network_bytes"].get<std::size_t>(),
                  c["overhead_bytes"].get<std::size_t>(), eps.str().c_str());
    std::cout << line;
  }
  return kOk;
}

struct SweepArgs {
  std::string scene, out_dir;
  std::vector<double> lambdas{0.002, 0.01, 0.048};
  unsigned jobs = 1;
};

// One encode process per lambda, at most `jobs` at a time.
int cmd_sweep(const SweepArgs& a, const RdFlags& f, const std::vector<std::string>& passthrough) {
  const auto base = resolve(f);
  log_config("config", to_json(base));
  fs::create_directories(a.out_dir);
  const std::string self = fs::read_symlink("/proc/self/exe").string();
  std::vector<pid_t> running;
  std::vector<std::pair<double, std::string>> reports;
  int worst = kOk;
  auto reap = [&] {
    int status = 0;
    const pid_t pid = wait(&status);
    std::erase(running, pid);
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : kDiverged;
    worst = std::max(worst, code);
  };
  for (double lambda : a.lambdas) {
    std::ostringstream tag;
    tag << "lambda_" << lambda;
    const auto stem = (fs::path(a.out_dir) / tag.str()).string();
    std::vector<std::string> args{self, "encode", "--scene", a.scene, "--out", stem + ".hpcs",
                                  "--csv", stem + ".csv", "--report", stem + ".json"};
    args.insert(args.end(), passthrough.begin(), passthrough.end());
    std::ostringstream lam;
    lam.precision(17);
    lam << lambda;
    args.insert(args.end(), {"--lambda", lam.str()});
    std::vector<char*> argv;
    for (auto& s : args) argv.push_back(s.data());
    argv.push_back(nullptr);
    while (running.size() >= std::max(1u, a.jobs)) reap();
    pid_t pid = 0;
    if (posix_spawn(&pid, self.c_str(), nullptr, nullptr, argv.data(), environ) != 0) {
      throw std::runtime_error("cannot start worker for lambda " + lam.str());
    }
    running.push_back(pid);
    reports.emplace_back(lambda, stem + ".json");
  }
  while (!running.empty()) reap();
  if (worst != kOk) return worst;

  std::ostringstream csv;
  csv << "lambda,kb_per_frame,psnr,ssim,coded_bytes\n";
  for (const auto& [lambda, path] : reports) {
    const auto bytes = read_file(path);
    const auto j = json::parse(bytes.begin(), bytes.end());
    csv << lambda << ',' << j["mean_kb_per_frame"].get<double>() << ',' << j["mean_psnr"].get<double>() << ','
        << j["mean_ssim"].get<double>() << ',' << j["coded_bytes"].get<std::size_t>() << '\n';
  }
  write_file((fs::path(a.out_dir) / "sweep.csv").string(), csv.str());
  std::cout << csv.str();
  return kOk;
}

// Re-serializes the RD flags that were given explicitly, for sweep workers.
std::vector<std::string> explicit_rd_args(const RdFlags& f) {
  std::vector<std::string> out;
  if (!f.config_path.empty()) out.insert(out.end(), {"--config", f.config_path});
  for (const auto& [opt, set] : f.setters) {
    if (opt->count() == 0 || opt->get_name() == "--lambda") continue;
    out.push_back(opt->get_name());
    out.push_back(opt->as<std::string>());
  }
  for (auto* o : {f.o_no_nnc, f.o_no_ila, f.o_no_cla, f.o_warm})
    if (o->count() > 0) out.push_back(o->get_name());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming codec for dynamic neural-Gaussian scenes"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic scene file");
  g->add_option("--seed", gen.seed, "scene seed (default HPC_SEED or 1)");
  g->add_option("--anchors,-n", gen.params.anchors, "number of anchors")->check(CLI::Range(1u, 100000u));
  g->add_option("--frames,-T", gen.params.frames, "number of frames")->check(CLI::Range(1u, 1000u));
  g->add_option("--clusters", gen.params.clusters, "rigidly moving groups")->check(CLI::Range(1u, 1000u));
  g->add_option("--height", gen.params.height, "image height")->check(CLI::Range(11u, 4096u));
  g->add_option("--width", gen.params.width, "image width")->check(CLI::Range(11u, 4096u));
  g->add_option("--max-angle", gen.params.max_angle_deg, "per-frame rotation bound in degrees");
  g->add_option("--max-translation", gen.params.max_translation, "per-frame translation bound");
  g->add_option("--feature-drift", gen.params.feature_drift, "std of per-frame feature noise");
  g->add_option("--out,-o", gen.out, "scene file to write")->required();

  EncodeArgs enc;
  RdFlags enc_flags;
  auto* e = app.add_subcommand("encode", "train and code a scene into a stream");
  e->add_option("--scene", enc.scene, "scene file")->required();
  e->add_option("--out,-o", enc.out, "stream file to write")->required();
  e->add_option("--csv", enc.csv, "per-frame rate report (CSV)");
  e->add_option("--report", enc.report, "rate report (JSON)");
  add_rd_flags(*e, enc_flags);

  DecodeArgs dec;
  auto* d = app.add_subcommand("decode", "decode a stream into images and metrics");
  d->add_option("--in,-i", dec.in, "stream file")->required();
  d->add_option("--out-dir,-o", dec.out_dir, "directory for frames and metrics.json")->required();
  d->add_option("--scene", dec.scene, "scene file for PSNR/SSIM against its targets");

  std::string inspect_in;
  bool inspect_as_json = false;
  auto* in = app.add_subcommand("inspect", "summarize a stream's frames and byte split");
  in->add_option("--in,-i", inspect_in, "stream file")->required();
  in->add_flag("--json", inspect_as_json, "machine-readable output");

  SweepArgs sweep;
  RdFlags sweep_flags;
  auto* sw = app.add_subcommand("sweep", "encode one stream per lambda in separate processes");
  sw->add_option("--scene", sweep.scene, "scene file")->required();
  sw->add_option("--out-dir,-o", sweep.out_dir, "directory for streams and reports")->required();
  sw->add_option("--lambdas", sweep.lambdas, "lambda values")->delimiter(',');
  sw->add_option("--jobs,-j", sweep.jobs, "concurrent workers");
  add_rd_flags(*sw, sweep_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kConfig;
  }

  try {
    if (g->parsed()) return cmd_gen(gen);
    if (e->parsed()) return cmd_encode(enc, enc_flags);
    if (d->parsed()) return cmd_decode(dec);
    if (in->parsed()) return cmd_inspect(inspect_in, inspect_as_json);
    if (sw->parsed()) return cmd_sweep(sweep, sweep_flags, explicit_rd_args(sweep_flags));
  } catch (const ConfigError& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kConfig;
  } catch (const std::invalid_argument& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kConfig;
  } catch (const hpc::FormatError& ex) {
    std::cerr << "format error: " << ex.what() << '\n';
    return kFormat;
  } catch (const hpc::trainer::TrainingError& ex) {
    std::cerr << "training diverged: " << ex.what() << '\n';
    return kDiverged;
  } catch (const hpc::StreamError& ex) {
    std::cerr << "stream error: " << ex.what() << '\n';
    return kDiverged;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kConfig;
  }
  return kConfig;
}
