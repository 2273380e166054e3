// siamav: pretrain, finetune, evaluate and inspect siamese audio-visual models.
//
//   siamav pretrain --profile tiny --seed 7 --out runs/pre
//   siamav finetune --init runs/pre/checkpoint.avsm --task ce --out runs/ft
//   siamav eval --ckpt runs/pre/checkpoint.avsm --mode retrieval
//   siamav mel --wav clip.wav --out runs/mel
//
// Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or config error.
// SIAMAV_LOG=quiet|info|debug controls stderr verbosity (default info).

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "siamav/siamav.hpp"

using namespace siamav;

namespace {

enum class Verbosity { quiet, info, debug };

Verbosity verbosity() {
  const char* v = std::getenv("SIAMAV_LOG");
  if (v == nullptr) return Verbosity::info;
  const std::string s(v);
  if (s == "quiet") return Verbosity::quiet;
  if (s == "debug") return Verbosity::debug;
  return Verbosity::info;
}

void log(Verbosity level, const std::string& msg) {
  if (static_cast<int>(level) <= static_cast<int>(verbosity())) std::cerr << msg << "\n";
}

struct CommonOptions {
  std::string config_path;
  std::string profile = "tiny";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::string out;
};

std::vector<double> parse_ratio_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--mask-ratios: '" + item + "' is not a number");
    }
  }
  return out;
}

// Profile defaults, then the config file, then flags. An omitted seed is drawn.
RunConfig resolve_config(const CommonOptions& o, std::uint64_t& seed) {
  json user = o.config_path.empty() ? json() : parse_json_file(o.config_path);
  auto cfg = load_config(parse_profile(o.profile), user);
  if (o.seed) {
    seed = *o.seed;
  } else {
    std::random_device rd;
    seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    std::cout << "drew seed " << seed << "\n";
  }
  cfg.train.seed = seed;
  return cfg;
}

void announce(const std::string& cmd, const RunConfig& cfg) {
  std::cout << cmd << " config_hash " << config_hash(cfg) << " seed " << cfg.train.seed << "\n";
  log(Verbosity::debug, to_json(cfg).dump(2));
}

std::filesystem::path prepare_out(const std::string& out) {
  std::filesystem::path dir(out);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

class JsonLog {
 public:
  explicit JsonLog(const std::filesystem::path& path, bool append) : path_(path) {
    os_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!os_) throw IoError("cannot open " + path.string());
  }
  void write(const json& j) {
    os_ << j.dump() << "\n";
    os_.flush();
    if (!os_) throw IoError("write to " + path_.string() + " failed");
  }

 private:
  std::filesystem::path path_;
  std::ofstream os_;
};

std::vector<std::uint64_t> split_ids(const RunConfig& cfg, const std::string& split) {
  return manifest_split(build_manifest(cfg.data.n_train, cfg.data.n_eval, cfg.data.seed, cfg.synth()), split);
}

// Finetuning draws from a second synthetic stream so its labels can be single-class.
Dataset<float> finetune_data(const RunConfig& cfg, const std::string& split) {
  return Dataset<float>::generate(cfg.data.seed + 1, split_ids(cfg, split), cfg.finetune_synth());
}

json classification_report(Finetuner<float>& ft, const Dataset<float>& data, const RunConfig& cfg) {
  json out;
  const std::size_t K = cfg.data.K;
  for (auto t : {InputType::audio, InputType::visual, InputType::both}) {
    const auto logits = ft.predict(data, t, cfg.eval.batch_size);
    json block;
    if (cfg.finetune.task == FinetuneTask::multiclass_ce) {
      block["top1"] = top1_accuracy(logits, single_label_targets(data.labels), K);
    } else {
      block["mAP"] = mean_average_precision(logits, data.labels, K);
    }
    out[input_type_name(t)] = block;
  }
  return out;
}

json run_metadata(const RunConfig& cfg) {
  return {{"config_hash", config_hash(cfg)}, {"seed", cfg.train.seed}, {"config", to_json(cfg)}};
}

void print_retrieval(const RetrievalReport& r) {
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    std::cout << "  A->V R@" << r.ks[i] << " " << r.audio_to_visual[i] << "   V->A R@" << r.ks[i] << " "
              << r.visual_to_audio[i] << "\n";
  }
}

int cmd_pretrain(const CommonOptions& o, const std::string& mask_ratios, bool resume) {
  std::uint64_t seed = 0;
  auto cfg = resolve_config(o, seed);
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (!mask_ratios.empty()) cfg.ratios.ratios = parse_ratio_list(mask_ratios);
  cfg.validate();
  announce("pretrain", cfg);

  const auto dir = prepare_out(o.out);
  const auto ckpt = dir / "checkpoint.avsm";
  const auto train = Dataset<float>::generate(cfg.data.seed, split_ids(cfg, "train"), cfg.synth());
  const auto eval = Dataset<float>::generate(cfg.data.seed, split_ids(cfg, "eval"), cfg.synth());

  SiameseModel<float> model(cfg.model, seed);
  Pretrainer<float> pt(model, PretrainSettings::from(cfg), cfg.train.schedule, cfg.train.adam, seed);
  if (resume && std::filesystem::exists(ckpt)) {
    const auto meta = read_checkpoint_meta(ckpt);
    if (meta.config_hash != config_hash(cfg)) {
      throw ConfigMismatchError("cannot resume " + ckpt.string() + ": config hash " + meta.config_hash + " differs from " +
                                config_hash(cfg));
    }
    pt.load(ckpt);
    log(Verbosity::info, "resumed at epoch " + std::to_string(pt.epoch()));
  }
  JsonLog jl(dir / "log.jsonl", resume);
  jl.write({{"event", "start"}, {"command", "pretrain"}, {"config_hash", config_hash(cfg)}, {"seed", seed}});

  EpochReport last;
  while (pt.epoch() < cfg.train.epochs) {
    last = pt.run_epoch(train, std::filesystem::exists(ckpt) ? ckpt.string() : "");
    pt.save(ckpt, to_json(cfg));
    jl.write(last.to_json());
    std::ostringstream msg;
    msg << "epoch " << last.epoch << " lr " << last.lr << " loss " << last.loss << " (c " << last.contrastive << ", rec "
        << last.reconstruction << ") " << last.wall_seconds << "s";
    log(Verbosity::info, msg.str());
  }
  if (!std::filesystem::exists(ckpt)) pt.save(ckpt, to_json(cfg));

  const auto r_train = evaluate_retrieval(model, train, cfg.eval.recall_k, cfg.eval.batch_size);
  const auto r_eval = evaluate_retrieval(model, eval, cfg.eval.recall_k, cfg.eval.batch_size);
  auto report = run_metadata(cfg);
  report["epochs"] = pt.epoch();
  report["history"] = pt.history();
  report["retrieval"] = {{"train", r_train.to_json()}, {"eval", r_eval.to_json()}};
  write_file_atomic(dir / "report.json", report.dump(2) + "\n");
  std::cout << "train retrieval (n=" << r_train.n << ")\n";
  print_retrieval(r_train);
  std::cout << "eval retrieval (n=" << r_eval.n << ")\n";
  print_retrieval(r_eval);
  std::cout << "wrote " << ckpt.string() << "\n";
  return 0;
}

int cmd_finetune(const CommonOptions& o, const std::string& init, const std::string& task) {
  std::uint64_t seed = 0;
  auto cfg = resolve_config(o, seed);
  if (o.epochs) cfg.finetune.epochs = *o.epochs;
  if (!task.empty()) cfg.finetune.task = parse_task(task);
  cfg.validate();
  announce("finetune", cfg);

  const auto dir = prepare_out(o.out);
  SiameseModel<float> model(cfg.model, seed);
  std::string init_hash = "none";
  if (init != "none") {
    const auto meta = load_model_weights<float>(init, model);
    init_hash = meta.config_hash;
    log(Verbosity::info, "initialized backbone from " + init + " (" + meta.kind + ", epoch " + std::to_string(meta.epoch) + ")");
  }
  const auto train = finetune_data(cfg, "train");
  const auto eval = finetune_data(cfg, "eval");
  Finetuner<float> ft(model, cfg.finetune, cfg.data.K, cfg.train.adam, cfg.train.clip_norm, seed);
  JsonLog jl(dir / "log.jsonl", false);
  jl.write({{"event", "start"}, {"command", "finetune"}, {"config_hash", config_hash(cfg)}, {"seed", seed}, {"init", init}});
  for (std::size_t e = 0; e < cfg.finetune.epochs; ++e) {
    const auto r = ft.run_epoch(train);
    jl.write(r.to_json());
    std::ostringstream msg;
    msg << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.loss << " " << r.wall_seconds << "s";
    log(Verbosity::info, msg.str());
  }
  const auto ckpt = dir / "checkpoint.avsm";
  ft.save(ckpt, to_json(cfg));

  auto report = run_metadata(cfg);
  report["init"] = init;
  report["init_config_hash"] = init_hash;
  report["task"] = task_name(cfg.finetune.task);
  report["eval"] = classification_report(ft, eval, cfg);
  write_file_atomic(dir / "report.json", report.dump(2) + "\n");
  for (const auto& [name, block] : report["eval"].items()) std::cout << "  " << name << " " << block.dump() << "\n";
  std::cout << "wrote " << ckpt.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& mode, const std::string& split, const std::string& out) {
  const auto meta = read_checkpoint_meta(ckpt);
  auto cfg = from_json(meta.config);
  cfg.validate();
  announce("eval " + mode, cfg);
  if (mode == "export" && out.empty()) throw ConfigError("--mode export needs --out");
  const auto dir = out.empty() ? std::filesystem::path() : prepare_out(out);
  auto emit = [&](json report) {
    if (dir.empty()) return;
    report.update(run_metadata(cfg));
    report["checkpoint"] = ckpt;
    report["mode"] = mode;
    write_file_atomic(dir / "report.json", report.dump(2) + "\n");
  };

  SiameseModel<float> model(cfg.model, cfg.train.seed);
  if (mode == "retrieval" || mode == "export") {
    load_model_weights<float>(ckpt, model);
    const auto data = Dataset<float>::generate(cfg.data.seed, split_ids(cfg, split), cfg.synth());
    if (mode == "export") {
      export_embeddings(model, data, dir / "embeddings.csv", cfg.eval.batch_size);
      std::cout << "wrote " << 2 * data.size() << " rows to " << (dir / "embeddings.csv").string() << "\n";
      return 0;
    }
    const auto r = evaluate_retrieval(model, data, cfg.eval.recall_k, cfg.eval.batch_size);
    std::cout << split << " retrieval (n=" << r.n << ")\n";
    print_retrieval(r);
    emit({{"split", split}, {"retrieval", r.to_json()}});
    return 0;
  }
  if (mode == "classify") {
    if (meta.kind != "finetune") throw ConfigMismatchError("--mode classify needs a finetune checkpoint, got " + meta.kind);
    Finetuner<float> ft(model, cfg.finetune, cfg.data.K, cfg.train.adam, cfg.train.clip_norm, cfg.train.seed);
    ft.load(ckpt);
    const auto rep = classification_report(ft, finetune_data(cfg, split), cfg);
    for (const auto& [name, block] : rep.items()) std::cout << "  " << name << " " << block.dump() << "\n";
    emit({{"split", split}, {"classification", rep}});
    return 0;
  }
  if (mode == "bench") {
    std::vector<RatioSet> sets;
    for (double r : cfg.eval.bench_ratios) sets.push_back(RatioSet{{r}});
    sets.push_back(cfg.ratios);
    const auto data = Dataset<float>::generate(cfg.data.seed, split_ids(cfg, "train"), cfg.synth());
    const auto reports = bench_masking(cfg.model, sets, data, cfg.eval.bench_batch, cfg.eval.bench_steps, 3,
                                       cfg.train.seed, PretrainSettings::from(cfg));
    json arr = json::array();
    for (const auto& r : reports) {
      std::cout << "  " << r.label << " " << r.samples_per_sec << " samples/s, " << r.measured_tokens_per_sample << "/"
                << r.total_tokens_per_sample << " tokens\n";
      arr.push_back(r.to_json());
    }
    emit({{"bench", arr}});
    return 0;
  }
  throw ConfigError("unknown eval mode '" + mode + "'");
}

int cmd_mel(const std::string& wav, const std::string& out, bool double_std) {
  const auto w = read_wav(wav);
  MelConfig mc;
  mc.double_std = double_std;
  if (w.sample_rate != mc.sample_rate) {
    throw InputError(wav + " is sampled at " + std::to_string(w.sample_rate) + " Hz; expected " +
                     std::to_string(mc.sample_rate));
  }
  const auto lm = log_mel(w.samples, mc);
  const auto dir = prepare_out(out);
  write_tensor(dir / "mel.avsm", "mel", lm.features);
  std::cout << lm.raw_frames << " frames -> " << mc.target_frames << "x" << mc.mel_bins << " written to "
            << (dir / "mel.avsm").string() << "\n";
  return 0;
}

void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--config", o.config_path, "JSON config overlaid on the profile")->check(CLI::ExistingFile);
  sub->add_option("--profile", o.profile, "default set")->check(CLI::IsMember({"tiny", "paper"}));
  sub->add_option("--seed", o.seed, "run seed (drawn and printed when omitted)");
  sub->add_option("--epochs", o.epochs, "override the epoch count");
  sub->add_option("--out", o.out, "output directory")->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"siamese audio-visual pretraining toolkit"};
  app.require_subcommand(1);

  CommonOptions pre_opts, ft_opts;
  std::string mask_ratios, init, task, ckpt, mode, split = "eval", eval_out, wav, mel_out;
  bool resume = false, double_std = false;

  auto* pre = app.add_subcommand("pretrain", "self-supervised pretraining");
  add_common(pre, pre_opts);
  pre->add_option("--mask-ratios", mask_ratios, "comma-separated ratio set, e.g. 0,0.1,0.2,0.3,0.4,0.5 or 0.75");
  pre->add_flag("--resume", resume, "continue from <out>/checkpoint.avsm when present");

  auto* ft = app.add_subcommand("finetune", "supervised finetuning with mixed-modality batches");
  add_common(ft, ft_opts);
  ft->add_option("--init", init, "pretrain checkpoint or 'none'")->required();
  ft->add_option("--task", task, "bce or ce")->check(CLI::IsMember({"bce", "ce"}));

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt, "checkpoint path")->required();
  ev->add_option("--mode", mode, "evaluation mode")->required()->check(CLI::IsMember({"retrieval", "classify", "bench", "export"}));
  ev->add_option("--split", split, "data split")->check(CLI::IsMember({"train", "eval"}));
  ev->add_option("--out", eval_out, "output directory (required for export)");

  auto* mel = app.add_subcommand("mel", "log-mel features of a 16 kHz mono WAV");
  mel->add_option("--wav", wav, "input WAV")->required();
  mel->add_option("--out", mel_out, "output directory")->required();
  mel->add_flag("--double-std", double_std, "normalize by twice the dataset std");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*pre) return cmd_pretrain(pre_opts, mask_ratios, resume);
    if (*ft) return cmd_finetune(ft_opts, init, task);
    if (*ev) return cmd_eval(ckpt, mode, split, eval_out);
    if (*mel) return cmd_mel(wav, mel_out, double_std);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigMismatchError& e) {
    std::cerr << "config mismatch: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
