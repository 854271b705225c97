#include <cstdlib>
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "facaid/evaluation.hpp"
#include "facaid/service.hpp"

using namespace facaid;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::BadInput, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadInput, path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  out << text;
  if (!out) throw Error(ErrorCode::SinkFailure, "cannot write " + path);
}

std::vector<DatasetRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::BadInput, "cannot open " + path);
  return read_dataset(in);
}

/// A layout file may hold a bare layout or a whole dataset record.
RectLayout read_layout(const std::string& path) {
  auto j = read_json(path);
  return layout_from_json(j.contains("layout") ? j["layout"] : j);
}

DerivationTree read_tree(const std::string& path) {
  auto j = read_json(path);
  return tree_from_json(j.contains("tree") ? j["tree"] : j);
}

std::string model_or_env(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("FACAID_MODEL")) return env;
  throw Error(ErrorCode::ModelUnavailable, "pass --model or set FACAID_MODEL");
}

std::vector<double> parse_levels(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stod(item));
  return out;
}

Service* running = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grammar-guided facade procedure inference"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  std::string config_path, log_level = "info";
  app.add_option("--seed", seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--config", config_path, "key = value settings file");
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off")->capture_default_str();

  // generate
  auto* gen = app.add_subcommand("generate", "Write a JSONL dataset of (layout, procedure) pairs");
  std::size_t count = 1000;
  unsigned workers = 1;
  std::string out_path = "-";
  gen->add_option("--count", count)->capture_default_str();
  gen->add_option("--workers", workers)->capture_default_str();
  gen->add_option("--out", out_path, "Output file, - for stdout")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "Train the sequence model");
  std::string data_path, model_out = "model.ckpt", report_path;
  std::size_t synth = 0;
  int epochs = 0;
  double lr = 0;
  tr->add_option("--data", data_path, "JSONL dataset");
  tr->add_option("--generate", synth, "Generate this many samples from --seed instead of reading --data");
  tr->add_option("--out", model_out)->capture_default_str();
  tr->add_option("--report", report_path, "Training report JSON");
  tr->add_option("--epochs", epochs, "Overrides train.epochs");
  tr->add_option("--lr", lr, "Overrides train.learning_rate");

  // infer
  auto* inf = app.add_subcommand("infer", "Infer a procedure from a layout");
  std::string model_path, layout_path, tree_out = "-";
  double temperature = 0;
  inf->add_option("--model", model_path, "Checkpoint; defaults to $FACAID_MODEL");
  inf->add_option("--layout", layout_path)->required();
  inf->add_option("--out", tree_out)->capture_default_str();
  inf->add_option("--temperature", temperature, "0 decodes greedily")->capture_default_str();

  // optimize
  auto* opt = app.add_subcommand("optimize", "Fit sizing parameters of a procedure to a layout");
  std::string tree_path, target_path, fitted_out = "-", trace_path;
  opt->add_option("--tree", tree_path)->required();
  opt->add_option("--target", target_path)->required();
  opt->add_option("--out", fitted_out)->capture_default_str();
  opt->add_option("--trace", trace_path, "CSV of iteration,loss");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a model on a test set");
  std::string testset_path, eval_report = "-", levels_text = "0,0.05,0.1,0.15,0.2";
  std::size_t limit = 0;
  ev->add_option("--model", model_path, "Checkpoint; defaults to $FACAID_MODEL");
  ev->add_option("--testset", testset_path)->required();
  ev->add_option("--report", eval_report)->capture_default_str();
  ev->add_option("--noise-levels", levels_text, "Comma separated, ascending from 0; empty skips")->capture_default_str();
  ev->add_option("--limit", limit, "Use only the first N records");

  // render
  auto* rn = app.add_subcommand("render", "Render a layout or procedure as SVG");
  std::string svg_out = "-";
  rn->add_option("--layout", layout_path);
  rn->add_option("--tree", tree_path);
  rn->add_option("--out", svg_out)->capture_default_str();

  // serve
  auto* sv = app.add_subcommand("serve", "Run the HTTP service");
  ServiceConfig scfg;
  sv->add_option("--host", scfg.host)->capture_default_str();
  sv->add_option("--port", scfg.port)->capture_default_str();
  sv->add_option("--model", model_path, "Checkpoint; defaults to $FACAID_MODEL when set");
  sv->add_flag("--cors", scfg.cors);
  sv->add_option("--static", scfg.static_dir, "Directory served at /");
  sv->add_option("--threads", scfg.threads)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    spdlog::set_level(spdlog::level::from_str(log_level));
    Settings settings;
    if (!config_path.empty()) settings = load_settings(config_path);

    if (gen->parsed()) {
      std::ofstream file;
      std::ostream* out = &std::cout;
      if (out_path != "-") {
        file.open(out_path);
        if (!file) throw Error(ErrorCode::SinkFailure, "cannot write " + out_path);
        out = &file;
      }
      *out << dataset_header(count, seed).dump() << '\n';
      auto stats = generate_dataset(count, seed, jsonl_sink(*out), workers);
      spdlog::info("wrote {} records", stats.records);
      return 0;
    }

    if (tr->parsed()) {
      const Vocabulary vocab;
      ModelConfig mc = desk_config(vocab);
      TrainConfig tc;
      tc.seed = seed;
      apply_settings(settings, mc);
      apply_settings(settings, tc);
      if (epochs > 0) tc.epochs = epochs;
      if (lr > 0) tc.learning_rate = lr;
      const Vocabulary model_vocab(mc.resolution);
      mc.vocab_size = model_vocab.size();
      std::vector<DatasetRecord> records;
      if (synth > 0) {
        for (std::size_t i = 0; i < synth; ++i) records.push_back(generate_record(seed, i));
      } else {
        if (data_path.empty()) throw Error(ErrorCode::BadInput, "pass --data or --generate");
        records = read_records(data_path);
      }
      std::vector<Example> data;
      for (const auto& r : records) data.push_back(make_example(r, model_vocab));
      Model model(mc, seed);
      spdlog::info("training {} parameters on {} samples", model.parameter_count(), data.size());
      auto report = train(model, data, tc, [&](const EpochStats& e, const Model& m) {
        spdlog::info("epoch {} train {:.5f} validation {:.5f} ({:.0f} s)", e.epoch, e.train_loss,
                     e.validation_loss, e.seconds);
        save_checkpoint(model_out, m, model_vocab);
      });
      save_checkpoint(model_out, model, model_vocab);
      if (!report_path.empty()) write_text(report_path, report_to_json(report).dump(2) + "\n");
      return 0;
    }

    if (inf->parsed()) {
      const auto model = load_checkpoint(model_or_env(model_path));
      const Vocabulary vocab(model.config().resolution);
      DecodeConfig dc;
      dc.seed = seed;
      apply_settings(settings, dc);
      if (temperature > 0) dc.temperature = temperature;
      auto out = infer_procedure(model, read_layout(layout_path), vocab, dc);
      write_text(tree_out, tree_to_json(out.tree).dump(2) + "\n");
      return 0;
    }

    if (opt->parsed()) {
      OptimizeConfig oc;
      apply_settings(settings, oc);
      auto fit = optimize_sizing(read_tree(tree_path), read_layout(target_path), oc);
      spdlog::info("{} iterations, loss {:.6f} -> {:.6f}", fit.iterations, fit.trace.front(), fit.trace.back());
      write_text(fitted_out, tree_to_json(fit.tree).dump(2) + "\n");
      if (!trace_path.empty()) {
        std::string csv = "iteration,loss\n";
        for (std::size_t i = 0; i < fit.trace.size(); ++i)
          csv += std::to_string(i + 1) + "," + detail::num(fit.trace[i]) + "\n";
        write_text(trace_path, csv);
      }
      return 0;
    }

    if (ev->parsed()) {
      const auto model = load_checkpoint(model_or_env(model_path));
      const Vocabulary vocab(model.config().resolution);
      auto records = read_records(testset_path);
      if (limit > 0 && records.size() > limit) records.resize(limit);
      auto report = evaluate(model, records, vocab);
      if (!levels_text.empty()) report.noise = noise_robustness_curve(model, records, parse_levels(levels_text), seed, vocab);
      auto j = report_to_json(report);
      spdlog::info("median TED {} over {} samples", j["ted"]["median"].get<double>(), records.size());
      write_text(eval_report, j.dump(2) + "\n");
      return 0;
    }

    if (rn->parsed()) {
      if (layout_path.empty() == tree_path.empty()) throw Error(ErrorCode::BadInput, "pass exactly one of --layout, --tree");
      const auto layout = layout_path.empty() ? execute(read_tree(tree_path)) : read_layout(layout_path);
      write_text(svg_out, render_svg(layout));
      return 0;
    }

    if (sv->parsed()) {
      apply_settings(settings, scfg);
      if (!model_path.empty()) scfg.model_path = model_path;
      else if (const char* env = std::getenv("FACAID_MODEL"); env && scfg.model_path.empty()) scfg.model_path = env;
      Service service(scfg);
      service.bind();
      running = &service;
      std::signal(SIGINT, [](int) { if (running) running->stop(); });
      std::signal(SIGTERM, [](int) { if (running) running->stop(); });
      spdlog::info("listening on {}:{}{}", scfg.host, scfg.port, service.has_model() ? "" : " (no model)");
      service.listen();
      return 0;
    }
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
