// Command-line front end for the quantization pipeline.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "moeq/error.hpp"
#include "moeq/formats.hpp"
#include "moeq/harness.hpp"
#include "moeq/reports.hpp"

namespace {

using namespace moeq;
namespace fs = std::filesystem;

struct Options {
  std::string model;
  std::string qmodel;
  std::vector<std::string> streams;
  std::string shift;
  std::uint64_t seed = 42;
  std::string params;
  std::string out;
  bool json = false;

  // gen-stream
  std::string mix = "0.5,0.5";
  std::size_t length = 0;
  std::optional<std::uint64_t> stream_seed;
  bool text = false;

  // gen-model
  std::optional<double> concentration;

  std::size_t top_channels = 8;
  bool serial = false;
};

Execution exec_of(const Options& o) { return o.serial ? Execution::serial : Execution::parallel; }

PipelineParams params_of(const Options& o) {
  if (o.params.empty()) return PipelineParams{};
  return load_params(o.params);
}

std::vector<TokenStream> streams_of(const Options& o) {
  if (o.streams.empty()) throw InputError("at least one --stream is required");
  std::vector<TokenStream> out;
  for (const auto& p : o.streams) out.push_back(load_tokens(p));
  return out;
}

const std::string& require(const std::string& value, const char* flag) {
  if (value.empty()) throw InputError(std::string(flag) + " is required");
  return value;
}

std::vector<double> parse_mix(const std::string& text) {
  std::vector<double> mix;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      mix.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw InputError("--mix: '" + item + "' is not a number");
    }
  }
  return mix;
}

// Writes the JSON report to stdout when --json is given, otherwise prints the
// text summary.
void emit(const Options& o, const Json& report, const std::string& text) {
  if (o.json)
    std::cout << report.dump(2) << '\n';
  else
    std::cout << text;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

Json with_timings(Json report, const PhaseTimings& timings) {
  report["timings"] = timings_json(timings);
  return report;
}

void cmd_gen_model(const Options& o) {
  SyntheticSpec spec = desk_spec(o.seed);
  if (o.concentration) spec.concentration = *o.concentration;
  const MoEModel model = generate_model(spec);
  save_model(require(o.out, "--out"), model);
  const auto& c = model.config;
  Json r{{"out", o.out},
         {"seed", o.seed},
         {"concentration", spec.concentration},
         {"config",
          {{"num_layers", c.num_layers}, {"experts_per_layer", c.experts_per_layer}, {"hidden_dim", c.hidden_dim},
           {"ffn_dim", c.ffn_dim}, {"top_k", c.top_k}, {"vocab_size", c.vocab_size}}}};
  emit(o, r, "wrote model " + o.out + " (seed " + std::to_string(o.seed) + ")\n");
}

void cmd_gen_stream(const Options& o) {
  const SyntheticSpec spec = desk_spec(o.seed);
  const auto mix = parse_mix(o.mix);
  const std::uint64_t seed = o.stream_seed.value_or(derive_seed(o.seed, 1000));
  const std::size_t length = o.length == 0 ? spec.stream_length : o.length;
  const fs::path out = require(o.out, "--out");
  const TokenStream s = generate_stream(spec, mix, seed, length, out.stem().string());
  save_tokens(out, s, o.text);
  Json r{{"out", o.out}, {"tokens", s.size()}, {"mix", mix}, {"stream_seed", seed}, {"text", o.text}};
  emit(o, r, "wrote " + std::to_string(s.size()) + " tokens to " + o.out + "\n");
}

void cmd_analyze(const Options& o) {
  const MoEModel model = load_model(require(o.model, "--model"));
  const auto streams = streams_of(o);
  std::vector<SignificanceProfile> profiles;
  for (const auto& s : streams) profiles.push_back(analyze(model, s, exec_of(o)));
  const JointProfile joint = synthesize_joint(profiles);

  Json r;
  r["profiles"] = Json::array();
  for (const auto& p : profiles) r["profiles"].push_back(significance_json(p, o.top_channels));
  r["joint"] = joint_json(joint);
  if (!o.out.empty()) write_text_atomic(o.out, r.dump(2) + "\n");

  std::ostringstream text;
  for (const auto& p : profiles) {
    text << p.dataset << ": " << p.token_count << " tokens\n";
    for (std::size_t l = 0; l < p.expert.size(); ++l) {
      const auto& row = p.expert[l];
      const auto top = std::max_element(row.begin(), row.end()) - row.begin();
      text << "  layer " << l << ": top expert " << top << " S_exp " << fmt(row[top]) << "\n";
    }
  }
  emit(o, r, text.str());
}

void cmd_quantize(const Options& o) {
  const MoEModel model = load_model(require(o.model, "--model"));
  const auto streams = streams_of(o);
  const PipelineParams params = params_of(o);
  const fs::path out = require(o.out, "--out");
  const OfflineResult res = run_offline(model, streams, params, exec_of(o));
  save_qmodel(out, res.qmodel);

  Json r;
  r["out"] = o.out;
  r["assignment"] = assignment_json(res.clustering, res.qmodel);
  r["joint"] = joint_json(res.joint);
  r["cache"] = {{"entries", res.qmodel.cache->size()}, {"bytes", res.qmodel.cache->byte_size()}};
  r = with_timings(std::move(r), res.timings);
  emit(o, r,
       "wrote " + o.out + ": average bits " + fmt(res.qmodel.average_bits(), 3) + ", cache " +
           std::to_string(res.qmodel.cache->size()) + " channels\n");
}

void cmd_switch(const Options& o) {
  const QuantizedModel q = load_qmodel(require(o.qmodel, "--qmodel"));
  std::optional<MoEModel> reference;
  if (!o.model.empty()) reference = load_model(o.model);
  const auto streams = streams_of(o);
  if (streams.size() != 1) throw InputError("switch takes exactly one --stream");
  const PipelineParams params = params_of(o);
  const OnlineResult res = run_online(q, reference ? &*reference : nullptr, streams[0], params, exec_of(o));
  if (!o.out.empty()) save_qmodel(o.out, res.switched);

  Json r;
  r["significance_source"] = res.significance_source;
  r["probe_tokens"] = res.probe_tokens;
  r["plan"] = plan_json(res.plan);
  r["average_bits"] = res.switched.average_bits();
  if (res.before) r["fidelity_before"] = fidelity_json(*res.before);
  if (res.after) r["fidelity_after"] = fidelity_json(*res.after);
  r = with_timings(std::move(r), res.timings);

  std::string text = "changed experts: " + std::to_string(res.plan.changed_count()) + " (significance from " +
                     res.significance_source + ")\n";
  if (res.before && res.after)
    text += "fidelity error: " + fmt(res.before->relative_l2) + " -> " + fmt(res.after->relative_l2) + "\n";
  text += "switch fraction of online time: " + fmt(res.timings.fraction_of("switch")) + "\n";
  emit(o, r, text);
}

void cmd_infer(const Options& o) {
  const QuantizedModel q = load_qmodel(require(o.qmodel, "--qmodel"));
  const auto streams = streams_of(o);
  Json r;
  r["streams"] = Json::array();
  std::ostringstream text;
  std::optional<MoEModel> reference;
  if (!o.model.empty()) reference = load_model(o.model);
  for (const auto& s : streams) {
    const Matrix hidden = forward_quantized(q, s, exec_of(o));
    double sum_sq = 0.0;
    for (float v : hidden.values()) sum_sq += static_cast<double>(v) * v;
    Json entry{{"stream", s.name}, {"tokens", s.size()}, {"hidden_rms", std::sqrt(sum_sq / hidden.size())}};
    text << s.name << ": " << s.size() << " tokens";
    if (reference) {
      const FidelityReport f = measure_fidelity(q, *reference, s, exec_of(o));
      entry["fidelity"] = fidelity_json(f);
      text << ", fidelity error " << fmt(f.relative_l2);
    }
    text << "\n";
    r["streams"].push_back(entry);
  }
  if (!o.out.empty()) write_text_atomic(o.out, r.dump(2) + "\n");
  emit(o, r, text.str());
}

void cmd_traffic(const Options& o) {
  const QuantizedModel q = load_qmodel(require(o.qmodel, "--qmodel"));
  const auto streams = streams_of(o);
  Json r = Json::array();
  std::ostringstream text;
  for (const auto& s : streams) {
    const TrafficReport t = estimate_traffic(q, s, exec_of(o));
    Json entry = traffic_json(t);
    entry["stream"] = s.name;
    entry["average_bits"] = q.average_bits();
    r.push_back(entry);
    text << s.name << ": " << t.quantized_bytes << " / " << t.baseline_bytes << " bytes, ratio " << fmt(t.ratio)
         << "\n";
  }
  emit(o, r, text.str());
}

void cmd_ablate(const Options& o) {
  const PipelineParams params = params_of(o);
  MoEModel model;
  std::vector<TokenStream> calibration;
  TokenStream shifted;
  if (o.model.empty()) {
    const DeskExperiment x = desk_experiment(o.seed);
    model = x.model();
    calibration = x.calibration();
    shifted = x.shift();
  } else {
    model = load_model(o.model);
    calibration = streams_of(o);
    shifted = load_tokens(require(o.shift, "--shift"));
  }
  const AblationTable table = eval_ablation(model, calibration, shifted, params, exec_of(o));
  Json r = ablation_json(table);
  if (o.model.empty()) r["seed"] = o.seed;
  if (!o.out.empty()) write_text_atomic(o.out, r.dump(2) + "\n");

  std::ostringstream text;
  text << std::left << std::setw(14) << "method" << std::setw(10) << "avg bits" << std::setw(14) << "err(calib)"
       << std::setw(14) << "err(shift)" << "changed\n";
  for (const auto& row : table.rows) {
    text << std::setw(14) << row.name << std::setw(10) << fmt(row.average_bits, 3) << std::setw(14)
         << (row.error_calibration ? fmt(*row.error_calibration) : "-") << std::setw(14)
         << (row.error_shift ? fmt(*row.error_shift) : "-") << row.changed_experts << "\n";
  }
  emit(o, r, text.str());
}

void cmd_report(const Options& o) {
  if (!o.qmodel.empty()) {
    const QuantizedModel q = load_qmodel(o.qmodel);
    const Json r = qmodel_json(q);
    std::ostringstream text;
    text << o.qmodel << ": " << q.config.num_layers << " layers x " << q.config.experts_per_layer
         << " experts, average bits " << fmt(q.average_bits(), 3) << ", payload " << q.payload_bytes() << " bytes";
    if (q.cache) text << ", cache " << q.cache->size() << " channels / " << q.cache->byte_size() << " bytes";
    text << "\n";
    emit(o, r, text.str());
    return;
  }
  const MoEModel model = load_model(require(o.model, "--model or --qmodel"));
  const auto& c = model.config;
  Json r{{"config",
          {{"num_layers", c.num_layers}, {"experts_per_layer", c.experts_per_layer}, {"hidden_dim", c.hidden_dim},
           {"ffn_dim", c.ffn_dim}, {"top_k", c.top_k}, {"vocab_size", c.vocab_size}}}};
  emit(o, r,
       o.model + ": " + std::to_string(c.num_layers) + " layers x " + std::to_string(c.experts_per_layer) +
           " experts, d=" + std::to_string(c.hidden_dim) + ", f=" + std::to_string(c.ffn_dim) +
           ", K=" + std::to_string(c.top_k) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-precision MoE quantization with dynamic switching"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "Seed of the synthetic desk experiment");
    sub->add_option("--params", o.params, "key = value config file");
    sub->add_option("--out", o.out, "Output path");
    sub->add_flag("--json", o.json, "Print a machine-readable report");
    sub->add_flag("--serial", o.serial, "Use the serial reference kernels");
  };
  auto model_opt = [&](CLI::App* sub) { sub->add_option("--model", o.model, "Reference model (DMOE)"); };
  auto qmodel_opt = [&](CLI::App* sub) { sub->add_option("--qmodel", o.qmodel, "Quantized model (DMQZ)"); };
  auto stream_opt = [&](CLI::App* sub) {
    sub->add_option("--stream", o.streams, "Token file (repeatable)")->take_all();
  };

  std::vector<std::pair<CLI::App*, void (*)(const Options&)>> commands;
  auto add = [&](const char* name, const char* help, void (*fn)(const Options&)) {
    CLI::App* sub = app.add_subcommand(name, help);
    common(sub);
    commands.emplace_back(sub, fn);
    return sub;
  };

  auto* gm = add("gen-model", "Generate the synthetic desk model", cmd_gen_model);
  gm->add_option("--concentration", o.concentration, "Routing concentration (default 10)");

  auto* gs = add("gen-stream", "Sample a token stream from the desk generator", cmd_gen_stream);
  gs->add_option("--mix", o.mix, "Comma-separated group probabilities");
  gs->add_option("--length", o.length, "Token count (default 2048)");
  gs->add_option("--stream-seed", o.stream_seed, "Sampling seed (default derived from --seed)");
  gs->add_flag("--text", o.text, "Write the TXT1 text format");

  auto* an = add("analyze", "Channel and expert significance of streams", cmd_analyze);
  model_opt(an);
  stream_opt(an);
  an->add_option("--top-channels", o.top_channels, "Channels listed per layer");

  auto* qz = add("quantize", "Offline pipeline: cluster, quantize, build cache", cmd_quantize);
  model_opt(qz);
  stream_opt(qz);

  auto* sw = add("switch", "Online pipeline: profile a new stream and switch", cmd_switch);
  model_opt(sw);
  qmodel_opt(sw);
  stream_opt(sw);

  auto* in = add("infer", "Run a quantized model over streams", cmd_infer);
  model_opt(in);
  qmodel_opt(in);
  stream_opt(in);

  auto* tr = add("traffic", "Estimate weight traffic against a binary16 baseline", cmd_traffic);
  qmodel_opt(tr);
  stream_opt(tr);

  auto* ab = add("ablate", "uniform-int4 vs BQ vs BQ+DQS", cmd_ablate);
  model_opt(ab);
  stream_opt(ab);
  ab->add_option("--shift", o.shift, "Shifted token file (with --model)");

  auto* rp = add("report", "Summarize a model file", cmd_report);
  model_opt(rp);
  qmodel_opt(rp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code(ErrorKind::input);
  }

  try {
    for (const auto& [sub, fn] : commands)
      if (sub->parsed()) fn(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(ErrorKind::input);
  }
  return 0;
}
