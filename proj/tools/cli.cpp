// Copyright 2026-present the instir authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "cli.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#include "instir/analytics.hpp"
#include "instir/corpus.hpp"
#include "instir/error.hpp"
#include "instir/eval.hpp"
#include "instir/log.hpp"
#include "instir/synth.hpp"
#include "instir/testbed.hpp"
#include "instir/trainer.hpp"
#include "instir/util.hpp"

namespace instir::cli {

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::atomic<bool> g_stop{false};

extern "C" void on_interrupt(int) { g_stop.store(true); }

std::string variant_names() {
  std::string out;
  for (const auto& v : all_variants()) out += (out.empty() ? "" : ", ") + v.name();
  return out;
}

LossVariant variant_or_usage(const std::string& name) {
  try {
    return LossVariant::parse(name);
  } catch (const ConfigError&) {
    throw UsageError("invalid loss variant '" + name + "'; valid variants: " + variant_names());
  }
}

Interaction interaction_or_usage(const std::string& name) {
  try {
    return parse_interaction(name);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

std::string json_text(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

/// Train and provider settings from an optional key-value file.
struct ModelSettings {
  TrainConfig train;
  ProviderConfig provider;
};

ModelSettings load_settings(const std::string& path) {
  ModelSettings s;
  if (path.empty()) {
    s.provider.pooling = s.train.pooling;
    s.provider.share_encoder = s.train.share_encoder;
    return s;
  }
  KeyValueFile kv = KeyValueFile::parse(read_file(path), path);
  s.train = train_config_from(kv);
  s.provider = provider_config_from(kv);
  kv.reject_unused();
  s.provider.pooling = s.train.pooling;
  s.provider.share_encoder = s.train.share_encoder;
  return s;
}

ChatClientConfig chat_config_from(KeyValueFile& kv, const std::string& prefix, const ChatClientConfig& base) {
  ChatClientConfig c = base;
  auto num = [&](const std::string& key, const std::string& v) {
    try {
      return std::stod(v);
    } catch (const std::logic_error&) {
      throw ConfigError(kv.source + ": " + key + ": expected a number, got '" + v + "'");
    }
  };
  if (auto v = kv.take(prefix + "endpoint_url")) c.endpoint_url = *v;
  if (auto v = kv.take(prefix + "model_name")) c.model_name = *v;
  if (auto v = kv.take(prefix + "api_key_env")) c.api_key_env = *v;
  if (auto v = kv.take(prefix + "timeout_seconds")) c.timeout_seconds = num(prefix + "timeout_seconds", *v);
  if (auto v = kv.take(prefix + "max_attempts")) c.max_attempts = static_cast<int>(num(prefix + "max_attempts", *v));
  if (auto v = kv.take(prefix + "backoff_seconds")) c.backoff_seconds = num(prefix + "backoff_seconds", *v);
  if (auto v = kv.take(prefix + "temperature")) c.temperature = num(prefix + "temperature", *v);
  return c;
}

RetrieverModel model_from_checkpoint(const std::string& path, const std::string& config_path) {
  LoadedCheckpoint ck = load_checkpoint(path);
  const auto& extra = ck.header.extra;
  ProviderConfig provider;
  Interaction interaction = Interaction::kConcat;
  if (!config_path.empty()) {
    ModelSettings s = load_settings(config_path);
    provider = s.provider;
    interaction = s.train.interaction;
  } else {
    if (!extra.contains("provider")) {
      throw UsageError("checkpoint " + path + " records no provider settings; pass --config");
    }
    provider = provider_config_from_json(extra.at("provider"));
    if (extra.contains("interaction")) interaction = parse_interaction(extra.at("interaction").get<std::string>());
  }
  if (provider.dim != ck.params.dim) {
    throw ConfigError("provider dim " + std::to_string(provider.dim) + " does not match checkpoint dim " +
                      std::to_string(ck.params.dim));
  }
  RetrieverModel m{make_encoders(provider), std::move(ck.params), interaction};
  return m;
}

RetrieverModel baseline_model(const std::string& config_path) {
  const ModelSettings s = load_settings(config_path);
  return RetrieverModel{make_encoders(s.provider),
                        init_params(s.provider.dim, s.train.seed, s.train.init_scheme, s.train.projection),
                        s.train.interaction};
}

// ---------------------------------------------------------------------------

struct SynthOptions {
  std::string seeds;
  std::string out;
  std::string config;
  std::string mock_script;
  std::size_t max_parallel = 4;
  std::size_t max_families = 0;
  std::size_t distractors = 3;
  std::uint64_t seed = 0;
  bool resume = false;
  bool allow_empty = false;
};

int cmd_synth(const SynthOptions& o, CLI::App& sub, std::ostream& out) {
  PipelineConfig pc;
  pc.max_parallel = o.max_parallel;
  pc.distractors = o.distractors;
  pc.seed = o.seed;
  std::unique_ptr<ChatClient> generator;
  std::unique_ptr<ChatClient> judge;
  if (!o.mock_script.empty()) {
    generator = std::make_unique<ScriptedChatClient>(ScriptedChatClient::load(o.mock_script));
    judge = std::make_unique<ScriptedChatClient>(ScriptedChatClient::load(o.mock_script));
  } else {
    if (o.config.empty()) throw UsageError("synth needs --config (live chat service) or --mock-script");
    KeyValueFile kv = KeyValueFile::parse(read_file(o.config), o.config);
    ChatClientConfig defaults;
    defaults.api_key_env = "INSTIR_API_KEY";
    const ChatClientConfig gen_cfg = chat_config_from(kv, "generator.", defaults);
    const ChatClientConfig judge_cfg = chat_config_from(kv, "judge.", gen_cfg);
    if (auto v = kv.take("pipeline.max_parallel"); v && !sub.count("--max-parallel")) pc.max_parallel = std::stoul(*v);
    if (auto v = kv.take("pipeline.distractors"); v && !sub.count("--distractors")) pc.distractors = std::stoul(*v);
    if (auto v = kv.take("pipeline.seed"); v && !sub.count("--seed")) pc.seed = std::stoull(*v);
    kv.reject_unused();
    generator = std::make_unique<HttpChatClient>(gen_cfg);
    judge = std::make_unique<HttpChatClient>(judge_cfg);
  }
  const auto seeds = load_seed_pairs(o.seeds);
  pc.work_dir = o.out + "/work";
  pc.resume = o.resume;
  pc.max_families = o.max_families;
  pc.stop = &g_stop;

  g_stop.store(false);
  auto previous = std::signal(SIGINT, on_interrupt);
  PipelineResult r;
  try {
    r = run_pipeline(seeds, *generator, *judge, pc);
  } catch (...) {
    std::signal(SIGINT, previous);
    throw;
  }
  std::signal(SIGINT, previous);

  save_corpus(r.corpus, o.out + "/corpus.jsonl");
  write_file_atomic(o.out + "/report.json", json_text(r.report.to_json()));
  out << json_text(r.report.to_json());
  if (g_stop.load()) {
    log_warn("synth_interrupted", {{"pending", r.report.pending}, {"hint", "re-run with --resume"}});
    return kExitFailure;
  }
  if (r.report.retained == 0 && !o.allow_empty) {
    log_warn("synth_empty", {{"hint", "no family was retained; pass --allow-empty to accept"}});
    return kExitFailure;
  }
  return kExitOk;
}

int cmd_stats(const std::string& corpus_path, const std::string& out_path, bool strict, std::ostream& out) {
  const Corpus corpus = load_corpus(corpus_path);
  nlohmann::ordered_json j = to_json(corpus_stats(corpus));
  std::size_t invalid = 0;
  nlohmann::ordered_json examples = nlohmann::ordered_json::array();
  for (const auto& f : corpus) {
    const auto v = validate_family(f);
    if (v.empty()) continue;
    ++invalid;
    if (examples.size() < 10) examples.push_back({{"id", f.id}, {"field", v.front().field}, {"rule", v.front().rule}});
  }
  j["invalid_families"] = invalid;
  if (invalid) j["violations"] = examples;
  if (!out_path.empty()) write_file_atomic(out_path, json_text(j));
  out << json_text(j);
  return strict && invalid ? kExitFailure : kExitOk;
}

int cmd_flatten(const std::string& corpus_path, const std::string& out_path, std::ostream& out) {
  const FlatCorpus flat = flatten_training_tuples(load_corpus(corpus_path));
  write_file_atomic(out_path, serialize_flat(flat));
  out << "families " << flat.n_families() << ", tuples " << flat.tuples.size() << ", skipped " << flat.skipped
      << "\n";
  return kExitOk;
}

struct TrainOptionsCli {
  std::string corpus;
  std::string config;
  std::string out;
  std::string variant;
  std::string interaction;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::size_t batch_size = 0;
  std::size_t grad_accum = 0;
  double lr = 0.0;
  double tau = 0.0;
};

int cmd_train(const TrainOptionsCli& o, CLI::App& sub, std::ostream& out) {
  ModelSettings s = load_settings(o.config);
  TrainConfig& c = s.train;
  if (sub.count("--variant")) c.variant = variant_or_usage(o.variant);
  if (sub.count("--interaction")) c.interaction = interaction_or_usage(o.interaction);
  if (sub.count("--seed")) c.seed = o.seed;
  if (sub.count("--epochs")) c.epochs = o.epochs;
  if (sub.count("--batch-size")) c.batch_size = o.batch_size;
  if (sub.count("--grad-accum")) c.grad_accum = o.grad_accum;
  if (sub.count("--lr")) c.lr = o.lr;
  if (sub.count("--tau")) c.tau = o.tau;
  c.validate();

  const FlatCorpus flat = flatten_training_tuples(load_corpus(o.corpus));
  const EncoderPair enc = make_encoders(s.provider);
  std::filesystem::create_directories(o.out);
  write_file_atomic(o.out + "/train_config.toml", to_key_values(c));
  TrainOptions opts;
  opts.out_dir = o.out;
  opts.header_extra["provider"] = to_json(s.provider);
  const TrainResult r = train(flat, enc, c, opts);

  out << "variant " << c.variant.name() << ", steps " << r.history.size() << "\n";
  for (std::size_t e = 0; e < r.epoch_mean_loss.size(); ++e) {
    out << "epoch " << e + 1 << " mean_loss " << std::setprecision(10) << r.epoch_mean_loss[e] << "\n";
  }
  out << "final_loss " << std::setprecision(10) << (r.history.empty() ? 0.0 : r.history.back().loss) << "\n";
  out << "checkpoint " << o.out << "/final.ckpt\n";
  return kExitOk;
}

struct GradCheckCli {
  std::string variant = "multi:P,I,IQ";
  std::string interaction = "concat";
  bool all_variants = false;
  std::size_t instances = 10;
  double tolerance = 1e-4;
  std::uint64_t seed = 7;
  int dim = 6;
  std::string out;
};

int cmd_grad_check(const GradCheckCli& o, std::ostream& out) {
  std::vector<LossVariant> variants;
  if (o.all_variants) {
    variants = all_variants();
  } else {
    variants.push_back(variant_or_usage(o.variant));
  }
  std::vector<Interaction> interactions;
  if (o.interaction == "both") {
    interactions = {Interaction::kConcat, Interaction::kCrossAttention};
  } else {
    interactions = {interaction_or_usage(o.interaction)};
  }
  if (!(o.tolerance > 0.0)) throw UsageError("--tolerance must be positive");
  bool passed = true;
  nlohmann::ordered_json all = nlohmann::ordered_json::array();
  for (Interaction inter : interactions) {
    for (const auto& v : variants) {
      TrainConfig c;
      c.variant = v;
      c.interaction = inter;
      GradCheckOptions go;
      go.seed = o.seed;
      go.dim = o.dim;
      const GradCheckReport r = grad_check(c, o.instances, o.tolerance, go);
      double worst = 0.0;
      for (const auto& [name, e] : r.max_rel_error) worst = std::max(worst, e);
      out << (r.passed ? "pass " : "FAIL ") << std::left << std::setw(16) << to_string(inter) << std::setw(14)
          << v.name() << " instances " << r.instances.size() << " max_rel_error " << std::scientific
          << std::setprecision(3) << worst << std::defaultfloat << "\n";
      nlohmann::ordered_json j = r.to_json();
      j["interaction"] = to_string(inter);
      all.push_back(j);
      passed = passed && r.passed;
    }
  }
  if (!o.out.empty()) write_file_atomic(o.out, json_text(all));
  return passed ? kExitOk : kExitFailure;
}

struct EvalCli {
  std::string dataset;
  std::string checkpoint;
  std::string config;
  std::string out;
  bool baseline = false;
  std::size_t k = 5;
};

int cmd_eval(const EvalCli& o, std::ostream& out) {
  if (o.checkpoint.empty() == !o.baseline) throw UsageError("eval needs exactly one of --checkpoint or --baseline");
  const RetrieverModel model = o.baseline ? baseline_model(o.config) : model_from_checkpoint(o.checkpoint, o.config);
  EvalConfig cfg;
  cfg.k = o.k;
  if (!o.out.empty()) std::filesystem::create_directories(o.out);
  const MetricReport r = evaluate_suite(model, o.dataset, cfg, o.out);
  out << r.to_text();
  return kExitOk;
}

int cmd_report(const std::vector<std::string>& inputs, std::ostream& out) {
  std::size_t w = 6;
  for (const auto& p : inputs) w = std::max(w, p.size());
  out << std::left << std::setw(static_cast<int>(w)) << "report" << "  " << std::setw(8) << "queries" << std::setw(9)
      << "MAP" << std::setw(9) << "nDCG@k" << "p-MRR\n";
  for (const auto& p : inputs) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(p));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(p, 0, e.what());
    }
    auto fmt = [](double v) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(4) << v;
      return s.str();
    };
    out << std::left << std::setw(static_cast<int>(w)) << p << "  " << std::setw(8)
        << j.at("n_queries").get<std::size_t>() << std::setw(9) << fmt(j.at("map").get<double>()) << std::setw(9)
        << fmt(j.at("ndcg_at_k").get<double>()) << fmt(j.at("p_mrr").get<double>()) << "\n";
  }
  return kExitOk;
}

std::vector<std::string> read_label_column(const std::string& path, std::vector<std::string>& second) {
  std::vector<std::string> first;
  std::size_t line_no = 0;
  for (const auto& line : split(read_file(path), '\n')) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split(line, '\t');
    if (cells.size() != 2) throw ParseError(path, line_no, "expected two tab-separated labels");
    first.push_back(trim(cells[0]));
    second.push_back(trim(cells[1]));
  }
  return first;
}

struct TestbedCli {
  std::string out;
  std::uint64_t seed = 0;
  std::size_t train = 200;
  std::size_t eval = 50;
  std::size_t topic_words = 3;
  int dim = 32;
  int fail_scenario = -1;
  bool balance = true;
};

int cmd_testbed(const TestbedCli& o, std::ostream& out) {
  WorldConfig wc;
  wc.seed = o.seed;
  wc.train_families = o.train;
  wc.eval_families = o.eval;
  wc.topic_words = o.topic_words;
  ProviderConfig pc;
  pc.dim = o.dim;
  pc.seed = o.seed;
  if (o.balance) wc.balance_provider = make_encoders(pc).passage;
  const SyntheticWorld world(wc);
  std::filesystem::create_directories(o.out);
  world.write_seeds(o.out + "/seeds.jsonl");
  world.write_script(o.out + "/script.jsonl", o.fail_scenario);
  world.write_eval_dataset(o.out + "/eval");
  std::string toml = "seed = " + std::to_string(o.seed) + "\nvariant = \"multi:P,I\"\n\n[provider]\nkind = \"hash\"\n" +
                     "dim = " + std::to_string(o.dim) + "\nseed = " + std::to_string(o.seed) + "\n";
  write_file_atomic(o.out + "/train.toml", toml);
  out << "wrote " << o.out << "/{seeds.jsonl,script.jsonl,train.toml,eval/}\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"instir: instruction-following retrieval toolkit", "instir"};
  app.require_subcommand(1);
  bool log_json = false;
  bool verbose = false;
  app.add_flag("--log-json", log_json, "Emit structured logs as JSON lines on stderr");
  app.add_flag("-v,--verbose", verbose, "Log debug events");

  int code = kExitOk;

  // synth
  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "Generate triplet families from seed pairs");
  synth->add_option("--seeds", so.seeds, "Seed pairs (.jsonl of {id, query, passage})")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", so.out, "Output directory (corpus.jsonl, report.json, work/)")->required();
  synth->add_option("--config", so.config, "Chat client settings: generator.*, judge.*, pipeline.* keys");
  synth->add_option("--mock-script", so.mock_script, "Scripted responses (.jsonl) used instead of a live service")
      ->check(CLI::ExistingFile);
  synth->add_option("--max-parallel", so.max_parallel, "Concurrent families")->check(CLI::PositiveNumber);
  synth->add_option("--max-families", so.max_families, "Stop after this many unfinished families (0: all)");
  synth->add_option("--distractors", so.distractors, "Distractor passages per judge scenario");
  synth->add_option("--seed", so.seed, "Seed for distractor sampling and presentation order");
  synth->add_flag("--resume", so.resume, "Continue from work/results.jsonl");
  synth->add_flag("--allow-empty", so.allow_empty, "Exit 0 even when no family is retained");

  // stats
  std::string stats_corpus, stats_out;
  bool stats_strict = false;
  auto* stats = app.add_subcommand("stats", "Corpus statistics and invariant check");
  stats->add_option("--corpus", stats_corpus, "Corpus (.jsonl)")->required()->check(CLI::ExistingFile);
  stats->add_option("--out", stats_out, "Also write the statistics to this file");
  stats->add_flag("--strict", stats_strict, "Exit 1 when a family violates an invariant");

  // flatten
  std::string flat_corpus, flat_out;
  auto* flatten = app.add_subcommand("flatten", "Flatten retained families into training tuples");
  flatten->add_option("--corpus", flat_corpus, "Corpus (.jsonl)")->required()->check(CLI::ExistingFile);
  flatten->add_option("--out", flat_out, "Output JSON file")->required();

  // train
  TrainOptionsCli to;
  auto* trn = app.add_subcommand("train", "Train the fusion layer");
  trn->add_option("--corpus", to.corpus, "Corpus (.jsonl)")->required()->check(CLI::ExistingFile);
  trn->add_option("--config", to.config, "train.toml-style settings, including a [provider] section")
      ->check(CLI::ExistingFile);
  trn->add_option("--out", to.out, "Output directory for checkpoints and history.csv")->required();
  trn->add_option("--variant", to.variant, "Loss variant, e.g. multi:P,I");
  trn->add_option("--interaction", to.interaction, "concat or cross_attention");
  trn->add_option("--seed", to.seed, "Training seed");
  trn->add_option("--epochs", to.epochs, "Epochs");
  trn->add_option("--batch-size", to.batch_size, "Families per batch");
  trn->add_option("--grad-accum", to.grad_accum, "Batches per optimizer step");
  trn->add_option("--lr", to.lr, "Learning rate");
  trn->add_option("--tau", to.tau, "Temperature");

  // grad-check
  GradCheckCli go;
  auto* gc = app.add_subcommand("grad-check", "Compare analytic and finite-difference gradients");
  gc->add_option("--variant", go.variant, "Loss variant");
  gc->add_flag("--all-variants", go.all_variants, "Check all 14 variants");
  gc->add_option("--interaction", go.interaction, "concat, cross_attention or both");
  gc->add_option("--instances", go.instances, "Random instances per configuration");
  gc->add_option("--tolerance", go.tolerance, "Maximum relative error");
  gc->add_option("--seed", go.seed, "Instance seed");
  gc->add_option("--dim", go.dim, "Embedding dim of the random instances")->check(CLI::Range(2, 64));
  gc->add_option("--out", go.out, "Write the JSON report here");

  // eval
  EvalCli eo;
  auto* ev = app.add_subcommand("eval", "Evaluate MAP, nDCG@k and p-MRR on a dataset directory");
  ev->add_option("--dataset", eo.dataset, "Directory with queries.jsonl, pool.jsonl, qrels.tsv")
      ->required()
      ->check(CLI::ExistingDirectory);
  ev->add_option("--checkpoint", eo.checkpoint, "Trained fusion checkpoint")->check(CLI::ExistingFile);
  ev->add_flag("--baseline", eo.baseline, "Evaluate the untrained model built from --config");
  ev->add_option("--config", eo.config, "Provider and model settings")->check(CLI::ExistingFile);
  ev->add_option("--out", eo.out, "Write report.json and report.txt here");
  ev->add_option("--k", eo.k, "nDCG cutoff")->check(CLI::PositiveNumber);

  // analyze
  auto* an = app.add_subcommand("analyze", "Corpus diagnostics");
  an->require_subcommand(1);
  std::string a_corpus, a_config, a_out, a_labels, a_eval;
  std::size_t n_low = 2, n_high = 4;
  bool fail_on_overlap = false;
  auto* aps_cmd = an->add_subcommand("aps", "Average pairwise sample similarity");
  aps_cmd->add_option("--corpus", a_corpus, "Corpus (.jsonl)")->required()->check(CLI::ExistingFile);
  aps_cmd->add_option("--config", a_config, "Provider settings")->check(CLI::ExistingFile);
  aps_cmd->add_option("--out", a_out, "Write diversity.json here");
  auto* ingf_cmd = an->add_subcommand("ingf", "Inter-sample n-gram frequency");
  ingf_cmd->add_option("--corpus", a_corpus, "Corpus (.jsonl)")->required()->check(CLI::ExistingFile);
  ingf_cmd->add_option("--n-low", n_low, "Smallest n");
  ingf_cmd->add_option("--n-high", n_high, "Largest n");
  auto* kappa_cmd = an->add_subcommand("kappa", "Cohen's kappa between two raters");
  kappa_cmd->add_option("--labels", a_labels, "Two tab-separated label columns")->required()->check(CLI::ExistingFile);
  auto* overlap_cmd = an->add_subcommand("overlap", "Exact-match overlap between a corpus and a dataset");
  overlap_cmd->add_option("--corpus", a_corpus, "Training corpus (.jsonl)")->required()->check(CLI::ExistingFile);
  overlap_cmd->add_option("--dataset", a_eval, "Evaluation dataset directory")->required()->check(CLI::ExistingDirectory);
  overlap_cmd->add_flag("--fail-on-overlap", fail_on_overlap, "Exit 1 when a match is found");
  auto* export_cmd = an->add_subcommand("export", "Write embeddings.tsv and metadata.tsv");
  export_cmd->add_option("--corpus", a_corpus, "Corpus (.jsonl)")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--config", a_config, "Provider settings")->check(CLI::ExistingFile);
  export_cmd->add_option("--out", a_out, "Output directory")->required();

  // report
  std::vector<std::string> report_inputs;
  auto* rep = app.add_subcommand("report", "Tabulate report.json files side by side");
  rep->add_option("inputs", report_inputs, "report.json files")->required()->check(CLI::ExistingFile);

  // testbed
  TestbedCli tb;
  auto* tbc = app.add_subcommand("testbed", "Write the synthetic instruction world used by the directional checks");
  tbc->add_option("--out", tb.out, "Output directory")->required();
  tbc->add_option("--seed", tb.seed, "World and hash-provider seed");
  tbc->add_option("--train", tb.train, "Training families");
  tbc->add_option("--eval", tb.eval, "Held-out families");
  tbc->add_option("--topic-words", tb.topic_words, "Topic words per query")->check(CLI::Range(2, 16));
  tbc->add_option("--dim", tb.dim, "Hash provider dim used for balancing")->check(CLI::Range(2, 4096));
  tbc->add_option("--fail-scenario", tb.fail_scenario, "Judge scenario (0-2) the script answers wrongly")
      ->check(CLI::Range(-1, 2));

  std::vector<std::string> argv_storage;
  argv_storage.reserve(args.size() + 1);
  argv_storage.push_back("instir");
  for (const auto& a : args) argv_storage.push_back(a);
  std::vector<const char*> argv;
  for (const auto& a : argv_storage) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  set_log_json(log_json);
  set_log_level(verbose ? LogLevel::kDebug : LogLevel::kInfo);

  try {
    if (*synth) {
      code = cmd_synth(so, *synth, out);
    } else if (*stats) {
      code = cmd_stats(stats_corpus, stats_out, stats_strict, out);
    } else if (*flatten) {
      code = cmd_flatten(flat_corpus, flat_out, out);
    } else if (*trn) {
      code = cmd_train(to, *trn, out);
    } else if (*gc) {
      code = cmd_grad_check(go, out);
    } else if (*ev) {
      code = cmd_eval(eo, out);
    } else if (*rep) {
      code = cmd_report(report_inputs, out);
    } else if (*tbc) {
      code = cmd_testbed(tb, out);
    } else if (*aps_cmd) {
      const ModelSettings s = load_settings(a_config);
      const EncoderPair enc = make_encoders(s.provider);
      const DiversityReport r = diversity_report(load_corpus(a_corpus), *enc.passage, s.provider.pooling);
      if (!a_out.empty()) write_file_atomic(a_out, json_text(r.to_json()));
      out << "aps " << std::setprecision(10) << r.aps << "\n";
    } else if (*ingf_cmd) {
      out << "ingf " << std::setprecision(10) << ingf(sample_texts(load_corpus(a_corpus)), n_low, n_high) << "\n";
    } else if (*kappa_cmd) {
      std::vector<std::string> b;
      const auto a = read_label_column(a_labels, b);
      out << "kappa " << std::setprecision(10) << cohens_kappa(a, b) << "\n";
    } else if (*overlap_cmd) {
      const EvalDataset d = load_dataset(a_eval);
      std::vector<std::pair<std::string, std::string>> eval_texts;
      for (const auto& q : d.queries) {
        eval_texts.emplace_back(q.query_id + "/query", q.query);
        eval_texts.emplace_back(q.query_id + "/instruction_og", q.instruction_og);
        eval_texts.emplace_back(q.query_id + "/instruction_new", q.instruction_new);
      }
      for (const auto& p : d.pool) eval_texts.emplace_back(p.passage_id, p.text);
      const auto matches = overlap_check(corpus_texts(load_corpus(a_corpus)), eval_texts);
      nlohmann::ordered_json j = nlohmann::ordered_json::array();
      for (const auto& m : matches) j.push_back({{"train_id", m.train_id}, {"eval_id", m.eval_id}, {"text", m.normalized_text}});
      out << json_text(j);
      code = fail_on_overlap && !matches.empty() ? kExitFailure : kExitOk;
    } else if (*export_cmd) {
      const ModelSettings s = load_settings(a_config);
      const EncoderPair enc = make_encoders(s.provider);
      const auto rows = embed_corpus(load_corpus(a_corpus), *enc.passage, s.provider.pooling);
      export_embeddings(rows, a_out);
      out << "exported " << rows.size() << " rows to " << a_out << "\n";
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return code;
}

}  // namespace instir::cli
