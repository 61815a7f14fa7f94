// command-line driver: training runs, threshold sweeps, decode-cache
// simulation, head-allocation search, eviction baselines, and power-law fits
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "spkv/analysis.hpp"
#include "spkv/baselines.hpp"
#include "spkv/checkpoint.hpp"
#include "spkv/config.hpp"
#include "spkv/kvcache.hpp"
#include "spkv/training.hpp"

using namespace spkv;

namespace {

// exit 2: the invocation or its input files are wrong
// exit 1: the run itself failed (numerics, capacity, output IO)
struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

FileConfig load_cfg(const std::string& path) {
  try {
    return parse_config_file(path);
  } catch (const std::exception& e) {
    throw usage_error(e.what());
  }
}

Checkpoint load_ckpt(const std::string& path) {
  try {
    return load_checkpoint(path);
  } catch (const std::exception& e) {
    throw usage_error(e.what());
  }
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw usage_error("cannot create output directory " + dir + ": " + ec.message());
}

FileConfig effective_config(const Model& m, const FileConfig& fc) {
  FileConfig eff = fc;
  eff.model = m.cfg;
  eff.gate = m.gate;
  return eff;
}

// ---------------------------------------------------------------- train ----

struct TrainArgs {
  std::string config, mode, out, init_checkpoint;
};

int run_train(const TrainArgs& a) {
  FileConfig fc = load_cfg(a.config);
  TrainConfig tc = fc.train;
  if (!a.mode.empty()) {
    try {
      tc.mode = train_mode_from_name(a.mode);
    } catch (const std::exception& e) {
      throw usage_error(e.what());
    }
  }
  const bool continued = tc.mode == TrainMode::SoftGatedCPT || tc.mode == TrainMode::TAHG ||
                         tc.mode == TrainMode::BernoulliSTE || tc.mode == TrainMode::FrozenLLM;
  if (continued && a.init_checkpoint.empty())
    throw usage_error(std::string("mode ") + train_mode_name(tc.mode) +
                      " continues training and needs --init-checkpoint");
  if (!continued && !a.init_checkpoint.empty())
    throw usage_error(std::string("mode ") + train_mode_name(tc.mode) +
                      " starts from fresh weights; drop --init-checkpoint");

  Model m = [&] {
    if (continued) {
      Checkpoint ck = load_ckpt(a.init_checkpoint);
      Model from = model_from(ck);
      from.gate = fc.gate;  // threshold/window/aux may change between phases
      return from;
    }
    Rng init_rng(tc.seed);
    return Model::init(fc.model, fc.gate, init_rng);
  }();
  try {
    validate_task_fits(fc.task, m.cfg);
    tc.validate();
  } catch (const std::exception& e) {
    throw usage_error(e.what());
  }

  ensure_dir(a.out);
  write_resolved_config(a.out + "/resolved_config.txt", effective_config(m, fc));

  TrainResult res = train(
      m, [&](int, Rng& rng) { return gen_task_batch(fc.task, tc.batch_size, rng); }, tc,
      a.out + "/train_log.jsonl");
  save_checkpoint(a.out + "/model.ckpt", res.checkpoint);

  const TrainRecord& last = res.log.records.back();
  std::printf("steps = %d\n", tc.total_steps);
  std::printf("final_loss = %s\n", fmt(last.loss).c_str());
  if (last.has_gate_stats) {
    std::printf("final_mean_u = %s\n", fmt(last.mean_u).c_str());
    std::printf("final_rho = %s\n", fmt(last.rho).c_str());
  }
  std::printf("checkpoint = %s/model.ckpt\n", a.out.c_str());
  return 0;
}

// ------------------------------------------------------------ sweep-tau ----

struct SweepArgs {
  std::string checkpoint, taus, eval_set, out;
};

int run_sweep(const SweepArgs& a) {
  Checkpoint ck = load_ckpt(a.checkpoint);
  Model m = model_from(ck);
  FileConfig fc = load_cfg(a.eval_set);
  try {
    validate_task_fits(fc.task, m.cfg);
  } catch (const std::exception& e) {
    throw usage_error(e.what());
  }

  std::vector<float> taus;
  {
    std::stringstream ss(a.taus);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        std::size_t pos = 0;
        const float t = std::stof(item, &pos);
        if (pos != item.size()) throw std::invalid_argument("trailing");
        taus.push_back(t);
      } catch (const std::exception&) {
        throw usage_error("bad tau value: '" + item + "'");
      }
    }
  }
  if (taus.empty()) throw usage_error("--taus needs at least one value");
  for (float t : taus)
    if (t < 0.0f || t > 1.0f) throw usage_error("tau " + fmt(t) + " outside [0,1]");
  if (!std::is_sorted(taus.begin(), taus.end())) {
    std::fprintf(stderr, "warning: tau list not ascending; sorting\n");
    std::sort(taus.begin(), taus.end());
  }

  // fixed evaluation set
  Rng erng(fc.task.eval_seed);
  std::vector<Batch> batches;
  for (int i = 0; i < fc.task.eval_batches; ++i)
    batches.push_back(gen_task_batch(fc.task, fc.train.batch_size, erng));

  NoGradGuard ng;
  std::vector<SweepRow> rows;
  for (float tau : taus) {
    m.gate.tau = tau;
    GateRuntime rt;
    rt.mode = GateMode::Hard;
    double nll_sum = 0.0;
    std::vector<DensityReport> parts;
    for (const Batch& b : batches) {
      ForwardResult fr = m.forward(b.tokens, b.B, b.T, rt);
      nll_sum += next_token_loss(fr.logits, b.tokens, b.loss_mask).ptr()[0];
      for (ZTraces& z : ztraces_from_forward(m, fr, b.B, b.T))
        parts.push_back(density(z, m.gate.window));
    }
    SweepRow row;
    row.tau = tau;
    row.rho = pool_density(parts).rho();
    row.nll = nll_sum / batches.size();
    rows.push_back(row);
  }
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].rho > rows[i - 1].rho + 1e-12)
      throw std::runtime_error("density must be non-increasing in tau; got " +
                               fmt(rows[i - 1].rho) + " -> " + fmt(rows[i].rho));

  ensure_dir(a.out);
  write_resolved_config(a.out + "/resolved_config.txt", effective_config(m, fc));
  write_sweep_csv(a.out + "/sweep.csv", rows);
  for (const SweepRow& r : rows)
    std::printf("tau = %s  rho = %s  nll = %s\n", fmt(r.tau).c_str(), fmt(r.rho).c_str(),
                fmt(r.nll).c_str());
  return 0;
}

// ------------------------------------------------------------ cache-sim ----

struct CacheArgs {
  std::string checkpoint, trace_out, report_out;
  int prompt_tokens = 64;
  int gen_tokens = 64;
  float tau = 0.5f;
  std::uint64_t seed = 0;
  int page_size = 16;
  int max_pages = 0;
};

int run_cache_sim(const CacheArgs& a) {
  if (a.prompt_tokens < 1) throw usage_error("--prompt-tokens must be >= 1");
  if (a.gen_tokens < 0) throw usage_error("--gen-tokens must be >= 0");
  if (a.tau < 0.0f || a.tau > 1.0f) throw usage_error("--tau outside [0,1]");
  Checkpoint ck = load_ckpt(a.checkpoint);
  Model m = model_from(ck);
  m.gate.tau = a.tau;
  const int T = a.prompt_tokens + a.gen_tokens;
  if (T > m.cfg.max_seq_len)
    throw usage_error("prompt+gen length " + std::to_string(T) + " exceeds max_seq_len " +
                      std::to_string(m.cfg.max_seq_len));

  CacheConfig cc;
  cc.page_size = a.page_size;
  cc.max_pages = a.max_pages;
  cc.allow_pool_growth = true;
  DecodeState st = DecodeState::init(m, cc, true);

  Rng rng(a.seed);
  std::vector<int> tokens;
  std::vector<std::vector<float>> step_logits;
  for (int t = 0; t < T; ++t) {
    int tok;
    if (t < a.prompt_tokens) {
      tok = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(m.cfg.vocab_size)));
    } else {
      const std::vector<float>& prev = step_logits.back();
      tok = static_cast<int>(std::max_element(prev.begin(), prev.end()) - prev.begin());
    }
    tokens.push_back(tok);
    step_logits.push_back(st.decode_step(tok));
  }
  check_page_conservation(st);

  // oracle: the same sequence through the full training-path forward
  float residual = 0.0f;
  {
    NoGradGuard ngg;
    GateRuntime rt;
    rt.mode = GateMode::Hard;
    Tensor full = m.forward(tokens, 1, T, rt).logits;
    for (int t = 0; t < T; ++t) {
      const float* ref = full.ptr() + static_cast<std::size_t>(t) * m.cfg.vocab_size;
      for (int j = 0; j < m.cfg.vocab_size; ++j)
        residual = std::max(residual,
                            std::abs(step_logits[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] - ref[j]));
    }
  }

  MemoryReport rep = memory_report(st);
  DensityReport dens =
      density(ztraces_from_gate_trace(st.trace, m.cfg.n_layers, m.cfg.n_kv_heads, T),
              m.gate.window);
  const double traffic = memory_traffic_ratio(dens, T, m.gate.window);

  std::printf("tokens = %d\n", T);
  std::printf("bytes_window = %zu\n", rep.bytes_window);
  std::printf("bytes_longterm = %zu\n", rep.bytes_longterm);
  std::printf("density = %s\n", fmt(rep.density).c_str());
  std::printf("pages_used = %d\n", rep.pages_used);
  std::printf("headroom_grows = %d\n", rep.headroom_grows);
  std::printf("max_stream_reallocs = %d\n", rep.max_stream_reallocs);
  std::printf("retained_total = %lld\n", static_cast<long long>(rep.retained_total));
  std::printf("oracle_residual = %s\n", fmt(residual).c_str());
  std::printf("traffic_ratio = %s\n", fmt(traffic).c_str());

  if (!a.trace_out.empty()) write_gate_trace_jsonl(a.trace_out, st.trace);
  if (!a.report_out.empty()) write_density_report_json(a.report_out, dens);
  return 0;
}

// ------------------------------------------------------------------ nas ----

struct NasArgs {
  std::string report, strategy, out;
  int budget = 0;
  std::uint64_t seed = 0;
};

int run_nas(const NasArgs& a) {
  DensityReport rep = [&] {
    try {
      return read_density_report_json(a.report);
    } catch (const std::exception& e) {
      throw usage_error(e.what());
    }
  }();
  HeadStrategy s;
  try {
    s = head_strategy_from_name(a.strategy);
  } catch (const std::exception& e) {
    throw usage_error(e.what());
  }
  Rng rng(a.seed);
  HeadSelection sel;
  try {
    sel = select_heads(s, a.budget, rep, &rng);
  } catch (const std::exception& e) {
    throw usage_error(e.what());
  }
  nlohmann::ordered_json j;
  j["strategy"] = head_strategy_name(s);
  j["budget"] = a.budget;
  j["coverage"] = coverage(sel, rep);
  nlohmann::ordered_json heads = nlohmann::ordered_json::array();
  for (const auto& [l, k] : sel.heads) heads.push_back({l, k});
  j["heads"] = heads;
  const std::string text = j.dump(2);
  std::printf("%s\n", text.c_str());
  if (!a.out.empty()) {
    std::ofstream f(a.out, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + a.out);
    f << text << "\n";
  }
  return 0;
}

// ------------------------------------------------------------ baselines ----

struct BaselineArgs {
  std::string policy, checkpoint, eval_set, out;
  int window = 128;
  int chunk = 16;
  int sinks = 4;
  float budget_fraction = 0.2f;
  float keep_fraction = 0.2f;
  std::uint64_t seed = 0;
  int stream_len = 512;
  int n_streams = 4;
};

int run_baselines(const BaselineArgs& a) {
  Checkpoint ck = load_ckpt(a.checkpoint);
  Model m = model_from(ck);
  FileConfig fc = load_cfg(a.eval_set);
  if (a.stream_len < 2) throw usage_error("--stream-len must be >= 2");
  if (a.stream_len > m.cfg.max_seq_len)
    throw usage_error("--stream-len exceeds the model's max_seq_len");
  if (a.n_streams < 1) throw usage_error("--n-streams must be >= 1");

  EvictionPolicy pol;
  try {
    pol.kind = policy_kind_from_name(a.policy);
  } catch (const std::exception& e) {
    throw usage_error(e.what());
  }
  pol.window = a.window;
  pol.chunk_size = a.chunk;
  pol.n_sinks = a.sinks;
  pol.budget_fraction = a.budget_fraction;
  pol.keep_fraction = a.keep_fraction;
  pol.seed = a.seed;
  try {
    pol.validate();
  } catch (const std::exception& e) {
    throw usage_error(e.what());
  }
  EvictionPolicy none = pol;
  none.kind = PolicyKind::None;

  // streams of concatenated task sequences
  Rng erng(fc.task.eval_seed);
  std::vector<std::vector<int>> streams;
  for (int i = 0; i < a.n_streams; ++i) {
    std::vector<int> s;
    while (static_cast<int>(s.size()) < a.stream_len) {
      Batch b = gen_task_batch(fc.task, 1, erng);
      s.insert(s.end(), b.tokens.begin(), b.tokens.end());
    }
    s.resize(static_cast<std::size_t>(a.stream_len));
    streams.push_back(std::move(s));
  }

  ensure_dir(a.out);
  write_resolved_config(a.out + "/resolved_config.txt", effective_config(m, fc));
  std::vector<BaselineRow> rows;
  double mean_density = 0.0, mean_delta = 0.0, mean_nll = 0.0;
  for (const std::vector<int>& s : streams) {
    PrefillResult dense = chunked_prefill_eval(m, s, none);
    PrefillResult res = pol.kind == PolicyKind::None ? dense : chunked_prefill_eval(m, s, pol);
    BaselineRow row;
    row.policy = pol.describe();
    row.density = res.density;
    row.nll = res.mean_nll;
    row.delta_nll_vs_dense = res.mean_nll - dense.mean_nll;
    rows.push_back(row);
    mean_density += res.density;
    mean_delta += row.delta_nll_vs_dense;
    mean_nll += res.mean_nll;
  }
  write_baseline_jsonl(a.out + "/baselines.jsonl", rows);
  const double n = static_cast<double>(streams.size());
  std::printf("policy = %s\n", pol.describe().c_str());
  std::printf("streams = %d\n", a.n_streams);
  std::printf("mean_density = %s\n", fmt(mean_density / n).c_str());
  std::printf("mean_nll = %s\n", fmt(mean_nll / n).c_str());
  std::printf("mean_delta_nll_vs_dense = %s\n", fmt(mean_delta / n).c_str());
  return 0;
}

// ---------------------------------------------------------- fit-scaling ----

struct FitArgs {
  std::string points, out;
};

int run_fit(const FitArgs& a) {
  std::ifstream in(a.points, std::ios::binary);
  if (!in) throw usage_error("points file not found: " + a.points);
  std::vector<std::pair<double, double>> pts;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1 && line.find_first_not_of("0123456789.,+-eE \t\r") != std::string::npos)
      continue;  // header row
    double c, nll;
    if (std::sscanf(line.c_str(), "%lf,%lf", &c, &nll) != 2)
      throw usage_error("points line " + std::to_string(lineno) + " is not 'flops,nll'");
    pts.emplace_back(c, nll);
  }
  PowerLawFit f = [&] {
    try {
      return fit_power_law(pts);
    } catch (const std::exception& e) {
      throw usage_error(e.what());
    }
  }();
  nlohmann::ordered_json j;
  j["l_inf"] = f.l_inf;
  j["a"] = f.a;
  j["alpha"] = f.alpha;
  j["r2"] = f.r2;
  std::printf("l_inf = %s\n", fmt(f.l_inf).c_str());
  std::printf("a = %s\n", fmt(f.a).c_str());
  std::printf("alpha = %s\n", fmt(f.alpha).c_str());
  std::printf("r2 = %s\n", fmt(f.r2).c_str());
  if (!a.out.empty()) {
    std::ofstream g(a.out, std::ios::binary);
    if (!g) throw std::runtime_error("cannot open for write: " + a.out);
    g << j.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"self-pruned kv-cache toolkit"};
  app.require_subcommand(1);

  TrainArgs ta;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model per a config file");
  train_cmd->add_option("--config", ta.config, "key=value config file")->required();
  train_cmd->add_option("--mode", ta.mode, "override train.mode");
  train_cmd->add_option("--out", ta.out, "output directory")->required();
  train_cmd->add_option("--init-checkpoint", ta.init_checkpoint, "checkpoint to continue from");

  SweepArgs sa;
  CLI::App* sweep_cmd = app.add_subcommand("sweep-tau", "density/NLL across thresholds");
  sweep_cmd->add_option("--checkpoint", sa.checkpoint)->required();
  sweep_cmd->add_option("--taus", sa.taus, "comma-separated thresholds in [0,1]")->required();
  sweep_cmd->add_option("--eval-set", sa.eval_set, "config file naming the eval task")->required();
  sweep_cmd->add_option("--out", sa.out, "output directory")->required();

  CacheArgs ca;
  CLI::App* cache_cmd = app.add_subcommand("cache-sim", "paged decode with gate-driven writes");
  cache_cmd->add_option("--checkpoint", ca.checkpoint)->required();
  cache_cmd->add_option("--prompt-tokens", ca.prompt_tokens);
  cache_cmd->add_option("--gen-tokens", ca.gen_tokens);
  cache_cmd->add_option("--tau", ca.tau);
  cache_cmd->add_option("--seed", ca.seed);
  cache_cmd->add_option("--page-size", ca.page_size);
  cache_cmd->add_option("--max-pages", ca.max_pages, "0 = unlimited pool growth");
  cache_cmd->add_option("--trace-out", ca.trace_out, "gate trace JSONL path");
  cache_cmd->add_option("--report-out", ca.report_out, "density report JSON path");

  NasArgs na;
  CLI::App* nas_cmd = app.add_subcommand("nas", "pick global heads from a density report");
  nas_cmd->add_option("--report", na.report, "density report JSON")->required();
  nas_cmd->add_option("--strategy", na.strategy, "a | b | c | d")->required();
  nas_cmd->add_option("--budget", na.budget, "heads to make global")->required();
  nas_cmd->add_option("--seed", na.seed, "rng seed for strategy c");
  nas_cmd->add_option("--out", na.out, "also write the JSON here");

  BaselineArgs ba;
  CLI::App* base_cmd = app.add_subcommand("baselines", "post-hoc eviction under chunked prefill");
  base_cmd->add_option("--policy", ba.policy, "none | streaming_llm | h2o | random")->required();
  base_cmd->add_option("--checkpoint", ba.checkpoint)->required();
  base_cmd->add_option("--eval-set", ba.eval_set, "config file naming the eval task")->required();
  base_cmd->add_option("--out", ba.out, "output directory")->required();
  base_cmd->add_option("--window", ba.window);
  base_cmd->add_option("--chunk", ba.chunk);
  base_cmd->add_option("--sinks", ba.sinks);
  base_cmd->add_option("--budget-fraction", ba.budget_fraction);
  base_cmd->add_option("--keep-fraction", ba.keep_fraction);
  base_cmd->add_option("--seed", ba.seed);
  base_cmd->add_option("--stream-len", ba.stream_len);
  base_cmd->add_option("--n-streams", ba.n_streams);

  FitArgs fa;
  CLI::App* fit_cmd = app.add_subcommand("fit-scaling", "power-law fit of (flops, nll) points");
  fit_cmd->add_option("--points", fa.points, "CSV of flops,nll")->required();
  fit_cmd->add_option("--out", fa.out, "also write the JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // help is success; anything else is usage
  }

  try {
    if (train_cmd->parsed()) return run_train(ta);
    if (sweep_cmd->parsed()) return run_sweep(sa);
    if (cache_cmd->parsed()) return run_cache_sim(ca);
    if (nas_cmd->parsed()) return run_nas(na);
    if (base_cmd->parsed()) return run_baselines(ba);
    if (fit_cmd->parsed()) return run_fit(fa);
  } catch (const usage_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
