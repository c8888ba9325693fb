// ndbm2: command-line front end for the bidirectional N-d state-space model.

#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ndbm2/ndbm2.hpp"

namespace {

using ndbm2::Shape;

struct ModelOptions {
  std::size_t c_in = 64;
  std::size_t c_out = 64;
  std::size_t d_model = 128;
  std::size_t d_state = 128;
  std::size_t headdim = 64;
  std::size_t premix_kernel = 0;
  bool bidirectional = false;
  std::uint64_t seed = 0;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Shape parse_shape(const std::string& text) {
  Shape shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(part, &pos);
    } catch (const std::exception&) {
      throw UsageError("bad extent '" + part + "' in shape '" + text + "'");
    }
    if (pos != part.size() || v < 1) throw UsageError("bad extent '" + part + "' in shape '" + text + "'");
    shape.push_back(static_cast<std::size_t>(v));
  }
  if (shape.empty()) throw UsageError("empty shape");
  return shape;
}

// Rank is the extent count unless --rank is given, in which case they must agree.
Shape spatial_shape(const std::string& text, int rank) {
  Shape s = parse_shape(text);
  if (rank != 0 && static_cast<std::size_t>(rank) != s.size()) {
    throw UsageError("--rank " + std::to_string(rank) + " does not match shape '" + text + "'");
  }
  if (s.size() < 1 || s.size() > 3) throw UsageError("spatial rank must be 1, 2 or 3");
  return s;
}

std::string join(const Shape& s, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? sep : "") + std::to_string(s[i]);
  return out;
}

ndbm2::BiMamba2NdModel<float> build_model(const ModelOptions& mo, std::size_t rank) {
  ndbm2::InitOptions opt;
  opt.cfg.d_model = mo.d_model;
  opt.cfg.d_state = mo.d_state;
  opt.cfg.headdim = mo.headdim;
  opt.c_in = mo.c_in;
  opt.c_out = mo.c_out;
  opt.spatial_rank = rank;
  opt.bidirectional = mo.bidirectional;
  opt.seed = mo.seed;
  opt.premix_kernel = mo.premix_kernel;
  return ndbm2::init_random<float>(opt);
}

Shape input_shape(std::size_t batch, std::size_t channels, const Shape& spatial) {
  Shape s{batch, channels};
  s.insert(s.end(), spatial.begin(), spatial.end());
  return s;
}

void add_model_options(CLI::App* cmd, ModelOptions& mo) {
  cmd->add_option("--c-in", mo.c_in, "Input channels")->check(CLI::PositiveNumber);
  cmd->add_option("--c-out", mo.c_out, "Output channels")->check(CLI::PositiveNumber);
  cmd->add_option("--d-model", mo.d_model, "Model width")->check(CLI::PositiveNumber);
  cmd->add_option("--d-state", mo.d_state, "State size per head")->check(CLI::PositiveNumber);
  cmd->add_option("--headdim", mo.headdim, "Channels per head; must divide 2 * d-model")->check(CLI::PositiveNumber);
  cmd->add_option("--premix-kernel", mo.premix_kernel, "Per-direction conv kernel before flattening (0 = off)");
  cmd->add_flag("--bi,!--uni", mo.bidirectional, "Bidirectional model (default: unidirectional)");
  cmd->add_option("--seed", mo.seed, "Weight seed");
}

void print_summary(const ndbm2::BiMamba2NdModel<float>& m) {
  const auto params = ndbm2::count_params(m);
  std::cout << "config: " << ndbm2::config_json(m).dump() << '\n';
  std::cout << "params: " << params.params_total << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ndbm2 - bidirectional N-d selective state-space model"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Cap on worker threads (default: NDBM2_THREADS or all cores)");

  // pad-calc
  auto* pad = app.add_subcommand("pad-calc", "Show alignment padding for a spatial shape");
  int pad_rank = 0;
  std::string pad_shape;
  std::string pad_format = "table";
  pad->add_option("--rank", pad_rank, "Spatial rank (1-3)")->check(CLI::Range(1, 3));
  pad->add_option("--shape", pad_shape, "Comma-separated spatial extents")->required();
  pad->add_option("--format", pad_format, "table or tsv")->check(CLI::IsMember({"table", "tsv"}));

  // flops
  auto* flops = app.add_subcommand("flops", "Parameter and MAC counts");
  ModelOptions flops_mo;
  add_model_options(flops, flops_mo);
  std::vector<std::string> flops_shapes;
  std::string flops_format = "table";
  std::string convention = "layers";
  std::size_t flops_batch = 1;
  bool flops_detail = false;
  flops->add_option("--shape", flops_shapes, "Spatial shape; repeat for several rows")->required();
  flops->add_option("--batch", flops_batch, "Batch size")->check(CLI::PositiveNumber);
  flops->add_option("--format", flops_format, "table or tsv")->check(CLI::IsMember({"table", "tsv"}));
  flops->add_option("--convention", convention, "layers (linear/conv only) or full (adds scan and gating)")
      ->check(CLI::IsMember({"layers", "full"}));
  flops->add_flag("--detail", flops_detail, "Print the per-layer breakdown");

  // bench
  auto* bench = app.add_subcommand("bench", "Median forward wall time");
  ModelOptions bench_mo;
  add_model_options(bench, bench_mo);
  std::vector<std::string> bench_shapes;
  std::size_t repeats = 5, warmup = 1, bench_batch = 1;
  std::string bench_format = "table";
  bench->add_option("--shape", bench_shapes, "Spatial shape; repeat for several rows")->required();
  bench->add_option("--repeats", repeats, "Timed runs")->check(CLI::PositiveNumber);
  bench->add_option("--warmup", warmup, "Discarded runs");
  bench->add_option("--batch", bench_batch, "Batch size")->check(CLI::PositiveNumber);
  bench->add_option("--format", bench_format, "table or tsv")->check(CLI::IsMember({"table", "tsv"}));

  // run
  auto* run = app.add_subcommand("run", "Run a forward pass");
  ModelOptions run_mo;
  add_model_options(run, run_mo);
  std::string run_model, run_input, run_output, run_shape;
  int run_rank = 0;
  std::size_t run_batch = 1;
  std::uint64_t input_seed = 0;
  run->add_option("--model", run_model, "Model file (otherwise a seeded model is built)");
  run->add_option("--input", run_input, "Input tensor file (otherwise a seeded Gaussian input)");
  run->add_option("--output", run_output, "Output tensor file")->required();
  run->add_option("--shape", run_shape, "Spatial shape of the random input");
  run->add_option("--rank", run_rank, "Spatial rank")->check(CLI::Range(1, 3));
  run->add_option("--batch", run_batch, "Batch size of the random input")->check(CLI::PositiveNumber);
  run->add_option("--input-seed", input_seed, "Seed of the random input");

  // export / import
  auto* exp = app.add_subcommand("export", "Write a seeded model to a model file");
  ModelOptions exp_mo;
  add_model_options(exp, exp_mo);
  int exp_rank = 1;
  std::string exp_output;
  exp->add_option("--rank", exp_rank, "Spatial rank")->check(CLI::Range(1, 3));
  exp->add_option("--output", exp_output, "Model file")->required();

  auto* imp = app.add_subcommand("import", "Load and validate a model file");
  std::string imp_model;
  imp->add_option("--model", imp_model, "Model file")->required();

  CLI11_PARSE(app, argc, argv);

  if (threads == 0) {
    if (const char* env = std::getenv("NDBM2_THREADS")) threads = std::atoi(env);
  }
  ndbm2::set_num_threads(threads);

  try {
    if (*pad) {
      const Shape s = spatial_shape(pad_shape, pad_rank);
      const auto rec = ndbm2::plan_alignment(s);
      const char* equal = rec.unchanged() ? "TRUE" : "FALSE";
      if (pad_format == "tsv") {
        std::cout << s.size() << '\t' << join(s, ",") << '\t' << join(rec.padded_shape, ",") << '\t'
                  << rec.tokens() << '\t' << equal << '\n';
      } else {
        std::cout << "dim    input          padded         tokens  equal  amounts   modes\n";
        std::string modes;
        for (std::size_t i = 0; i < rec.mode_used.size(); ++i) {
          modes += (i ? "," : "") + std::string(ndbm2::to_string(rec.mode_used[i]));
        }
        std::ostringstream row;
        row << std::left;
        row.width(7);
        row << (std::to_string(s.size()) + "D");
        row.width(15);
        row << join(s, "x");
        row.width(15);
        row << join(rec.padded_shape, "x");
        row.width(8);
        row << rec.tokens();
        row.width(7);
        row << equal;
        row.width(10);
        row << join(rec.per_axis_amount, ",");
        row << modes << '\n';
        std::cout << row.str();
      }
    } else if (*flops) {
      const auto conv = convention == "full" ? ndbm2::MacConvention::kFull : ndbm2::MacConvention::kLayers;
      if (flops_format == "table") {
        std::cout << "bi   size            tokens     GMac      params(k)  (" << ndbm2::to_string(conv)
                  << " convention)\n";
      }
      for (const auto& text : flops_shapes) {
        const Shape s = spatial_shape(text, 0);
        const auto model = build_model(flops_mo, s.size());
        const auto r = ndbm2::count_macs(model, input_shape(flops_batch, flops_mo.c_in, s), conv);
        if (flops_format == "tsv") {
          std::cout << "shape\t" << join(s, "x") << '\t' << r.tokens << '\n' << ndbm2::format_tsv(r);
          continue;
        }
        std::ostringstream row;
        row << std::left;
        row.width(5);
        row << (flops_mo.bidirectional ? "yes" : "no");
        row.width(16);
        row << join(s, "x");
        row.width(11);
        row << r.tokens;
        row.width(10);
        row << ndbm2::format_fixed(r.gmacs(), 4);
        row << ndbm2::format_fixed(static_cast<double>(r.params_total) / 1000.0, 2) << '\n';
        std::cout << row.str();
        if (flops_detail) std::cout << ndbm2::format_table(r);
      }
    } else if (*bench) {
      if (bench_format == "table") std::cout << "bi   size            time(ms)    threads\n";
      for (const auto& text : bench_shapes) {
        const Shape s = spatial_shape(text, 0);
        const auto model = build_model(bench_mo, s.size());
        const auto r = ndbm2::bench(model, input_shape(bench_batch, bench_mo.c_in, s), repeats, warmup);
        if (bench_format == "tsv") {
          std::cout << (bench_mo.bidirectional ? "bi" : "uni") << '\t' << join(s, "x") << '\t'
                    << ndbm2::format_double(*r.wall_ms) << '\t' << r.threads << '\n';
        } else {
          std::ostringstream row;
          row << std::left;
          row.width(5);
          row << (bench_mo.bidirectional ? "yes" : "no");
          row.width(16);
          row << join(s, "x");
          row.width(12);
          row << ndbm2::format_fixed(*r.wall_ms, 3);
          row << r.threads << '\n';
          std::cout << row.str();
        }
      }
    } else if (*run) {
      std::optional<ndbm2::Tensor<float>> input;
      if (!run_input.empty()) input = ndbm2::load_tensor_file<float>(run_input);

      ndbm2::BiMamba2NdModel<float> model;
      if (!run_model.empty()) {
        model = ndbm2::load_file<float>(run_model);
      } else {
        std::size_t rank = 0;
        if (input) {
          rank = input->rank() - 2;
        } else if (!run_shape.empty()) {
          rank = spatial_shape(run_shape, run_rank).size();
        } else {
          throw UsageError("run needs --input or --shape");
        }
        model = build_model(run_mo, rank);
        std::cout << "model seed: " << run_mo.seed << '\n';
      }
      if (!input) {
        if (run_shape.empty()) throw UsageError("run needs --input or --shape");
        const Shape s = spatial_shape(run_shape, run_rank);
        input = ndbm2::random_normal<float>(input_shape(run_batch, model.c_in, s), input_seed);
        std::cout << "input seed: " << input_seed << '\n';
      }
      const auto y = ndbm2::forward(model, *input);
      ndbm2::save_tensor_file(y, run_output, "output");
      std::cout << "input " << ndbm2::shape_to_string(input->shape()) << " -> output "
                << ndbm2::shape_to_string(y.shape()) << '\n';
    } else if (*exp) {
      const auto model = build_model(exp_mo, static_cast<std::size_t>(exp_rank));
      ndbm2::save_file(model, exp_output);
      std::cout << "wrote " << exp_output << '\n';
      print_summary(model);
    } else if (*imp) {
      const auto model = ndbm2::load_file<float>(imp_model);
      std::cout << "loaded " << imp_model << '\n';
      print_summary(model);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
