// Serial reference kernels against the OpenMP ones on one mid-sized problem.
// Also checks the two agree bit for bit.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>

#include "exitweave/backbone.hpp"
#include "exitweave/kernels.hpp"
#include "exitweave/parallel.hpp"
#include "exitweave/rng.hpp"

using namespace exitweave;

namespace {

double time_ms(int reps, const std::function<void()>& f) {
  f();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, double serial, double omp, bool same) {
  std::printf("%-20s serial %9.3f ms   omp %9.3f ms   speedup %5.2fx   %s\n", name, serial, omp, serial / omp,
              same ? "identical" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
  parallel::apply_thread_cap_from_env();
  const std::size_t batch = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 256;
  const int reps = argc > 2 ? std::atoi(argv[2]) : 5;

  const backbone::BackboneConfig cfg{64, {64, 64, 64, 64}, 10};
  RngStream rng(1);
  const auto params = backbone::init_params(cfg, rng);
  numkit::Matrix x(batch, cfg.input_dim);
  for (double& v : x.values()) v = rng.normal();
  std::vector<int> y(batch);
  for (int& v : y) v = static_cast<int>(rng.below(cfg.num_classes));
  const std::size_t k_exits = cfg.num_exits();
  const std::size_t p = params.size();
  std::printf("batch %zu, %zu params, %zu exits, %d threads\n", batch, p, k_exits, parallel::max_threads());

  backbone::ExitOutputs fs, fo;
  const double f_s = time_ms(reps, [&] { kernels::serial::forward_all(params, x, y, fs); });
  const double f_o = time_ms(reps, [&] { kernels::omp::forward_all(params, x, y, fo); });
  report("forward_all", f_s, f_o, fs.logits == fo.logits && fs.losses == fo.losses);

  backbone::PerSampleGrads gs, go;
  const double g_s = time_ms(reps, [&] { kernels::serial::per_sample_grads(params, x, y, gs); });
  const double g_o = time_ms(reps, [&] { kernels::omp::per_sample_grads(params, x, y, go); });
  report("per_sample_grads", g_s, g_o, gs.data == go.data);

  numkit::Matrix coeffs(batch, k_exits, 1.0 / static_cast<double>(batch));
  std::vector<double> es(p), eo(p);
  const double e_s = time_ms(reps, [&] { kernels::serial::exit_loss_grads(params, x, y, coeffs, es); });
  const double e_o = time_ms(reps, [&] { kernels::omp::exit_loss_grads(params, x, y, coeffs, eo); });
  report("exit_loss_grads", e_s, e_o, es == eo);

  numkit::Matrix w(batch, k_exits, 1.0);
  std::vector<double> ws(p), wo(p);
  const double w_s = time_ms(reps, [&] { kernels::serial::weighted_grad_sum(gs, w, 0.5, ws); });
  const double w_o = time_ms(reps, [&] { kernels::omp::weighted_grad_sum(gs, w, 0.5, wo); });
  report("weighted_grad_sum", w_s, w_o, ws == wo);

  numkit::Matrix ps, po;
  const double p_s = time_ms(reps, [&] { kernels::serial::project_grads(gs, es, ps); });
  const double p_o = time_ms(reps, [&] { kernels::omp::project_grads(gs, es, po); });
  report("project_grads", p_s, p_o, ps == po);
  return 0;
}
