// Microbenchmarks: one training step of the full model and ranking metrics.

#include "tcdsr/eval.hpp"
#include "tcdsr/optim.hpp"
#include "tcdsr/synthetic.hpp"
#include "tcdsr/trainer.hpp"

#include <benchmark/benchmark.h>
#include <spdlog/spdlog.h>

namespace {

using namespace tcdsr;

struct StepFixture {
  ingest::InteractionLog log;
  std::vector<ingest::UserSequences> users;
  semantic::StubEncoder stub{64};
  std::unique_ptr<train::SemanticSource> source;
  std::unique_ptr<model::Model> model;
  model::BatchInput batch;

  StepFixture(int dim, int batch_users) {
    synth::SynthConfig sc;
    sc.users = batch_users;
    log = synth::generate_synthetic(sc, sc.seed);
    users = ingest::build_user_sequences(log, 50);
    model::ModelConfig c;
    c.dim = dim;
    c.d_mid = 32;
    c.time_buckets = 64;
    const std::array<int, 2> counts{log.item_count(Domain::kA), log.item_count(Domain::kB)};
    source = std::make_unique<train::SemanticSource>(stub, log, c.prompt_style());
    model = std::make_unique<model::Model>(c, model::FeatureSpace::fit(users, counts, c), stub.dim());
    model->set_projection(train::fit_projection(users, *source, model->mid_dim()));
    for (std::size_t b = 0; b < users.size(); ++b) {
      const auto& u = users[b];
      batch.users.push_back(&u);
      std::array<const ag::Matrix*, 3> sem{};
      for (View v : kViews) sem[index_of(v)] = &source->prefixes(u, v);
      batch.semantic.push_back(sem);
      for (auto q : train::causal_queries(u)) {
        q.user = static_cast<int>(b);
        batch.queries.push_back(q);
      }
      for (View v : kViews) {
        if (auto cf = source->counterfactual(u, v, c.alpha_small, c.alpha_big, 1)) {
          cf->user = static_cast<int>(b);
          batch.counterfactuals.push_back(std::move(*cf));
        }
      }
    }
  }
};

void BM_TrainStep(benchmark::State& state) {
  spdlog::set_level(spdlog::level::warn);
  StepFixture f(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  Adam adam({5e-4});
  for (auto _ : state) {
    f.model->store().zero_grad();
    ag::Graph g;
    const auto res = f.model->forward(g, f.batch);
    g.backward(res.total);
    adam.step(f.model->store());
    f.model->after_update();
    benchmark::DoNotOptimize(res.parts.total);
  }
  state.counters["queries"] = static_cast<double>(f.batch.queries.size());
}
BENCHMARK(BM_TrainStep)->Args({32, 16})->Args({64, 16})->Unit(benchmark::kMillisecond);

void BM_RankMetrics(benchmark::State& state) {
  Rng rng(1);
  std::vector<double> scores(static_cast<std::size_t>(state.range(0)));
  for (auto& s : scores) s = standard_normal(rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(eval::rank_metrics(scores, 0, std::nullopt));
  }
}
BENCHMARK(BM_RankMetrics)->Arg(100)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();
