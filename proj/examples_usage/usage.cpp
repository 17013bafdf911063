// Minimal library walkthrough: build a small task stream, pretrain a frozen
// backbone, then compare LiLoRA with sequential LoRA on the same stream.

#include <cstdio>

#include "lilora/continual.hpp"
#include "lilora/metrics.hpp"

int main() {
  using namespace lilora;

  SuiteParams params;
  params.num_tasks = 4;
  params.train_per_class = 100;
  params.test_per_class = 50;
  params.seed = 7;
  const TaskSuite suite = generate_suite(params);

  Rng rng(params.seed);
  Architecture arch;
  arch.output_dim = suite.total_classes();
  const PretrainResult pre = pretrain_backbone(suite.base.train, suite.base.test, arch, PretrainConfig{}, rng);
  std::printf("frozen backbone, base accuracy %.3f\n", pre.base_accuracy);

  for (const Strategy& s : {Strategy::seq_lora(), Strategy::lilora()}) {
    RunSpec spec;
    spec.strategy = s;
    spec.train.seed = params.seed;
    const ContinualResult r = run_continual(pre.backbone, suite, spec);
    const std::size_t K = r.accuracy.num_tasks();
    std::printf("%-10s AP %.2f  MAP %.2f  BWT %.2f  MIF %.2f\n", s.tag().c_str(), average_performance(r.accuracy, K),
                mean_average_performance(r.accuracy, K), backward_transfer(r.accuracy, K), r.mif.back());
  }
  return 0;
}
