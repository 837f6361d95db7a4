// Synthesizes four subjects, trains the compact model on three of them and
// evaluates on the held-out fourth.

#include <cstdio>
#include <vector>

#include <ecgstress/ecgstress.hpp>

using namespace ecgstress;

int main() {
    // 8 s windows at 256 Hz match ModelConfig::compact().
    const WindowSet ws = synthetic_cohort();
    const auto cfg = ModelConfig::compact();
    std::printf("%zu windows of %zu samples from %zu subjects\n", ws.size(), ws.window_len, ws.subjects().size());

    const auto folds = loso_folds(ws);
    const Fold& fold = folds.back();

    TrainConfig t;
    t.lr0 = 1e-3;
    t.epochs = 6;
    t.batch = 32;
    t.seed = 1;

    Rng init(t.seed);
    ModelParams params = init_params(cfg, init);
    std::printf("model: %zu parameters, %zu tokens of width %zu\n", params.parameter_count(), cfg.layout().tokens, cfg.d_model);

    const auto run = train(params, cfg, ws, fold.train, t, TrainMode::plain, Rng(t.seed));
    for (std::size_t e = 0; e < run.loss_curve.size(); ++e) std::printf("epoch %zu  loss %.4f\n", e, run.loss_curve[e]);

    const auto ev = evaluate(params, cfg, ws, fold.test);
    std::printf("held-out %s: accuracy %.1f%%  F1 %.1f%%\n", fold.test_subject.c_str(), 100.0 * ev.counts.accuracy(),
                100.0 * ev.counts.f1());

    save_checkpoint(params, cfg, "quickstart.ckpt");
    std::printf("checkpoint written to quickstart.ckpt\n");
}
