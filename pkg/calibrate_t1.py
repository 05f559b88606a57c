"""Calibration probe for the loss-ablation ordering (not part of the package)."""

import statistics
import sys
import time

from matxfer.config import MatxferConfig
from matxfer.evaluation import build_experiment_data
from matxfer.learning import OptimizerConfig
from matxfer.metric import MetricWeights, make_encoder, sample_reference_triplets, train_metric_stage
from matxfer.predictor import ClassWeights, evaluate_samples, make_head, train_classifier_stage


def probe(cls_steps=1600, cls_lr=5e-4, cls_batch=96, scratch_scale=1.0, full_scale=0.1,
          m_steps=800, m_lr=1e-3, m_count=200, noise=2.0, shading=4.0, spread=6.0, radius=16.0,
          seeds=(0, 1, 2)):
    cfg = MatxferConfig()
    cfg.library.n_per_category = 6
    cfg.library.patch_size = 6
    cfg.library.spread = spread
    cfg.library.radius = radius
    cfg.library.noise_amplitude = noise
    cfg.synth.n_shapes = 30
    cfg.synth.image_size = 32
    cfg.synth.shading_amplitude = shading
    data = build_experiment_data(cfg, seed=0)
    cats = [m.category for m in data.materials]
    print(f"patches train {len(data.train_samples)} test {len(data.test_samples)}")

    def run(with_metric, alpha5, seed):
        encoder = make_encoder(seed)
        scale = scratch_scale
        if with_metric:
            triplets = sample_reference_triplets(data.dm, cats, m_count, seed=seed)
            m_opt = OptimizerConfig("adam", m_lr, batch_size=24)
            train_metric_stage(encoder, data.train_samples, triplets, MetricWeights(), m_opt, m_steps, seed)
            scale = full_scale
        head = make_head(30, seed + 1)
        opt = OptimizerConfig("adam", cls_lr, batch_size=cls_batch)
        train_classifier_stage(encoder, head, data.train_samples, data.dm,
                               ClassWeights(alpha5=alpha5), opt, steps=cls_steps, seed=seed,
                               encoder_lr_scale=scale)
        return evaluate_samples(encoder, head, data.test_samples, data.dm)

    t0 = time.time()
    results = {}
    for name, wm, a5 in (("cat+mat", False, 0.0), ("cat+mat+dis", False, 10.0), ("full", True, 10.0)):
        rows = [run(wm, a5, s) for s in seeds]
        results[name] = rows
        med = tuple(statistics.median(r[i] for r in rows) for i in range(3))
        print(f"{name:12s} med mat {med[0]:.3f} cat {med[1]:.3f} dis {med[2]:.2f} "
              f"| per-seed {[(round(r[0],2), round(r[2],1)) for r in rows]} t={time.time()-t0:.0f}s")
    med = {k: tuple(statistics.median(r[i] for r in v) for i in range(3)) for k, v in results.items()}
    ok_dis = med["full"][2] < med["cat+mat+dis"][2] < med["cat+mat"][2]
    ok_acc = med["full"][0] > med["cat+mat+dis"][0] > med["cat+mat"][0]
    print("ordering dis:", ok_dis, " acc:", ok_acc)
    return results


if __name__ == "__main__":
    kwargs = {}
    for arg in sys.argv[1:]:
        k, v = arg.split("=")
        kwargs[k] = float(v) if "." in v or "e" in v else int(v)
    probe(**kwargs)
