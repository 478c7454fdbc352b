"""Scale presets, system naming and the scratch-vs-transfer comparison driver."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

from . import bench, data, nn, transfer

# Short CLI names -> preset names.
SYSTEMS = {
    "lti3": "lti3_source",
    "lti2": "lti2_target",
    "wh": "wh_benchmark",
    "cheby2": "cheby2_source",
}


@dataclass(frozen=True)
class Scale:
    groups: int
    group_size: int
    train_len: int
    test_len: int
    sizes: tuple[int, ...]

    def dataset_spec(self, seed: int) -> data.DatasetSpec:
        return data.DatasetSpec(self.groups, self.group_size, self.train_len, self.test_len, seed)


SCALES = {
    "desk": Scale(groups=3, group_size=8, train_len=500, test_len=1000, sizes=(8, 16, 32)),
    "paper": Scale(groups=5, group_size=32, train_len=5000, test_len=10000, sizes=(16, 64, 128)),
}

# Front-filter convention used for Wiener-Hammerstein experiments: the printed
# recursion is unstable, "alternating" is the stable unit-DC-gain low-pass.
WH_EXPERIMENT_OPTIONS = {"front_feedback": "alternating", "back_feedback": "printed"}


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SYSID_THREADS", "1")))
    except ValueError:
        return 1


def make_data(system: str, scale: Scale, seed: int, options: dict | None = None):
    name = SYSTEMS.get(system, system)
    if options is None:
        options = WH_EXPERIMENT_OPTIONS if name == "wh_benchmark" else {}
    return data.build_dataset(name, scale.dataset_spec(seed), system_options=options)


@dataclass
class ProtocolResult:
    seed: int
    scratch: bench.MetricsReport
    transferred: dict  # strategy kind -> MetricsReport
    curves: dict       # "scratch" | kind -> LearningCurve (target phase)


def compare_protocols(
    source: str,
    target: str,
    seed: int,
    scale: Scale = SCALES["desk"],
    cfg: bench.TrainConfig | None = None,
    kinds=("finetune", "freeze"),
) -> ProtocolResult:
    """Scratch baseline plus each transfer strategy on one seed.

    The seed drives dataset generation, network initialization and (plus one)
    the freeze re-initialization.
    """
    cfg = replace(cfg or bench.TrainConfig(), seed=seed)
    src = make_data(source, scale, seed)
    tgt = make_data(target, scale, seed)
    net = nn.init_network(scale.sizes, seed)
    _, base_curve = bench.train(net, tgt[0], tgt[1], None, cfg)
    base = bench.metrics(base_curve, constant=cfg.constant_mse)
    out, curves = {}, {"scratch": base_curve}
    for kind in kinds:
        strat = (
            transfer.TransferStrategy.finetune()
            if kind == "finetune"
            else transfer.TransferStrategy.freeze(reinit_seed=seed + 1)
        )
        rep = transfer.run_transfer(src, tgt, strat, cfg, scale.sizes)
        out[kind] = bench.metrics(
            rep.target_curve, constant=cfg.constant_mse, reference_min=base.minimal_test_mse
        )
        curves[kind] = rep.target_curve
    return ProtocolResult(seed, base, out, curves)


def _job(args):
    return compare_protocols(*args)


def compare_protocols_many(source, target, seeds, scale=SCALES["desk"], cfg=None, workers=None):
    """Run ``compare_protocols`` for several seeds, optionally in parallel."""
    jobs = [(source, target, s, scale, cfg) for s in seeds]
    workers = worker_count() if workers is None else workers
    if workers <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job, jobs))
