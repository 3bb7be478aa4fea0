"""The desk-scale comparison protocol.

One teacher is trained once on the default dataset. Every method is then
trained from the same student initializations (one per seed) and compared
on mean final test accuracy.

Loss weights were chosen by the coarse grid in :data:`GRID`. Each method
keeps its best grid point by mean accuracy over :data:`TUNING_SEEDS`, and
the comparisons are reported on the disjoint :data:`EVAL_SEEDS`.
``demos/tune_grid.py`` reruns the grid.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError
from ..nets import ConvNet
from .config import TrainConfig, apply_overrides
from .dataset import Dataset, gen_dataset
from . import experiments as ex

EVAL_SEEDS = (0, 1, 2, 3, 4)
TUNING_SEEDS = (100, 101, 102)

# half-decade ladders around each feature loss's stable range: at initialization
# the second-moment losses are ~1e3 times larger than wd-diag / kl-diag
_FEATURE_WEIGHTS = {
    "wd-diag": (1e-4, 3e-4, 1e-3, 3e-3, 1e-2),
    "kl-diag": (1e-4, 3e-4, 1e-3, 3e-3, 1e-2),
    "spatial-2nd": (1e-6, 3e-6, 1e-5, 3e-5, 1e-4),
    "channel-2nd": (1e-6, 3e-6, 1e-5, 3e-5, 1e-4),
}
_POOL_GRIDS = (1, 2, 4)

GRID: dict[str, list[dict]] = {
    "ce": [{}],
    "kd": [{"loss.kd_weight": w} for w in (0.5, 1.0, 2.0)],
    "wkd-l": [{"loss.lam": lam, "loss.target_weight": tw}
              for lam in (0.1, 0.3, 1.0, 3.0, 10.0, 30.0) for tw in (1.0, 2.0, 3.0)],
}
for _kind, _weights in _FEATURE_WEIGHTS.items():
    GRID[_kind] = [{"loss.feature_weight": w, "loss.grid": g} for g in _POOL_GRIDS for w in _weights]

# best grid point per method (output of demos/tune_grid.py, saved in demos/tuning_results.json)
TUNED: dict[str, dict] = {
    "ce": {},
    "kd": {"loss.kd_weight": 1.0},
    "wkd-l": {"loss.lam": 0.1, "loss.target_weight": 3.0},
    "wd-diag": {"loss.feature_weight": 1e-3, "loss.grid": 4},
    "kl-diag": {"loss.feature_weight": 1e-3, "loss.grid": 1},
    "spatial-2nd": {"loss.feature_weight": 3e-5, "loss.grid": 2},
    "channel-2nd": {"loss.feature_weight": 1e-5, "loss.grid": 1},
}


def method_config(base: TrainConfig, method: str, overrides: dict | None = None, seed: int = 0) -> TrainConfig:
    """``base`` with ``loss.method`` set (``wd-diag`` is run as ``wkd-f``)."""
    loss_method = "wkd-f" if method == "wd-diag" else method
    extra = {"loss.method": loss_method, "seed": seed}
    if method == "wd-diag":
        extra["loss.feature_kind"] = "wd-diag"
    return apply_overrides(base, {**extra, **(overrides or {})})


@dataclass
class Study:
    """A trained teacher plus cached teacher signals, shared by many student runs."""

    base: TrainConfig = field(default_factory=TrainConfig)
    data: Dataset | None = None
    teacher: ConvNet | None = None
    _signals: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data is None:
            self.data = gen_dataset(self.base.dataset)
        if self.teacher is None:
            self.teacher, self.teacher_record = ex.train_teacher(self.base, self.data)

    def signals(self, cfg: TrainConfig) -> ex.TeacherSignals:
        lc = cfg.loss
        key = (lc.ir_method, lc.ir_degree, lc.ir_alpha, lc.ir_per_class, lc.kappa, cfg.seed
               if lc.parts()[0] == "wkd-l" else None)
        if key not in self._signals:
            ir_cfg = cfg.replace(loss=dataclasses.replace(lc, method="wkd-l"))
            self._signals[key] = ex.teacher_signals(ir_cfg, self.teacher, self.data)
        return self._signals[key]

    def run(self, method: str, overrides: dict | None = None, seed: int = 0) -> ex.RunRecord:
        cfg = method_config(self.base, method, overrides, seed)
        signals = None if cfg.loss.method == "ce" else self.signals(cfg)
        return ex.distill(cfg, self.teacher, self.data, signals=signals)[1]

    def accuracies(self, method: str, overrides: dict | None = None, seeds=EVAL_SEEDS) -> np.ndarray:
        return np.array([self.run(method, overrides, s).final_test_acc for s in seeds])


def tune(study: Study, methods=None, seeds=TUNING_SEEDS, log=print) -> dict:
    """Run :data:`GRID` and return ``{method: (best_overrides, [(overrides, mean_acc)])}``.

    A grid point whose training blows up numerically scores ``nan`` and is
    never selected.
    """
    out = {}
    for method in methods or GRID:
        scores = []
        for point in GRID[method]:
            try:
                acc = float(study.accuracies(method, point, seeds).mean())
            except NumericalError:
                acc = float("nan")
            scores.append((point, acc))
            if log:
                log(f"{method:12s} {point} {acc:.4f}")
        valid = [s for s in scores if np.isfinite(s[1])]
        best = max(valid, key=lambda s: s[1])[0] if valid else None
        out[method] = (best, scores)
    return out


def self_kd_accuracies(study: Study, overrides: dict | None = None, seeds=EVAL_SEEDS):
    """Final test accuracies ``(s0, s1)`` of born-again self distillation per seed.

    S1 is distilled from S0 with WKD-L; ``overrides`` are applied to both
    generations (S0 only uses the shared optimizer and architecture settings).
    """
    s0, s1 = [], []
    for seed in seeds:
        cfg = apply_overrides(study.base, {**(overrides or {}), "seed": seed})
        (_, r0), (_, r1) = ex.self_kd(cfg, study.data)
        s0.append(r0.final_test_acc)
        s1.append(r1.final_test_acc)
    return np.array(s0), np.array(s1)
