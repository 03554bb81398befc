"""Unlearning algorithms.

Two families:

* amnesiac: subtract the recorded updates of every batch that contained a
  targeted sample, from a full ledger (conventional) or a pruned one (partial);
* retraining: a few epochs of gradient descent on relabelled targeted data
  (label flip) or gradient ascent on the targeted data (optimization), with an
  optional per-layer selection mask that limits which parameters move.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from forgetd.checkpoint import arch_fingerprint
from forgetd.data import Dataset, SplitPair, flip_labels
from forgetd.errors import ConfigError, FingerprintMismatchError, InputError, UsageError
from forgetd.ledger import Ledger, affected_batches, linear_schedule, sum_updates
from forgetd.nn import ModelParams, loss_and_grads, one_hot, param_axpy, predict, sgd_step

log = logging.getLogger(__name__)

ALGORITHMS = (
    "amnesiac",
    "partial_amnesiac",
    "label_flip",
    "label_flip_partial",
    "optimization",
    "optimization_partial",
)
DIRECTIONS = ("front", "back")


@dataclass(frozen=True)
class SelectionPlan:
    """Per-layer share ``q_l`` of parameters that receive updates."""

    fractions: tuple[float, ...]
    stride: int = 1
    direction: str = "front"

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(q) for q in self.fractions))
        if not self.fractions or any(not 0.0 < q <= 1.0 for q in self.fractions):
            raise ConfigError(f"selection fractions must lie in (0, 1], got {self.fractions}")
        if self.stride < 0:
            raise ConfigError(f"stride must be >= 0, got {self.stride}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")

    @classmethod
    def front_loaded(cls, n_layers, first=0.9, last=0.1, stride=1) -> "SelectionPlan":
        """Most updates in the early layers (label-flip default)."""
        return cls(linear_schedule(n_layers, first, last), stride, "front")

    @classmethod
    def back_loaded(cls, n_layers, first=0.1, last=0.9, stride=1) -> "SelectionPlan":
        """Most updates in the late layers (optimization default)."""
        return cls(linear_schedule(n_layers, first, last), stride, "back")

    @classmethod
    def full(cls, n_layers) -> "SelectionPlan":
        return cls((1.0,) * n_layers)


def make_selection_mask(plan: SelectionPlan, l: int, layer_size: int, epoch: int) -> np.ndarray:
    """Bool mask over flattened layer ``l``: a leading block of ones rolled by ``epoch * stride``."""
    try:
        q = plan.fractions[l]
    except IndexError:
        raise ConfigError(f"selection plan has {len(plan.fractions)} fractions, layer {l} requested") from None
    mask = np.zeros(layer_size, dtype=bool)
    mask[: int(np.floor(q * layer_size + 0.5))] = True
    return np.roll(mask, epoch * plan.stride) if layer_size else mask


def make_selection_masks(plan: SelectionPlan, sizes, epoch: int) -> list[np.ndarray]:
    return [make_selection_mask(plan, l, s, epoch) for l, s in enumerate(sizes)]


def partial_gradient(grads: ModelParams, masks) -> ModelParams:
    """Per-layer Hadamard product of the flattened gradients with ``masks``."""
    flats = grads.flat()
    if len(masks) != len(flats):
        raise UsageError(f"{len(masks)} masks for {len(flats)} layers")
    out = []
    for l, (g, m) in enumerate(zip(flats, masks)):
        m = np.asarray(m).ravel()
        if m.size != g.size:
            raise UsageError(f"layer {l}: mask has {m.size} entries, gradient has {g.size}")
        out.append(np.where(m.astype(bool), g, 0.0))
    return ModelParams.from_flat(grads.arch, out)


@dataclass(frozen=True)
class UnlearnConfig:
    algorithm: str = "partial_amnesiac"
    learning_rate: float = 0.1
    max_epochs: int = 10
    tau: float = 0.005
    batch_size: int = 128
    seed: int = 0
    staged: bool = True
    redraw_flips: bool = False
    full_batch_limit: int = 4096

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"tau must lie in [0, 1), got {self.tau}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def partial(self) -> bool:
        return self.algorithm.endswith("partial") or self.algorithm == "partial_amnesiac"


# -- amnesiac family ---------------------------------------------------------


def _check_ledger(w: ModelParams, ledger: Ledger, want_pruned: bool):
    if ledger.pruned != want_pruned:
        need = "a pruned" if want_pruned else "a full"
        raise UsageError(f"this algorithm needs {need} ledger, got mode {ledger.mode!r}")
    if ledger.fingerprint != arch_fingerprint(w.arch):
        raise FingerprintMismatchError("ledger was recorded for a different architecture")


def _subtract(w: ModelParams, ledger: Ledger, batches, staged: bool) -> list[ModelParams]:
    batches = {(int(e), int(b)) for e, b in batches}
    if not staged:
        return [param_axpy(w, -1, sum_updates(ledger, batches, w.arch))]
    out = []
    for e in range(ledger.n_epochs):
        w = param_axpy(w, -1, sum_updates(ledger, {k for k in batches if k[0] == e}, w.arch))
        out.append(w)
    return out


def amnesiac_unlearn(w: ModelParams, ledger: Ledger, batches, staged: bool = False) -> list[ModelParams]:
    """Subtract the full updates of ``batches``.

    Unstaged: one model. Staged: one model per training epoch, each removing
    that epoch's affected updates on top of the previous one.
    """
    _check_ledger(w, ledger, want_pruned=False)
    return _subtract(w, ledger, batches, staged)


def partial_amnesiac_unlearn(w: ModelParams, ledger: Ledger, batches, staged: bool = False) -> list[ModelParams]:
    """Same as :func:`amnesiac_unlearn` over a pruned ledger."""
    _check_ledger(w, ledger, want_pruned=True)
    return _subtract(w, ledger, batches, staged)


# -- retraining family ---------------------------------------------------------


def _acc(w, ds):
    if ds is None or len(ds) == 0:
        return None
    return float(np.mean(predict(w, ds.images) == ds.labels))


def _retrain(w, data_fn, cfg, plan, sign, targeted, retained):
    if cfg.learning_rate == 0:
        # zero step: skip the arithmetic entirely so the model is returned bit for bit
        t = _acc(w, targeted)
        return w, [(0, t, _acc(w, retained))]
    sizes = w.arch.layer_sizes()
    if plan is not None and len(plan.fractions) != len(sizes):
        raise ConfigError(f"selection plan has {len(plan.fractions)} fractions for {len(sizes)} layers")
    C = w.arch.n_classes
    traj = [(0, _acc(w, targeted), _acc(w, retained))]
    for e in range(cfg.max_epochs):
        data = data_fn(e)
        n = len(data)
        if n <= cfg.full_batch_limit:
            chunks = [np.arange(n)]
        else:
            order = np.random.default_rng([cfg.seed, e]).permutation(n)
            chunks = [order[s:s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]
        masks = None if plan is None else make_selection_masks(plan, sizes, e)
        for idx in chunks:
            _, g = loss_and_grads(w, (data.images[idx], one_hot(data.labels[idx], C)))
            if masks is not None:
                g = partial_gradient(g, masks)
            if sign > 0:
                g = ModelParams(g.arch, [(-gw, -gb) for gw, gb in g.layers])
            w, _ = sgd_step(w, g, cfg.learning_rate)
        t = _acc(w, targeted)
        traj.append((e + 1, t, _acc(w, retained)))
        log.info("unlearn epoch %d targeted %.4f", e + 1, t)
        if t <= cfg.tau:
            break
    return w, traj


def label_flip_unlearn(
    w: ModelParams,
    flipped: Dataset,
    cfg: UnlearnConfig,
    plan: SelectionPlan | None = None,
    *,
    targeted: Dataset,
    retained: Dataset | None = None,
):
    """Descend the loss on ``flipped`` (targeted samples with wrong labels).

    ``targeted`` carries the true labels for the stopping rule. Without a plan
    every parameter is updated. Returns ``(w', trajectory)`` where trajectory
    rows are ``(epoch, targeted_acc, retained_acc)`` starting at epoch 0.
    """
    if len(flipped) == 0:
        raise InputError("empty target: no samples to unlearn")
    if cfg.redraw_flips:
        def data_fn(e):
            return flip_labels(targeted, w.arch.n_classes, [cfg.seed, e])
    else:
        def data_fn(e):
            return flipped
    return _retrain(w, data_fn, cfg, plan, -1, targeted, retained)


def optimization_unlearn(
    w: ModelParams,
    targeted: Dataset,
    cfg: UnlearnConfig,
    plan: SelectionPlan | None = None,
    *,
    retained: Dataset | None = None,
):
    """Ascend the loss on ``targeted`` with its true labels."""
    if len(targeted) == 0:
        raise InputError("empty target: no samples to unlearn")
    return _retrain(w, lambda e: targeted, cfg, plan, +1, targeted, retained)


# -- dispatch ------------------------------------------------------------------


@dataclass
class UnlearnResult:
    params: ModelParams
    trajectory: list = field(default_factory=list)
    n_affected: int = 0


def run_unlearning(
    w: ModelParams,
    cfg: UnlearnConfig,
    split: SplitPair,
    ledger: Ledger | None = None,
    plan: SelectionPlan | None = None,
) -> UnlearnResult:
    """Run ``cfg.algorithm`` to forget ``split.targeted``.

    Amnesiac runs that are staged stop at the first stage whose targeted
    accuracy is at most ``tau``, or after ``max_epochs`` stages.
    """
    if len(split.targeted) == 0:
        raise InputError("empty target: no samples to unlearn")
    alg = cfg.algorithm
    L = len(w.arch.layer_sizes())
    if alg in ("amnesiac", "partial_amnesiac"):
        if ledger is None:
            raise UsageError(f"{alg} needs a ledger")
        batches = affected_batches(ledger, split.targeted.sample_ids)
        fn = amnesiac_unlearn if alg == "amnesiac" else partial_amnesiac_unlearn
        models = fn(w, ledger, batches, staged=cfg.staged)
        traj = [(0, _acc(w, split.targeted), _acc(w, split.retained))]
        out = w
        for i, m in enumerate(models[: cfg.max_epochs]):
            out = m
            t = _acc(m, split.targeted)
            traj.append((i + 1, t, _acc(m, split.retained)))
            if t <= cfg.tau:
                break
        return UnlearnResult(out, traj, len(batches))
    if alg.startswith("label_flip"):
        if alg == "label_flip_partial":
            plan = plan or SelectionPlan.front_loaded(L)
        else:
            plan = None
        flipped = flip_labels(split.targeted, w.arch.n_classes, cfg.seed)
        out, traj = label_flip_unlearn(w, flipped, cfg, plan, targeted=split.targeted, retained=split.retained)
    else:
        if alg == "optimization_partial":
            plan = plan or SelectionPlan.back_loaded(L)
        else:
            plan = None
        out, traj = optimization_unlearn(w, split.targeted, cfg, plan, retained=split.retained)
    return UnlearnResult(out, traj)
