"""Retained accuracy as a function of the share of affected training batches.

Targets are random sample sets rather than whole classes so the affected
share can be dialled in: sample ids are shuffled once per seed and the
shortest prefix whose batches cover the requested share is used. Prefixes are
nested, so the affected share never decreases as the request grows.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from forgetd.data import Dataset, SplitPair
from forgetd.errors import ConfigError, InputError
from forgetd.evaluation import accuracy, frac
from forgetd.ledger import Ledger, affected_batches
from forgetd.nn import ModelParams
from forgetd.unlearn import UnlearnConfig, run_unlearning

DEFAULT_FRACTIONS = (0.1, 0.25, 0.5, 0.75, 1.0)
DEFAULT_METHODS = ("amnesiac", "partial_amnesiac")


def thread_cap(requested: int | None = None) -> int:
    """Worker count: ``requested`` (or the CPU count) capped by FORGETD_THREADS."""
    n = requested or os.cpu_count() or 1
    env = os.environ.get("FORGETD_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"FORGETD_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise ConfigError(f"FORGETD_THREADS must be >= 1, got {cap}")
        n = min(n, cap)
    return max(1, n)


def target_for_fraction(ledger: Ledger, order: np.ndarray, fraction: float):
    """Shortest prefix of ``order`` whose affected share reaches ``fraction``.

    Returns ``(target_ids, achieved_fraction)``.
    """
    if not 0.0 <= fraction <= 1.0:
        raise InputError(f"affected-batch fraction {fraction} is outside [0, 1]")
    total = ledger.n_epochs * ledger.batches_per_epoch
    if fraction == 0.0:
        return order[:0], 0.0

    def share(k):
        return len(affected_batches(ledger, order[:k])) / total

    if share(order.size) < fraction:
        raise InputError(f"affected-batch fraction {fraction} is unreachable (max {share(order.size):.6f})")
    lo, hi = 1, order.size
    while lo < hi:
        mid = (lo + hi) // 2
        if share(mid) >= fraction:
            hi = mid
        else:
            lo = mid + 1
    return order[:lo], share(lo)


def _point(trained, dataset, ledgers, methods, cfg, fraction, order):
    ref = ledgers[methods[0]]
    ids, achieved = target_for_fraction(ref, order, fraction)
    rows = []
    if ids.size == 0:
        acc = frac(accuracy(trained, dataset))
        for m in methods:
            rows.append(dict(fraction=fraction, achieved_fraction=0.0, method=m, n_targets=0,
                             targeted_acc=None, retained_acc=acc))
        return rows
    keep = ~np.isin(dataset.sample_ids, ids)
    split = SplitPair(dataset.take(ids), dataset.subset(np.flatnonzero(keep)))
    for m in methods:
        res = run_unlearning(trained, replace(cfg, algorithm=m), split, ledgers.get(m))
        rows.append(dict(
            fraction=fraction,
            achieved_fraction=frac(achieved),
            method=m,
            n_targets=int(ids.size),
            targeted_acc=frac(accuracy(res.params, split.targeted)),
            retained_acc=frac(accuracy(res.params, split.retained)) if len(split.retained) else None,
        ))
    return rows


def sweep_affected_batches(
    trained: ModelParams,
    dataset: Dataset,
    ledgers: dict[str, Ledger],
    fractions=DEFAULT_FRACTIONS,
    methods=DEFAULT_METHODS,
    cfg: UnlearnConfig | None = None,
    seed: int = 0,
    threads: int | None = None,
) -> list[dict]:
    """One row per (fraction, method) with the retained accuracy after unlearning.

    ``ledgers`` maps method name to the ledger it reads; amnesiac methods need
    one, retraining methods ignore it. Every point starts from ``trained``.
    Amnesiac subtraction is one-shot unless ``cfg.staged`` is set.
    """
    methods = tuple(methods)
    if not methods:
        raise ConfigError("sweep needs at least one method")
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise InputError(f"affected-batch fraction {f} is outside [0, 1]")
    if methods[0] not in ledgers:
        # the first method's ledger defines batch membership; any ledger from the run will do
        if not ledgers:
            raise ConfigError("sweep needs a ledger to measure affected batches")
        ledgers = {methods[0]: next(iter(ledgers.values())), **ledgers}
    cfg = cfg or UnlearnConfig(staged=False)
    order = dataset.sample_ids[np.random.default_rng(seed).permutation(len(dataset))]
    ref = ledgers[methods[0]]
    ref.member_index()  # build once before threads share it

    def job(f):
        return _point(trained, dataset, ledgers, methods, cfg, float(f), order)

    n = min(thread_cap(threads), max(1, len(fractions)))
    if n == 1:
        parts = [job(f) for f in fractions]
    else:
        with ThreadPoolExecutor(n) as pool:
            parts = list(pool.map(job, fractions))
    return [row for part in parts for row in part]
