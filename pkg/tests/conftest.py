import numpy as np
import pytest

from forgetd.data import make_batch_plan, synth_dataset
from forgetd.ledger import Ledger, PrunePlan
from forgetd.nn import Arch, build_model, dense, flatten, relu
from forgetd.train import TrainConfig, train


def small_arch(h=4, w=4, hidden=8, C=3):
    return Arch((1, h, w), (flatten(), dense(h * w, hidden), relu(), dense(hidden, C)))


class Run:
    """A short synthetic training run with a full and a pruned ledger."""

    def __init__(self, prune_plan=None, epochs=2, seed=0, n=60, batch_size=8):
        self.ds = synth_dataset(n, 3, 4, 4, seed=seed)
        self.arch = small_arch()
        self.w0 = build_model(self.arch, seed)
        self.plan = make_batch_plan(self.ds, batch_size, epochs, seed)
        self.full = Ledger.create(self.arch, self.plan.n_epochs, self.plan.batches_per_epoch)
        ledgers = [self.full]
        self.pruned = None
        if prune_plan is not None:
            self.pruned = Ledger.create(self.arch, self.plan.n_epochs, self.plan.batches_per_epoch, prune_plan)
            ledgers.append(self.pruned)
        cfg = TrainConfig(epochs=epochs, batch_size=batch_size, learning_rate=0.05, seed=seed, optimizer="sgd")
        self.result = train(self.w0, self.ds, self.plan, cfg, ledgers)
        self.trained = self.result.params


@pytest.fixture(scope="session")
def run():
    return Run(PrunePlan.depth_schedule(2, 0.9, 0.1, "random", seed=0))


@pytest.fixture(scope="session")
def zero_prune_run():
    return Run(PrunePlan.uniform(2, 0.0, "random", seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
