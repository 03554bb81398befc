"""Flat ``key=value`` run configuration.

One setting per line, dotted keys, ``#`` starts a comment::

    data.source = idx
    data.train_images = data/train-images-idx3-ubyte.gz
    train.epochs = 8
    target.class = 3

Every key has a default except ``data.source``. Relative paths resolve
against the directory of the config file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from forgetd.data import Dataset, load_idx, split_target, synth_dataset
from forgetd.errors import ConfigError
from forgetd.ledger import STRATEGIES, PrunePlan
from forgetd.nn import ARCHITECTURES, Arch
from forgetd.train import TrainConfig
from forgetd.unlearn import ALGORITHMS, SelectionPlan, UnlearnConfig

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _bool(s):
    try:
        return _BOOL[s.lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {s!r}") from None


def _floats(s):
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _strs(s):
    return tuple(x.strip() for x in s.split(",") if x.strip())


# key -> (parser, default); None default means "unset"
KEYS = {
    "seed": (_int, 0),
    "out": (str, "runs/default"),
    "data.source": (str, None),
    "data.train_images": (str, None),
    "data.train_labels": (str, None),
    "data.test_images": (str, None),
    "data.test_labels": (str, None),
    "data.n": (_int, 1000),
    "data.test_n": (_int, 0),
    "data.classes": (_int, 10),
    "data.height": (_int, 8),
    "data.width": (_int, 8),
    "data.noise": (_float, 1.0),
    "model.arch": (str, "mlp"),
    "model.hidden": (_int, 500),
    "train.epochs": (_int, 8),
    "train.batch_size": (_int, 128),
    "train.learning_rate": (_float, 0.001),
    "train.optimizer": (str, "adam"),
    "ledger.pruning": (str, "random"),
    "ledger.first": (_float, 0.9),
    "ledger.last": (_float, 0.1),
    "ledger.fractions": (_floats, None),
    "target.class": (_int, 3),
    "target.ids": (_ints, None),
    "unlearn.algorithm": (str, "partial_amnesiac"),
    "unlearn.learning_rate": (_float, 0.1),
    "unlearn.max_epochs": (_int, 10),
    "unlearn.tau": (_float, 0.005),
    "unlearn.batch_size": (_int, 128),
    "unlearn.staged": (_bool, True),
    "unlearn.redraw_flips": (_bool, False),
    "unlearn.full_batch_limit": (_int, 4096),
    "unlearn.select_first": (_float, None),
    "unlearn.select_last": (_float, None),
    "unlearn.select_fractions": (_floats, None),
    "unlearn.stride": (_int, 1),
    "sweep.fractions": (_floats, (0.1, 0.25, 0.5, 0.75, 1.0)),
    "sweep.methods": (_strs, ("amnesiac", "partial_amnesiac")),
    "sweep.threads": (_int, 0),
    "report.format": (str, "json"),
}


def parse_text(text: str, name: str = "<config>") -> dict:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{name}:{n}: expected key = value")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{name}:{n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{name}:{n}: duplicate key {key!r}")
        try:
            values[key] = KEYS[key][0](val)
        except ValueError as exc:
            raise ConfigError(f"{name}:{n}: bad value for {key}: {exc}") from None
    return values


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @classmethod
    def from_text(cls, text: str, base_dir=".", name="<config>") -> "RunConfig":
        return cls(parse_text(text, name), Path(base_dir))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        with open(path) as fh:
            text = fh.read()
        return cls.from_text(text, path.parent, str(path))

    def __getitem__(self, key):
        if key not in KEYS:
            raise KeyError(key)
        return self.values.get(key, KEYS[key][1])

    def set(self, key, value):
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        self.values[key] = value

    def path(self, key) -> Path | None:
        v = self[key]
        if v is None:
            return None
        p = Path(os.path.expanduser(v))
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in ((k, self[k]) for k in KEYS)}

    # -- typed views ------------------------------------------------------

    def arch(self, input_shape, n_classes) -> Arch:
        name = self["model.arch"]
        if name not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}")
        if name == "mlp":
            return ARCHITECTURES[name](input_shape, self["model.hidden"], n_classes)
        return ARCHITECTURES[name](input_shape, n_classes)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            learning_rate=self["train.learning_rate"],
            seed=self["seed"],
            optimizer=self["train.optimizer"],
        )

    def prune_plan(self, n_layers: int) -> PrunePlan | None:
        strategy = self["ledger.pruning"]
        if strategy == "none":
            return None
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown pruning strategy {strategy!r}; choose from {STRATEGIES + ('none',)}")
        fr = self["ledger.fractions"]
        if fr is not None:
            if strategy != "global" and len(fr) != n_layers:
                raise ConfigError(f"ledger.fractions has {len(fr)} entries for {n_layers} layers")
            return PrunePlan(strategy, fr, self["seed"])
        return PrunePlan.depth_schedule(n_layers, self["ledger.first"], self["ledger.last"], strategy, self["seed"])

    def unlearn_config(self) -> UnlearnConfig:
        alg = self["unlearn.algorithm"]
        if alg not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {alg!r}; choose from {ALGORITHMS}")
        return UnlearnConfig(
            algorithm=alg,
            learning_rate=self["unlearn.learning_rate"],
            max_epochs=self["unlearn.max_epochs"],
            tau=self["unlearn.tau"],
            batch_size=self["unlearn.batch_size"],
            seed=self["seed"],
            staged=self["unlearn.staged"],
            redraw_flips=self["unlearn.redraw_flips"],
            full_batch_limit=self["unlearn.full_batch_limit"],
        )

    def selection_plan(self, n_layers: int) -> SelectionPlan | None:
        """Explicit selection plan, or None to use the algorithm's default schedule."""
        stride = self["unlearn.stride"]
        fr = self["unlearn.select_fractions"]
        back = self["unlearn.algorithm"].startswith("optimization")
        if fr is not None:
            if len(fr) != n_layers:
                raise ConfigError(f"unlearn.select_fractions has {len(fr)} entries for {n_layers} layers")
            return SelectionPlan(fr, stride, "back" if back else "front")
        first, last = self["unlearn.select_first"], self["unlearn.select_last"]
        if first is None and last is None and stride == 1:
            return None
        if back:
            return SelectionPlan.back_loaded(n_layers, first if first is not None else 0.1,
                                             last if last is not None else 0.9, stride)
        return SelectionPlan.front_loaded(n_layers, first if first is not None else 0.9,
                                          last if last is not None else 0.1, stride)

    def target_selector(self):
        ids = self["target.ids"]
        return self["target.class"] if ids is None else set(ids)

    def datasets(self) -> tuple[Dataset, Dataset | None]:
        """(train, test); test is None when not configured."""
        src = self["data.source"]
        if src is None:
            raise ConfigError("data.source is required (idx or synthetic)")
        if src == "synthetic":
            C, h, w = self["data.classes"], self["data.height"], self["data.width"]
            n, nt = self["data.n"], self["data.test_n"]
            whole = synth_dataset(n + nt, C, h, w, self["seed"], self["data.noise"])
            train = whole.subset(np.arange(n))
            return train, (whole.subset(np.arange(n, n + nt)) if nt else None)
        if src != "idx":
            raise ConfigError(f"data.source must be idx or synthetic, got {src!r}")
        ti, tl = self.path("data.train_images"), self.path("data.train_labels")
        if ti is None or tl is None:
            raise ConfigError("idx source needs data.train_images and data.train_labels")
        train = load_idx(ti, tl)
        test = None
        si, sl = self.path("data.test_images"), self.path("data.test_labels")
        if si is not None and sl is not None:
            test = load_idx(si, sl, train.n_classes)
        return train, test

    def split(self, ds: Dataset):
        return split_target(ds, self.target_selector())
