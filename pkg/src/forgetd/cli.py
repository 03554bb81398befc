"""Command-line entry point: ``forgetd {train,unlearn,eval,sweep}``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 integrity error (corrupt file, fingerprint mismatch).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from forgetd import checkpoint, ledger as ledger_io
from forgetd.config import RunConfig
from forgetd.data import make_batch_plan
from forgetd.errors import FingerprintMismatchError, ForgetdError, IntegrityError, UsageError
from forgetd.evaluation import accuracy, emit_report, membership_inference_report, sweep_csv, trajectory_csv
from forgetd.ledger import Ledger
from forgetd.nn import build_model
from forgetd.sweep import sweep_affected_batches
from forgetd.train import train
from forgetd.unlearn import run_unlearning

INIT, MODEL, UNLEARNED = "init.fgtd", "model.fgtd", "unlearned.fgtd"
FULL_LEDGER, PRUNED_LEDGER = "ledger-full.fgtl", "ledger-pruned.fgtl"


def _setup(args) -> tuple[RunConfig, Path]:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.out is not None:
        cfg.set("out", args.out)
        out = Path(args.out)
    else:
        out = cfg.path("out")
    return cfg, out


def _write_text(path: Path, text: str):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    train_ds, _ = cfg.datasets()
    arch = cfg.arch(train_ds.images.shape[1:], train_ds.n_classes)
    tcfg = cfg.train_config()
    w0 = build_model(arch, tcfg.seed)
    plan = make_batch_plan(train_ds, tcfg.batch_size, tcfg.epochs, tcfg.seed)
    ledgers = [Ledger.create(arch, plan.n_epochs, plan.batches_per_epoch)]
    prune = cfg.prune_plan(len(arch.layer_sizes()))
    if prune is not None:
        ledgers.append(Ledger.create(arch, plan.n_epochs, plan.batches_per_epoch, prune))
    res = train(w0, train_ds, plan, tcfg, ledgers)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(w0, out / INIT)
    checkpoint.save(res.params, out / MODEL)
    for led in ledgers:
        ledger_io.save(led, out / (FULL_LEDGER if led.mode == "full" else PRUNED_LEDGER))
    for e, loss in enumerate(res.epoch_losses):
        print(f"epoch {e + 1} loss {loss:.6f}")
    acc = accuracy(res.params, train_ds)
    print(f"train accuracy {acc:.6f}")
    return {"params": res.params, "ledgers": ledgers, "train_accuracy": acc}


def _ledger_path(alg: str, out: Path) -> Path | None:
    if alg == "amnesiac":
        return out / FULL_LEDGER
    if alg == "partial_amnesiac":
        return out / PRUNED_LEDGER
    return None


def _storage(out: Path) -> dict:
    st = {}
    for key, name in (("ledger_bytes_full", FULL_LEDGER), ("ledger_bytes_pruned", PRUNED_LEDGER)):
        p = out / name
        if p.exists():
            st[key] = p.stat().st_size
    return st


def cmd_unlearn(cfg: RunConfig, out: Path, ckpt=None, ledger_path=None):
    train_ds, test_ds = cfg.datasets()
    split = cfg.split(train_ds)
    test_split = cfg.split(test_ds) if test_ds is not None else None
    w = checkpoint.load(ckpt or out / MODEL)
    ucfg = cfg.unlearn_config()
    led = None
    lp = ledger_path or _ledger_path(ucfg.algorithm, out)
    if lp is not None and ucfg.algorithm in ("amnesiac", "partial_amnesiac"):
        led = ledger_io.load(lp)
        if led.fingerprint != checkpoint.arch_fingerprint(w.arch):
            raise FingerprintMismatchError(f"{lp} was recorded for a different architecture than the checkpoint")
    plan = cfg.selection_plan(len(w.arch.layer_sizes()))
    res = run_unlearning(w, ucfg, split, led, plan)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(res.params, out / UNLEARNED)
    rep = membership_inference_report(w, res.params, split, res.trajectory, (), cfg.to_dict(), test_split)
    rep.storage.update(_storage(out))
    emit_report(rep, out / "report.json", "json")
    _write_text(out / "trajectory.csv", trajectory_csv(res.trajectory))
    print(f"targeted_acc {rep.after['targeted_acc']:.6f} retained_acc {rep.after['retained_acc']:.6f}")
    return rep


def cmd_eval(cfg: RunConfig, out: Path, ckpt=None, before=None):
    train_ds, test_ds = cfg.datasets()
    split = cfg.split(train_ds)
    test_split = cfg.split(test_ds) if test_ds is not None else None
    after = checkpoint.load(ckpt or out / MODEL)
    w0 = checkpoint.load(before) if before else after
    if w0.arch != after.arch:
        raise IntegrityError("the two checkpoints have different architectures")
    rep = membership_inference_report(w0, after, split, (), (), cfg.to_dict(), test_split)
    rep.storage.update(_storage(out))
    out.mkdir(parents=True, exist_ok=True)
    emit_report(rep, out / "eval-report.json", "json")
    print(f"targeted_acc {rep.after['targeted_acc']:.6f} retained_acc {rep.after['retained_acc']:.6f}")
    return rep


def cmd_sweep(cfg: RunConfig, out: Path, ckpt=None):
    train_ds, _ = cfg.datasets()
    if ckpt is None and not (out / MODEL).exists():
        print("no trained model in the output directory; training first")
        cmd_train(cfg, out)
    trained = checkpoint.load(ckpt or out / MODEL)
    methods = cfg["sweep.methods"]
    ledgers = {}
    for m in methods:
        p = _ledger_path(m, out)
        if p is not None:
            ledgers[m] = ledger_io.load(p)
    if not ledgers:
        ledgers["amnesiac"] = ledger_io.load(out / FULL_LEDGER)
    ucfg = cfg.unlearn_config()
    rows = sweep_affected_batches(
        trained, train_ds, ledgers, cfg["sweep.fractions"], methods,
        replace(ucfg, staged=False), cfg["seed"], cfg["sweep.threads"] or None,
    )
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "sweep.csv", sweep_csv(rows))
    for r in rows:
        print(f"{r['fraction']:.2f} {r['method']} retained_acc {r['retained_acc']}")
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forgetd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides the config)")

    common(sub.add_parser("train", help="train and record ledgers"))
    u = sub.add_parser("unlearn", help="unlearn the configured target")
    common(u)
    u.add_argument("--checkpoint", help=f"model to unlearn from (default OUT/{MODEL})")
    u.add_argument("--ledger", help="ledger for amnesiac algorithms (default chosen by algorithm)")
    e = sub.add_parser("eval", help="targeted/retained accuracy report")
    common(e)
    e.add_argument("--checkpoint", help=f"model to evaluate (default OUT/{MODEL})")
    e.add_argument("--before", help="reference model for the 'before' columns (default: same)")
    s = sub.add_parser("sweep", help="retained accuracy vs affected-batch share")
    common(s)
    s.add_argument("--checkpoint", help=f"trained model (default OUT/{MODEL})")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg, out = _setup(args)
        if args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "unlearn":
            cmd_unlearn(cfg, out, args.checkpoint, args.ledger)
        elif args.command == "eval":
            cmd_eval(cfg, out, args.checkpoint, args.before)
        elif args.command == "sweep":
            cmd_sweep(cfg, out, args.checkpoint)
        else:  # pragma: no cover - argparse rejects unknown commands
            raise UsageError(f"unknown command {args.command}")
    except ForgetdError as exc:
        print(f"forgetd: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"forgetd: I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
