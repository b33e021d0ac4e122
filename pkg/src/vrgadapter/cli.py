"""``vrgadapter`` command line: synth, train, eval, gradcheck, sweep, inspect.

Exit codes: 0 success, 1 usage error, 2 format/data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from vrgadapter.bundle_io import (
    SynthConfig,
    load_bundle,
    load_checkpoint,
    save_bundle,
    save_checkpoint,
    synth_generate,
)
from vrgadapter.diagnostics import inspect_rows, pipeline_grad_check, rows_to_csv
from vrgadapter.errors import NumericalError, VRGError
from vrgadapter.trainer import TrainConfig, evaluate, sweep, train

log = logging.getLogger("vrgadapter")


class UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageExit(message)


def _fmt(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vrgadapter", description=__doc__.splitlines()[0], formatter_class=_fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic embedding bundle", formatter_class=_fmt)
    s.add_argument("--out", required=True, help="bundle directory to create")
    s.add_argument("--classes", type=int, default=10, help="number of classes C")
    s.add_argument("--shots", type=int, default=16, help="training samples per class")
    s.add_argument("--test-shots", type=int, default=16, help="test samples per class")
    s.add_argument("--val-shots", type=int, default=0, help="validation samples per class (0 = no val split)")
    s.add_argument("--desc", type=int, default=8, help="descriptions per class M")
    s.add_argument("--dim", type=int, default=32, help="text embedding dim")
    s.add_argument("--aux-dims", type=int, nargs="*", default=[32, 32], help="auxiliary branch dims")
    s.add_argument("--desc-noise", type=float, default=0.2, help="description noise scale")
    s.add_argument("--vis-noise", type=float, default=0.25, help="visual feature noise scale")
    s.add_argument("--mixing-seed", type=int, default=1, help="seed of the auxiliary branch maps")
    s.add_argument("--seed", type=int, default=0, help="master seed")

    t = sub.add_parser("train", help="train and write a checkpoint", formatter_class=_fmt)
    t.add_argument("--bundle", required=True, help="bundle directory")
    t.add_argument("--out", required=True, help="checkpoint directory to create")
    t.add_argument("--epochs", type=int, default=50, help="training epochs")
    t.add_argument("--lr", type=float, default=1e-3, help="initial learning rate")
    t.add_argument("--batch", type=int, default=256, help="batch size")
    t.add_argument("--alpha", type=float, default=0.7, help="blend weight of the initial class means")
    t.add_argument("--lambda", dest="lam", type=float, default=0.4, help="kurtosis exponent")
    t.add_argument("--beta", type=float, default=0.5, help="auxiliary-branch fusion weight")
    t.add_argument("--layers", type=int, default=2, help="graph convolution layers")
    t.add_argument("--hidden", type=int, default=16, help="hidden width")
    t.add_argument("--weight-decay", type=float, default=0.01, help="AdamW decoupled weight decay")
    t.add_argument("--seed", type=int, default=0, help="seed for init, shuffling and sampling")
    t.add_argument("--fusion", choices=["kurtosis", "mean"], default="kurtosis", help="branch fusion rule")
    t.add_argument("--no-aux", action="store_true", help="zero-shot branch only")
    t.add_argument("--detach-kappa", action="store_true", help="stop gradients through kurtosis weights")
    t.add_argument("--raw-zero-shot", action="store_true", help="raw dot products for zero-shot logits")
    t.add_argument("--no-clamp", action="store_true", help="keep negative cosine edges")
    t.add_argument("--graph-adapter", action="store_true", help="drop the variance path")
    t.add_argument("--deterministic", action="store_true", help="fixed-order reductions for bit-exact runs")

    e = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=_fmt)
    e.add_argument("--bundle", required=True, help="bundle directory")
    e.add_argument("--ckpt", required=True, help="checkpoint directory")
    e.add_argument("--split", default="test", help="split to evaluate")
    e.add_argument("--json", action="store_true", help="emit JSON")
    e.add_argument("--deterministic", action="store_true", help="fixed-order reductions")

    g = sub.add_parser("gradcheck", help="finite-difference audit of the full pipeline", formatter_class=_fmt)
    g.add_argument("--seed", type=int, default=0, help="instance seed")
    g.add_argument("--tol", type=float, default=1e-4, help="max relative error")
    g.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    g.add_argument("--json", action="store_true", help="emit JSON")

    w = sub.add_parser("sweep", help="grid over (lambda, beta), CSV of accuracies", formatter_class=_fmt)
    w.add_argument("--bundle", required=True, help="bundle directory")
    w.add_argument("--lambda-grid", type=float, nargs="+", required=True, help="lambda values")
    w.add_argument("--beta-grid", type=float, nargs="+", required=True, help="beta values")
    w.add_argument("--split", default=None, help="evaluation split (default: val if present, else test)")
    w.add_argument("--epochs", type=int, default=50, help="training epochs per run")
    w.add_argument("--seed", type=int, default=0, help="training seed")
    w.add_argument("--out", default=None, help="CSV path (default: stdout)")
    w.add_argument("--json", action="store_true", help="emit JSON instead of CSV")

    i = sub.add_parser("inspect", help="dump per-class Gaussians and adjacency rows", formatter_class=_fmt)
    i.add_argument("--ckpt", required=True, help="checkpoint directory")
    i.add_argument("--bundle", required=True, help="bundle directory")
    i.add_argument("--out", required=True, help="CSV path")
    return p


def _write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def cmd_synth(a) -> int:
    cfg = SynthConfig(classes=a.classes, train_per_class=a.shots, test_per_class=a.test_shots,
                      val_per_class=a.val_shots, descriptions=a.desc, d_text=a.dim,
                      aux_dims=tuple(a.aux_dims), desc_noise=a.desc_noise, vis_noise=a.vis_noise,
                      mixing_seed=a.mixing_seed, seed=a.seed)
    bundle = synth_generate(cfg)
    save_bundle(bundle, a.out)
    print(f"wrote bundle {a.out}: C={bundle.C} M={bundle.M} D={bundle.D_text} "
          f"branches={[b['name'] for b in bundle.branches]} splits={ {k: v.n for k, v in bundle.splits.items()} }")
    return 0


def _train_config(a) -> TrainConfig:
    return TrainConfig(lr=a.lr, epochs=a.epochs, batch_size=a.batch, alpha=a.alpha, lam=a.lam, beta=a.beta,
                       layers=a.layers, hidden=a.hidden, weight_decay=a.weight_decay, seed=a.seed,
                       fusion=a.fusion, use_aux=not a.no_aux, detach_kappa=a.detach_kappa,
                       normalize_zs=not a.raw_zero_shot, clamp_negative=not a.no_clamp,
                       graph_adapter=a.graph_adapter, deterministic=a.deterministic)


def cmd_train(a) -> int:
    cfg = _train_config(a)
    bundle = load_bundle(a.bundle)
    ckpt, history = train(bundle, cfg, on_epoch=lambda r: log.info(json.dumps(r)))
    metrics = "".join(json.dumps(r) + "\n" for r in history)
    save_checkpoint(ckpt, a.out, {"metrics.jsonl": metrics})
    last = history[-1]
    print(f"wrote checkpoint {a.out}: epochs={cfg.epochs} train_loss={last['train_loss']:.6f} "
          f"train_acc={last['train_acc']:.4f}")
    return 0


def cmd_eval(a) -> int:
    bundle = load_bundle(a.bundle)
    m = evaluate(load_checkpoint(a.ckpt), bundle, a.split, a.deterministic)
    m["split"] = a.split
    if a.json:
        print(json.dumps(m))
    else:
        print(f"split={a.split} n={m['n']} accuracy={m['accuracy']:.6f} mean_loss={m['mean_loss']:.6f}")
    return 0


def cmd_gradcheck(a) -> int:
    r = pipeline_grad_check(a.seed, a.h, a.tol)
    if a.json:
        print(json.dumps({"max_rel_err": r.max_rel_err, "pass": r.passed, "checked": r.checked,
                          "per_param": r.per_param}))
    else:
        for name, err in r.per_param.items():
            print(f"{name:14s} max_rel_err={err:.3e}")
        print(f"checked={r.checked} max_rel_err={r.max_rel_err:.3e} tol={a.tol:g} "
              f"{'PASS' if r.passed else 'FAIL'}")
    if not r.passed:
        raise NumericalError(f"gradient check failed: max_rel_err {r.max_rel_err:.3e} >= {a.tol:g} at {r.worst}")
    return 0


def cmd_sweep(a) -> int:
    bundle = load_bundle(a.bundle)
    split = a.split
    if split is None:
        split = "val" if "val" in bundle.splits else "test"
        if split == "test":
            log.warning("bundle has no val split; sweeping on test")
    rows = sweep(bundle, TrainConfig(epochs=a.epochs, seed=a.seed), a.lambda_grid, a.beta_grid, split)
    text = json.dumps(rows) + "\n" if a.json else rows_to_csv(rows)
    if a.out:
        _write_text_atomic(a.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_inspect(a) -> int:
    rows = inspect_rows(load_checkpoint(a.ckpt), load_bundle(a.bundle))
    _write_text_atomic(a.out, rows_to_csv(rows))
    print(f"wrote {len(rows)} rows to {a.out}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "sweep": cmd_sweep, "inspect": cmd_inspect}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageExit:
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except VRGError as e:
        print(f"vrgadapter {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"vrgadapter {args.command}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
