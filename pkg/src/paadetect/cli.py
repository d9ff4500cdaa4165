"""Command-line entry point: ``paadetect <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path


log = logging.getLogger("paadetect")


def _load_json(path):
    return json.loads(Path(path).read_text())


def cmd_generate_data(args) -> int:
    from .data import SyntheticDatasetSpec, generate_dataset

    spec = SyntheticDatasetSpec(**_load_json(args.spec)) if args.spec else SyntheticDatasetSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out = generate_dataset(spec, args.out)
    print(f"wrote {spec.classes * spec.per_class} images to {out}")
    return 0


def _config(args):
    from .config import Config

    cfg = Config.load(args.config) if getattr(args, "config", None) else Config.desk()
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def cmd_train(args) -> int:
    from .data import load_dataset
    from .plotting import training_curves
    from .train import train

    cfg = _config(args)
    out = Path(args.out)
    state = train(cfg, load_dataset(args.data), out, epochs=args.epochs)
    training_curves(state.history, out / "training.png")
    print(f"checkpoint: {out / 'checkpoint.paac'}\nmetrics: {out / 'metrics.jsonl'}")
    return 0


def _attacks(path, cfg):
    from .config import AttackConfig

    if not path:
        return cfg.attack.attacks
    doc = _load_json(path)
    return AttackConfig(attacks=doc if isinstance(doc, list) else doc.get("attacks", [])).attacks


def cmd_evaluate(args) -> int:
    from .data import load_dataset
    from .evaluate import evaluate
    from .train import load_trained

    enc, cfg, _ = load_trained(args.checkpoint)
    q = args.clean_pass_rate if args.clean_pass_rate is not None else cfg.attack.clean_pass_rate
    out = Path(args.out or Path(args.checkpoint).parent / "eval")
    report = evaluate(enc, cfg, load_dataset(args.data), _attacks(args.attacks, cfg), q, out,
                      seed=args.seed or 0)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["attack", "dr_clean", "dr_attacked", "auc"])
    for r in report["attacks"]:
        w.writerow([r["attack"], f"{r['dr_clean']:.4f}", f"{r['dr_attacked']:.4f}", f"{r['auc']:.4f}"])
    if "average" in report:
        w.writerow(["average", f"{report['dr_clean']:.4f}", f"{report['average']['dr_attacked']:.4f}",
                    f"{report['average']['auc']:.4f}"])
    else:
        w.writerow(["clean", f"{report['dr_clean']:.4f}", "", ""])
    print(f"report: {out / 'report.json'}", file=sys.stderr)
    return 0


def cmd_attack(args) -> int:
    from .data import load_dataset
    from .evaluate import write_attacked
    from .train import load_trained

    enc, cfg, _ = load_trained(args.checkpoint)
    manifest = write_attacked(Path(args.out), load_dataset(args.data), enc, cfg, _attacks(args.attacks, cfg),
                              split=args.split, seed=args.seed or 0)
    print(f"manifest: {manifest}")
    return 0


def cmd_ablate(args) -> int:
    from .ablate import ablate
    from .data import load_dataset

    cfg = _config(args)
    rows = ablate(cfg, _load_json(args.grid), load_dataset(args.data), Path(args.out))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["name", "dr_clean", "dr_attacked_avg", "auc_avg"])
    for r in rows:
        w.writerow([r["name"], f"{r['dr_clean']:.4f}", f"{r['dr_attacked_avg']:.4f}", f"{r['auc_avg']:.4f}"])
    return 0


def cmd_gradcheck(args) -> int:
    from .gradchecks import run_gradchecks

    rows = run_gradchecks(args.module, seed=args.seed or 0)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["check", "config", "max_rel_err", "pass"])
    ok = True
    for r in rows:
        w.writerow([r["check"], r["config"], f"{r['error']:.3e}", int(r["pass"])])
        ok &= r["pass"]
    return 0 if ok else 1


def cmd_bench(args) -> int:
    from .bench import bench_paa
    from .plotting import bench_plot

    sizes = [int(s) for s in args.sizes.split(",")]
    workers = sorted({1, args.workers})
    rows = bench_paa(sizes, workers, batch=args.batch, repeats=args.repeats, seed=args.seed or 0)
    cols = ["size", "workers", "sequential_s", "parallel_s", "ratio", "identical", "cpus"]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([f"{r[c]:.5f}" if isinstance(r[c], float) else r[c] for c in cols])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.csv", "w", newline="") as fh:
            cw = csv.writer(fh, lineterminator="\n")
            cw.writerow(cols)
            cw.writerows([r[c] for c in cols] for r in rows)
        bench_plot(rows, out / "bench.png")
    return 0 if all(r["identical"] for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paadetect", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--threads", type=int, default=1, help="workers for the two attention branches")
    p.add_argument("--verbose", "-v", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic PPM dataset")
    g.add_argument("--spec", help="JSON dataset spec (classes, per_class, image_size, noise, seed)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="self-supervised training")
    t.add_argument("--config", help="JSON config; missing values take desk defaults")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=None, help="stop after this many epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="detection rates under attack")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--attacks", help="JSON list of attacks (names or objects); default: config")
    e.add_argument("--clean-pass-rate", type=float, default=None)
    e.add_argument("--out", help="report directory (default: <checkpoint dir>/eval)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("attack", help="write attacked images and a manifest")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--attacks")
    a.add_argument("--split", default="test")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    ab = sub.add_parser("ablate", help="train and evaluate a grid of configurations")
    ab.add_argument("--config")
    ab.add_argument("--grid", required=True)
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True)
    ab.set_defaults(func=cmd_ablate)

    gc = sub.add_parser("gradcheck", help="finite-difference checks of losses and the PAA block")
    gc.add_argument("--module", choices=("all", "losses", "paa"), default="all")
    gc.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="sequential vs concurrent attention branches")
    b.add_argument("--workers", type=int, default=4)
    b.add_argument("--sizes", default="16,32,64")
    b.add_argument("--batch", type=int, default=2)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    from .encoder import set_branch_workers
    from .tensor import ConfigurationError, ContractError

    set_branch_workers(args.threads)
    try:
        return args.func(args)
    except (ConfigurationError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
