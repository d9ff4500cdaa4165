"""Train-and-evaluate grids over loss terms, PAA depth and loss hyper-parameters."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import Config
from .data import Dataset
from .evaluate import evaluate
from .tensor import ConfigurationError, ContractError
from .train import train

log = logging.getLogger(__name__)

# switch -> (section, field)
SWITCHES = {
    "pm": ("train", "use_pm"),
    "pce": ("train", "use_pce"),
    "icl": ("train", "use_icl"),
    "paa_blocks": ("train", "paa_blocks"),
    "tau": ("loss", "tau"),
    "beta": ("loss", "beta"),
    "lambda1": ("loss", "lambda1"),
    "lambda2": ("loss", "lambda2"),
}


def expand_grid(grid) -> list[dict]:
    """Rows from a list of switch dicts, or the cartesian product of a ``{switch: [values]}`` dict."""
    if isinstance(grid, dict):
        keys = list(grid)
        rows = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    else:
        rows = [dict(r) for r in grid]
    if not rows:
        raise ContractError("the ablation grid is empty")
    for r in rows:
        bad = set(r) - set(SWITCHES) - {"name"}
        if bad:
            raise ConfigurationError(f"unknown ablation switches {sorted(bad)}; allowed {sorted(SWITCHES)}")
    return rows


def row_name(row: dict) -> str:
    if "name" in row:
        return str(row["name"])
    terms = [k for k in ("pm", "pce", "icl") if row.get(k)]
    rest = [f"{k}={row[k]}" for k in row if k not in ("pm", "pce", "icl")]
    return "+".join(terms) + ("," if terms and rest else "") + ",".join(rest)


def apply_row(cfg: Config, row: dict) -> Config:
    sections = {name: getattr(cfg, name) for name in ("train", "loss", "augment", "bank", "attack")}
    for key, value in row.items():
        if key == "name":
            continue
        sec, fld = SWITCHES[key]
        sections[sec] = replace(sections[sec], **{fld: value})
    return Config(**sections)


def ablate(cfg: Config, grid, data: Dataset, out_dir=None, figures: bool = True) -> list[dict]:
    rows = expand_grid(grid)
    out = Path(out_dir) if out_dir is not None else None
    results = []
    for row in rows:
        name = row_name(row)
        run_cfg = apply_row(cfg, row)
        sub = out / _slug(name) if out is not None else None
        state = train(run_cfg, data, sub)
        rep = evaluate(state.encoder, run_cfg, data, run_cfg.attack.attacks, run_cfg.attack.clean_pass_rate,
                       out_dir=sub, figures=figures)
        res = {
            "name": name,
            "switches": {k: v for k, v in row.items() if k != "name"},
            "dr_clean": rep["dr_clean"],
            "dr_attacked_avg": rep.get("average", {}).get("dr_attacked", float("nan")),
            "auc_avg": rep.get("average", {}).get("auc", float("nan")),
            "per_attack": {r["attack"]: r["dr_attacked"] for r in rep["attacks"]},
        }
        log.info("ablation %s: DR clean %.3f, DR attacked %.3f", name, res["dr_clean"], res["dr_attacked_avg"])
        results.append(res)
    if out is not None:
        write_ablation(out, results, figures)
    return results


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name) or "row"


def write_ablation(out: Path, rows: Sequence[dict], figures: bool = True) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(list(rows), indent=2, sort_keys=True) + "\n")
    attacks = sorted({a for r in rows for a in r["per_attack"]})
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "dr_clean", "dr_attacked_avg", "auc_avg"] + attacks)
        for r in rows:
            w.writerow([r["name"], r["dr_clean"], r["dr_attacked_avg"], r["auc_avg"]]
                       + [r["per_attack"].get(a, "") for a in attacks])
    if figures:
        from .plotting import ablation_bars
        ablation_bars(rows, out / "ablation.png")
