"""Detection evaluation: prototypes, calibration, attacks and report files."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AttackSpec, EncoderClassifier, ProbeHead, run_attack
from .config import Config
from .data import Dataset, write_image
from .detector import DetectionResult, auc, calibrate_threshold, detection_rate, embed, similarity_scores
from .encoder import PAAEncoder
from .prototypes import Prototypes, density_peaks
from .tensor import ContractError, save_ten

log = logging.getLogger(__name__)


@dataclass
class Detector:
    encoder: PAAEncoder
    prototypes: Prototypes
    probe: ProbeHead
    theta: float


def build_detector(encoder: PAAEncoder, cfg: Config, data: Dataset, q: float) -> Detector:
    """Prototypes and probe from the training split, threshold from the validation split."""
    x_train, y_train = data.split("train")
    x_val, _ = data.split("val")
    m = cfg.bank.num_prototypes
    if len(x_train) < m:
        raise ContractError(f"cannot build {m} prototypes from {len(x_train)} training images")
    emb_train = embed(encoder, x_train)
    protos, _ = density_peaks(emb_train, m, beta=cfg.loss.beta, fraction=cfg.bank.density_fraction)
    probe = ProbeHead(emb_train.shape[1], data.classes).fit(emb_train, y_train, epochs=cfg.attack.probe_epochs)
    theta = calibrate_threshold(similarity_scores(embed(encoder, x_val), protos), q)
    return Detector(encoder, protos, probe, theta)


def attack_norms(x: np.ndarray, adv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = (adv - x).reshape(len(x), -1)
    return np.abs(d).max(axis=1), np.sqrt((d * d).sum(axis=1))


def evaluate(encoder: PAAEncoder, cfg: Config, data: Dataset, attacks: Sequence[AttackSpec],
             q: float, out_dir=None, seed: int = 0, figures: bool = True) -> dict:
    """Report with DR_clean, per-attack DR_attacked/AUC and their averages.

    With ``out_dir`` also writes ``report.json``, ``detection.csv``,
    ``scores.csv``, embeddings (``.ten`` + index CSV) and figures.
    """
    det = build_detector(encoder, cfg, data, q)
    x_test, y_test = data.split("test")
    if len(x_test) == 0:
        raise ContractError("the dataset has no test split")
    clean = DetectionResult(similarity_scores(embed(encoder, x_test), det.prototypes), det.theta)
    dr_clean = float(clean.clean.mean())
    model = EncoderClassifier(encoder, det.probe)
    probe_acc = float((det.probe.predict(embed(encoder, x_test)) == y_test).mean())
    rows, attacked_scores, adv_images = [], {}, {}
    for spec in attacks:
        res = run_attack(spec, model, x_test, y_test, data.classes, seed=seed)
        adv = res.x_adv.astype(np.float32)
        scores = similarity_scores(embed(encoder, adv), det.prototypes)
        result = DetectionResult(scores, det.theta)
        _, dr_att = detection_rate(clean, result)
        linf, l2 = attack_norms(x_test.astype(np.float64), res.x_adv)
        rows.append({
            "attack": spec.label,
            "algorithm": spec.algorithm,
            "dr_clean": dr_clean,
            "dr_attacked": dr_att,
            "auc": auc(clean.scores, scores),
            "attack_success": float(res.success.mean()),
            "mean_linf": float(linf.mean()),
            "max_linf": float(linf.max()),
            "mean_l2": float(l2.mean()),
            "mean_score": float(scores.mean()),
        })
        attacked_scores[spec.label] = scores
        adv_images[spec.label] = (res, linf, l2)
        log.info("%s: DR attacked %.3f, AUC %.3f, success %.3f", spec.label, dr_att, rows[-1]["auc"],
                 rows[-1]["attack_success"])
    report = {
        "theta": det.theta,
        "clean_pass_rate": q,
        "dr_clean": dr_clean,
        "probe_accuracy": probe_acc,
        "mean_clean_score": float(clean.scores.mean()),
        "test_images": int(len(x_test)),
        "attacks": rows,
    }
    if rows:
        report["average"] = {
            "dr_attacked": float(np.mean([r["dr_attacked"] for r in rows])),
            "auc": float(np.mean([r["auc"] for r in rows])),
        }
    if out_dir is not None:
        write_report(Path(out_dir), report, clean.scores, attacked_scores, encoder, data, figures)
    return report


def write_report(out: Path, report: dict, clean_scores: np.ndarray, attacked: dict, encoder: PAAEncoder,
                 data: Dataset, figures: bool = True) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    cols = ["attack", "dr_clean", "dr_attacked", "auc", "attack_success", "mean_linf", "max_linf", "mean_l2", "mean_score"]
    with open(out / "detection.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in report["attacks"]:
            w.writerow([r[c] for c in cols])
        if "average" in report:
            w.writerow(["average", report["dr_clean"], report["average"]["dr_attacked"], report["average"]["auc"]]
                       + [""] * (len(cols) - 4))
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", "row", "score"])
        w.writerows(("clean", i, f"{s:.8f}") for i, s in enumerate(clean_scores))
        for name, scores in attacked.items():
            w.writerows((name, i, f"{s:.8f}") for i, s in enumerate(scores))
    export_embeddings(out, encoder, data)
    if figures:
        from .plotting import detection_bars, score_histograms
        score_histograms(clean_scores, attacked, report["theta"], out / "scores.png")
        if report["attacks"]:
            detection_bars([r["attack"] for r in report["attacks"]],
                           [r["dr_attacked"] for r in report["attacks"]], report["dr_clean"], out / "detection.png")


def export_embeddings(out: Path, encoder: PAAEncoder, data: Dataset) -> None:
    emb = embed(encoder, data.images).astype(np.float32)
    save_ten(out / "embeddings.ten", emb)
    with open(out / "embeddings_index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "filename", "label", "split"])
        for i, (f, y, s) in enumerate(zip(data.files, data.labels, data.splits)):
            w.writerow([i, f, int(y), s])


def write_attacked(out: Path, data: Dataset, encoder: PAAEncoder, cfg: Config, attacks: Sequence[AttackSpec],
                   split: str = "test", seed: int = 0) -> Path:
    """Attacked copies of ``split`` as PPM files plus ``manifest.csv``."""
    det = build_detector(encoder, cfg, data, cfg.attack.clean_pass_rate)
    idx = data.indices(split)
    x, y = data.images[idx], data.labels[idx]
    model = EncoderClassifier(encoder, det.probe)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["original", "attacked", "algorithm", "params", "success", "linf", "l2"])
        for spec in attacks:
            res = run_attack(spec, model, x, y, data.classes, seed=seed)
            linf, l2 = attack_norms(x.astype(np.float64), res.x_adv)
            sub = out / spec.algorithm.lower()
            sub.mkdir(exist_ok=True)
            for j, i in enumerate(idx):
                name = Path(data.files[i]).name
                write_image(sub / name, res.x_adv[j])
                w.writerow([data.files[i], f"{sub.name}/{name}", spec.algorithm, spec.label,
                            int(res.success[j]), f"{linf[j]:.6f}", f"{l2[j]:.6f}"])
    return out / "manifest.csv"
