"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criteria 7 and 8 train three desk-scale models. Their artifacts (dataset, checkpoints,
reports, timings) are cached under ``PAADETECT_ACCEPTANCE_DIR`` (default
``<repo>/.acceptance``) and reused on later runs; set ``PAADETECT_ACCEPTANCE_FRESH=1``
to recompute everything.
"""

import json
import math
import os
import shutil
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import BankOracle, attention_params, brute_density_peaks, linear_min_perturbation, naive_axial
from paadetect.ablate import apply_row
from paadetect.attacks import ATTACK_DEFAULTS, LinearModel, bim, deepfool, fgsm, jsma, logits_of, pgd
from paadetect.bench import bench_paa
from paadetect.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from paadetect.config import Config
from paadetect.data import SyntheticDatasetSpec, generate_dataset, load_dataset
from paadetect.encoder import PAAEncoder, attention_param_specs, axial_attention_1d, init_param
from paadetect.evaluate import evaluate
from paadetect.gradchecks import TOLERANCE, run_gradchecks
from paadetect.losses import concentration, icl_loss, infonce_loss, pce_loss, pm_loss
from paadetect.prototypes import DiscriminationBank, density_peaks, density_scores, pairwise_distances
from paadetect.tensor import Tensor, no_grad, precision
from paadetect.tensor.io import ten_bytes
from paadetect.train import checkpoint_entries, init_state, train

CACHE = Path(os.environ.get("PAADETECT_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / ".acceptance"))
FRESH = os.environ.get("PAADETECT_ACCEPTANCE_FRESH") == "1"


def verdict(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {num} {'PASS' if ok else 'FAIL'}: {title}; {detail}"
    ACCEPTANCE_LINES[num] = line
    print(line)
    assert ok, line


# -- 1 ------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    rows = run_gradchecks("all", seed=0, configs=5)
    elapsed = time.perf_counter() - start
    checks = {}
    for r in rows:
        # block configurations are labelled by size; count them as one check
        name = "paa" if r["check"].startswith("paa") else r["check"]
        checks.setdefault(name, []).append(r["error"])
    needed = {"infonce", "pm", "pce", "icl", "total", "paa"}
    worst = max(r["error"] for r in rows)
    ok = (needed <= set(checks) and all(len(v) >= 5 for v in checks.values())
          and worst < TOLERANCE and elapsed < 120)
    verdict(1, "gradient checks", ok,
            f"{len(checks)} checks x >=5 configs, max rel err {worst:.2e} (< {TOLERANCE:g}), {elapsed:.1f}s (< 120s)")


# -- 2 ------------------------------------------------------------------------


def _naive_equivalence(trials: int = 40) -> float:
    worst = 0.0
    for seed in range(trials):
        rng = np.random.default_rng(1000 + seed)
        heads = int(rng.choice([1, 2, 4]))
        channels = heads * int(rng.integers(1, 4))
        h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        axis = "height" if seed % 2 else "width"
        length = h if axis == "height" else w
        specs = attention_param_specs("attn", channels, length, heads)
        params = {k: Tensor(init_param(s, rng, np.float64), dtype=np.float64) for k, s in specs.items()}
        x = rng.standard_normal((2, channels, h, w))
        with precision("float64"):
            got = axial_attention_1d(Tensor(x), axis, params, None, "attn", heads, training=True).data
        want = naive_axial(x, axis, attention_params(params, "attn"), heads)
        worst = max(worst, float(np.abs(got - want).max()))
    return worst


def test_criterion_2_parallel_branches_and_equivalence(tmp_path):
    enc = PAAEncoder("XS", seed=0)
    rng = np.random.default_rng(2)
    identical = 0
    for _ in range(10):
        x = Tensor(rng.uniform(0, 1, (10, 3, 32, 32)).astype(np.float32))
        with no_grad():
            seq = enc.forward(x, training=False, parallel=False).data
            par = enc.forward(x, training=False, parallel=True).data
        identical += int(np.all(seq == par, axis=1).sum())
    naive_err = _naive_equivalence()
    bench = bench_paa(sizes=(64,), workers=(1, 4), repeats=2)
    row4 = next(r for r in bench if r["workers"] == 4)
    ok = identical == 100 and naive_err <= 1e-5 and all(r["identical"] for r in bench)
    verdict(2, "parallel branches and axial equivalence", ok,
            f"{identical}/100 inputs bit-identical, naive max abs err {naive_err:.1e} (<= 1e-5), "
            f"bench 64x64 at 4 workers ratio {row4['ratio']:.2f} on {row4['cpus']} cpu(s) (target <= 0.75, reported)")


# -- 3 ------------------------------------------------------------------------


def test_criterion_3_loss_unit_values():
    hand = math.log(1.0 + math.exp(-1.0))
    e1, e2 = np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]])
    with pytest.warns(RuntimeWarning):
        pm_single = float(pm_loss(Tensor(e1), Tensor(e2), 0.1).data)
    values = {
        "infonce": float(infonce_loss(Tensor(e1), Tensor(e1), Tensor(e2), 1.0).data),
        "pm": float(pm_loss(Tensor(np.vstack([e1, e2])), Tensor(np.vstack([e1, e2])), 1.0).data),
        "pce": float(pce_loss(Tensor(e1), np.array([0]), np.vstack([e1, e2]), np.array([1.0, 1.0])).data),
        "icl": float(icl_loss(Tensor(e1), [np.vstack([e1, e2])], e1, np.array([1.0])).data),
    }
    hand_err = max(abs(v - hand) for v in values.values())
    rng = np.random.default_rng(3)
    homog = 0.0
    for _ in range(50):
        p, off, c = rng.standard_normal(6), rng.standard_normal((9, 6)), float(rng.uniform(0.01, 100))
        g1, gc = concentration(p + off, p, 10.0), concentration(p + c * off, p, 10.0)
        homog = max(homog, abs(gc - c * g1) / (c * g1))
    p = rng.standard_normal(6)
    cluster = p + rng.standard_normal((12, 6))
    betas = np.geomspace(0.1, 1000, 40)
    gam = [concentration(cluster, p, b) for b in betas]
    decreasing = all(a > b for a, b in zip(gam, gam[1:]))
    ok = pm_single == 0.0 and abs(hand - 0.3133) < 1e-4 and hand_err < 1e-4 and homog < 1e-12 and decreasing
    verdict(3, "loss unit values", ok,
            f"pm(B=1)={pm_single}, hand cases max err {hand_err:.1e} (< 1e-4), "
            f"homogeneity rel err {homog:.1e}, gamma(beta) strictly decreasing={decreasing}")


# -- 4 ------------------------------------------------------------------------


def test_criterion_4_clustering_oracle():
    start = time.perf_counter()
    matched = 0
    for seed in range(50):
        rng = np.random.default_rng(4000 + seed)
        n = int(rng.integers(2, 65))
        m = int(rng.integers(1, min(n, 10) + 1))
        emb = rng.standard_normal((n, int(rng.integers(2, 17))))
        x = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        d = np.unique(np.round(pairwise_distances(x)[np.triu_indices(n, 1)], 12))
        if len(d) > 1:
            k = int(rng.integers(1, len(d)))
            d_c = 0.5 * (d[k - 1] + d[k])  # between two distances, away from boundary ties
        else:
            d_c = float(d[0]) + 1e-6
        rho, delta, peaks, labels = brute_density_peaks(emb, m, d_c)
        got_rho, got_delta = density_scores(pairwise_distances(x), d_c)
        protos, got_labels = density_peaks(emb, m, d_c=d_c)
        matched += int(np.array_equal(got_rho, rho) and np.allclose(got_delta, delta, atol=1e-9, rtol=0)
                       and protos.peaks.tolist() == peaks.tolist() and got_labels.tolist() == labels.tolist())
    elapsed = time.perf_counter() - start
    verdict(4, "density peaks vs brute force", matched == 50 and elapsed < 60,
            f"{matched}/50 instances (n <= 64) match rho/delta/top-M/labels, {elapsed:.1f}s (< 60s)")


# -- 5 ------------------------------------------------------------------------


def test_criterion_5_bank_invariants():
    rng = np.random.default_rng(5)
    m, cap, d = 10, 10, 32
    bank, oracle = DiscriminationBank(m, d, cap), BankOracle(m, cap)
    over, order_bad, worst = 0, 0, 0.0
    for step in range(10_000):
        z = rng.standard_normal((int(rng.integers(1, 17)), d))
        a = rng.integers(0, m, len(z))
        bank.update(z, a, step)
        oracle.update(z, a, step)
        over += int((bank.occupancy() > cap).any())
        for k in set(a.tolist()):
            order_bad += int(bank.tags(k) != [t for t, _ in oracle.queues[k]])
            worst = max(worst, float(np.abs(bank.entries(k) - np.stack([e for _, e in oracle.queues[k]])).max()))
    verdict(5, "discrimination bank invariants", over == 0 and order_bad == 0 and worst <= 1e-6,
            f"10000 steps, capacity violations {over}, FIFO order violations {order_bad}, "
            f"max entry err {worst:.1e} (<= 1e-6)")


# -- 6 ------------------------------------------------------------------------


def test_criterion_6_attack_invariants():
    rng = np.random.default_rng(6)
    shape, k = (3, 32, 32), 10
    dim = int(np.prod(shape))
    model = LinearModel(rng.standard_normal((dim, k)) * 0.02, rng.standard_normal(k) * 0.1)
    x = rng.uniform(0, 1, (1000,) + shape)
    x[:100] = np.round(x[:100])  # saturated values exercise the box clip
    y = np.argmax(logits_of(model, x), axis=1)
    t = ATTACK_DEFAULTS
    box_ok = True
    for name, adv in (("FGSM", fgsm(model, x, y, t["FGSM"]["eps"])),
                      ("PGD", pgd(model, x, y, t["PGD"]["eps"], t["PGD"]["alpha"], t["PGD"]["steps"])),
                      ("BIM", bim(model, x, y, t["BIM"]["eps"], t["BIM"]["alpha"], t["BIM"]["steps"]))):
        box_ok &= bool(np.abs(adv - x).max() <= t[name]["eps"] and adv.min() >= 0.0 and adv.max() <= 1.0)
    eps = t["PGD"]["eps"]
    pgd_fgsm = all(np.array_equal(pgd(model, x, y, eps, alpha, 1), fgsm(model, x, y, eps))
                   for alpha in (eps, t["PGD"]["alpha"]))
    inner = rng.uniform(0.3, 0.7, (1000,) + shape)
    df = deepfool(model, inner, **t["DeepFool"])
    rel = [abs(np.linalg.norm(df.extra["r_tot"][i])
               - np.linalg.norm(r := linear_min_perturbation(model.weight, model.bias, inner[i].reshape(-1))))
           / np.linalg.norm(r) for i in range(len(inner))]
    targets = (y + 1 + rng.integers(0, k - 1, len(y))) % k
    js = jsma(model, x, targets, gamma=t["JSMA"]["gamma"])
    budget = math.ceil(round(0.02 * dim, 9))
    changed = (js.x_adv != x).reshape(len(x), -1).sum(axis=1)
    ok = box_ok and pgd_fgsm and max(rel) < 0.02 and changed.max() <= budget
    verdict(6, "attack invariants", ok,
            f"1000 images, L-inf and box exact={box_ok}, PGD(1)==FGSM={pgd_fgsm}, "
            f"DeepFool max rel dev {max(rel):.2%} (< 2%), JSMA max modified {changed.max()} (<= {budget})")


# -- 7 and 8: desk runs -----------------------------------------------------------


def _desk_data():
    root = CACHE / "data"
    if FRESH or not (root / "index.csv").exists():
        shutil.rmtree(root, ignore_errors=True)
        generate_dataset(SyntheticDatasetSpec(classes=8, per_class=250, image_size=32, seed=0), root)
    return load_dataset(root)


def _trained_run(name: str, cfg: Config, data):
    """Train (or reuse) a desk run; returns (encoder, train seconds)."""
    from paadetect.train import load_trained

    out = CACHE / name
    timing = out / "timing.json"
    if FRESH or not timing.exists():
        shutil.rmtree(out, ignore_errors=True)
        start = time.perf_counter()
        train(cfg, data, out)
        timing.write_text(json.dumps({"train_seconds": time.perf_counter() - start, "cpus": os.cpu_count()}))
    enc, stored, _ = load_trained(out / "checkpoint.paac")
    assert stored.to_dict() == cfg.to_dict(), f"cached run {out} was trained with a different config"
    return enc, json.loads(timing.read_text())["train_seconds"]


def _report(name: str, encoder, cfg: Config, data) -> dict:
    out = CACHE / name / "eval"
    path = out / "report.json"
    if FRESH or not path.exists():
        evaluate(encoder, cfg, data, cfg.attack.attacks, 0.95, out_dir=out)
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def desk():
    data = _desk_data()
    cfg = Config.desk()
    enc, seconds = _trained_run("desk", cfg, data)
    return data, cfg, _report("desk", enc, cfg, data), seconds


@pytest.mark.slow
def test_criterion_7_desk_run(desk):
    data, cfg, rep, seconds = desk
    null = _report("null", init_state(cfg).encoder, cfg, data)
    null_dr = {r["attack"]: r["dr_attacked"] for r in null["attacks"]}
    per = [(r["algorithm"], r["dr_attacked"], null_dr[r["attack"]]) for r in rep["attacks"]]
    above = all(d > n for _, d, n in per)
    avg_auc = rep["average"]["auc"]
    ok = seconds < 1800 and rep["dr_clean"] >= 0.90 and above and avg_auc >= 0.7 and len(per) == 6
    verdict(7, "desk run", ok,
            f"train {seconds / 60:.1f} min (< 30), DR_clean {rep['dr_clean']:.3f} (>= 0.90), "
            + ", ".join(f"{a} {d:.3f} vs null {n:.3f}" for a, d, n in per)
            + f", avg AUC {avg_auc:.3f} (>= 0.7)")


@pytest.mark.slow
def test_criterion_8_ablation_order(desk):
    data, cfg, rep, _ = desk
    full = rep["average"]["dr_attacked"]
    rows = {}
    for name, row in (("pm-only", {"pm": True, "pce": False, "icl": False}),
                      ("pm+pce", {"pm": True, "pce": True, "icl": False})):
        run_cfg = apply_row(cfg, row)
        enc, _ = _trained_run(f"ablate_{name}", run_cfg, data)
        rows[name] = _report(f"ablate_{name}", enc, run_cfg, data)["average"]["dr_attacked"]
    ok = all(full >= v for v in rows.values())
    verdict(8, "ablation order", ok,
            f"full avg DR_attacked {full:.3f} vs " + ", ".join(f"{k} {v:.3f}" for k, v in rows.items()))


# -- 9 ------------------------------------------------------------------------


def test_criterion_9_determinism_and_persistence(tiny_data, tmp_path):
    cfg = Config.desk()
    cfg.train = cfg.train.__class__(**{**cfg.train.__dict__, "epochs": 2, "warmup_epochs": 1,
                                       "milestones": (), "batch_size": 32})
    cfg.bank = cfg.bank.__class__(**{**cfg.bank.__dict__, "num_prototypes": 4})
    train(cfg, tiny_data, tmp_path / "a")
    train(cfg, tiny_data, tmp_path / "b")
    same_metrics = (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    ckpt = (tmp_path / "a" / "checkpoint.paac").read_bytes()
    same_ckpt = ckpt == (tmp_path / "b" / "checkpoint.paac").read_bytes()
    save_checkpoint(tmp_path / "c.paac", load_checkpoint(tmp_path / "a" / "checkpoint.paac"))
    round_trip = (tmp_path / "c.paac").read_bytes() == ckpt

    # independent reading of the documented layouts
    arr = np.arange(12, dtype=np.float64).reshape(3, 4)
    ten = ten_bytes(arr)
    ten_ok = (ten[:4] == b"TEN1" and ten[4] == 1 and ten[5] == 2
              and struct.unpack_from("<2Q", ten, 6) == (3, 4) and ten[22:] == arr.astype("<f8").tobytes())
    magic, version, count = ckpt[:4], *struct.unpack_from("<II", ckpt, 4)
    pos, names = 12, []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", ckpt, pos)
        names.append(ckpt[pos + 2:pos + 2 + nlen].decode())
        pos += 2 + nlen
        assert ckpt[pos:pos + 4] == b"TEN1"
        code, ndim = ckpt[pos + 4], ckpt[pos + 5]
        dims = struct.unpack_from(f"<{ndim}Q", ckpt, pos + 6)
        itemsize = {0: 4, 1: 8, 2: 1, 3: 8}[code]
        pos += 6 + 8 * ndim + itemsize * int(np.prod(dims, dtype=np.int64))
    paac_ok = magic == b"PAAC" and version == 1 and pos == len(ckpt) and names == list(parse_checkpoint(ckpt))
    entries_ok = checkpoint_bytes(checkpoint_entries(init_state(cfg), cfg)) == checkpoint_bytes(
        checkpoint_entries(init_state(cfg), cfg))
    ok = same_metrics and same_ckpt and round_trip and ten_ok and paac_ok and entries_ok
    verdict(9, "determinism and persistence", ok,
            f"identical metrics={same_metrics}, identical checkpoints={same_ckpt}, "
            f"round trip byte-identical={round_trip}, .ten layout={ten_ok}, PAAC layout={paac_ok} ({count} entries)")
