"""Acceptance criteria 1-8, each at its stated tolerance, one verdict line per criterion."""
import contextlib
import csv
import math
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE
from helpers import fp_collapse_check, ste_mask_check, system_gradcheck, toy_config
from oracles import grid_search_step

from cmtkd.distill import attention_loss
from cmtkd.ensemble import kl_to_target, min_logit_ensemble, mutual_kl_losses, target_distribution
from cmtkd.functional import global_avg_pool2d, softmax
from cmtkd.fusion import fuse
from cmtkd.harness.checkpoint import load_checkpoint
from cmtkd.harness.config import ArchConfig, load_config
from cmtkd.harness.data import generate_splits, load_dataset, read_dataset, write_dataset
from cmtkd.harness.train import Trainer, build_models, evaluate_checkpoint, run_experiment
from cmtkd.netbuilder import collaborative_forward, student_forward
from cmtkd.quantizers import design_gaussian_levels
from cmtkd.tensor import Tensor, no_grad

ROOT = Path(__file__).resolve().parent.parent
DESK_CONFIG = ROOT / "configs" / "desk_cmtkd.toml"


@contextlib.contextmanager
def criterion(n: int, title: str):
    """Record PASS or FAIL for criterion ``n``; ``details`` collects the numbers behind the verdict."""
    details: list[str] = []
    t0 = time.perf_counter()
    try:
        yield details
    except BaseException as exc:
        reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        details.append(f"failed: {reason[:200]}")
        ACCEPTANCE[n] = _line(n, "FAIL", title, details, t0)
        print(ACCEPTANCE[n])
        raise
    ACCEPTANCE[n] = _line(n, "PASS", title, details, t0)
    print(ACCEPTANCE[n])


def _line(n, verdict, title, details, t0):
    extra = "; ".join(details)
    return f"criterion {n} {verdict}: {title} [{time.perf_counter() - t0:.1f}s]" + (f" ({extra})" if extra else "")


@pytest.fixture(scope="module")
def desk_cfg():
    return load_config(DESK_CONFIG)


@pytest.fixture(scope="module")
def desk_data(desk_cfg):
    return load_dataset(desk_cfg.data_path, np.float64)


def test_criterion_1_quantizer_oracle():
    with criterion(1, "Gaussian quantizer step sizes match a brute-force grid search") as d:
        t0 = time.perf_counter()
        designed = {(b, hw): design_gaussian_levels(b, hw) for b in (1, 2, 3, 4) for hw in (True, False)}
        runtime = time.perf_counter() - t0
        worst = 0.0
        for (b, hw), lv in designed.items():
            ref = grid_search_step(b, hw)
            assert abs(lv.step - ref) < 1e-4, f"b={b} half_wave={hw}: {lv.step} vs oracle {ref}"
            worst = max(worst, abs(lv.step - ref))
        level = designed[(1, True)].levels.max()
        assert abs(level - math.sqrt(2 / math.pi)) < 1e-4
        assert runtime < 10.0
        d.append(f"max |step - oracle| {worst:.1e}, design time {runtime:.2f}s")


def test_criterion_2_system_gradcheck():
    with criterion(2, "whole-system gradients match central differences") as d:
        t0 = time.perf_counter()
        for quantizer, feat in (("lsq", "fitnet"), ("hwgq", "attention")):
            cfg = toy_config(quantizer, feat)
            errors = system_gradcheck(cfg)
            expected = {"teacher weights", "student weights", "rho logits", "teacher head"}
            expected |= {"lsq step sizes"} if quantizer == "lsq" else set()
            expected |= {"fitnet adapter"} if feat == "fitnet" else set()
            assert expected <= set(errors), f"missing groups {expected - set(errors)}"
            for group, err in errors.items():
                assert err < 1e-4, f"{quantizer}/{feat} {group}: relative error {err:.2e}"
            assert ste_mask_check(cfg) > 0
            d.append(f"{quantizer}/{feat} max rel err {max(errors.values()):.1e}")
        assert time.perf_counter() - t0 < 120.0


def test_criterion_3_importance_factors(desk_cfg, desk_data, tmp_path):
    with criterion(3, "importance factors stay on the simplex; fusion is permutation and shift invariant") as d:
        steps = 500
        per_epoch = len(desk_data.train_y) // desk_cfg.batch_size
        cfg = desk_cfg.replace(epochs=math.ceil(steps / per_epoch), max_steps=steps, save_checkpoints=False)
        run_experiment(cfg, tmp_path, desk_data)
        sums = defaultdict(float)
        with open(tmp_path / "pi.csv") as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            v = float(r["pi_value"])
            assert 0.0 <= v <= 1.0
            sums[(int(r["step"]), int(r["layer_index"]))] += v
        assert len(rows) == steps * len(cfg.fusion_indices) * len(cfg.teacher_bits)
        assert len(sums) == steps * len(cfg.fusion_indices)
        worst = max(abs(s - 1.0) for s in sums.values())
        assert worst <= 1e-9
        d.append(f"{len(rows)} pi rows, max |sum - 1| {worst:.1e}")

        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 6))
            acts = [Tensor(rng.normal(size=(2, 3, 4, 4))) for _ in range(n)]
            rho = rng.normal(0, 3, n)
            base = fuse(acts, Tensor(rho)).data
            perm = rng.permutation(n)
            permuted = fuse([acts[i] for i in perm], Tensor(rho[perm])).data
            shifted = fuse(acts, Tensor(rho + rng.normal(0, 10))).data
            np.testing.assert_allclose(permuted, base, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(shifted, base, rtol=1e-12, atol=1e-12)
            pi = softmax(Tensor(rho)).data
            assert abs(pi.sum() - 1.0) <= 1e-9 and pi.min() >= 0.0


def test_criterion_4_min_logit():
    with criterion(4, "min-logit ensemble properties and worked example") as d:
        rng = np.random.default_rng(4)
        for _ in range(1000):
            n, m = int(rng.integers(1, 5)), int(rng.integers(2, 12))
            zt, zs = rng.normal(0, 5, (n, m)), rng.normal(0, 5, (n, m))
            c = rng.integers(0, m, n)
            rows = np.arange(n)
            zb = min_logit_ensemble(zt, zs, c)
            assert np.all(zb[rows, c] == 0.0)
            assert np.all(zb <= zt - zt[rows, c][:, None]) and np.all(zb <= zs - zs[rows, c][:, None])
            a, b = rng.normal(0, 50, (n, 1)), rng.normal(0, 50, (n, 1))
            np.testing.assert_allclose(min_logit_ensemble(zt + a, zs + b, c), zb, rtol=0, atol=1e-12)
        got = min_logit_ensemble(np.array([[2.0, 5.0, 1.0]]), np.array([[3.0, 4.0, 2.0]]), [1])
        assert got.tolist() == [[-3.0, 0.0, -4.0]]
        d.append("1000 triples, worked example exact")


def test_criterion_5_loss_invariants(tmp_path):
    with criterion(5, "attention and KL loss invariants; loss accounting identity") as d:
        rng = np.random.default_rng(5)
        for _ in range(100):
            ft, fs = rng.normal(size=(4, 3, 5, 5)), rng.normal(size=(4, 5, 5, 5))
            base = attention_loss(Tensor(ft), Tensor(fs)).item()
            scaled = attention_loss(Tensor(ft * rng.uniform(1e-3, 1e3)), Tensor(fs * rng.uniform(1e-3, 1e3))).item()
            assert abs(scaled - base) <= 1e-9
            for i in range(4):
                one = attention_loss(Tensor(ft[i : i + 1]), Tensor(fs[i : i + 1])).item()
                assert 0.0 <= one <= 2.0

        for _ in range(100):
            n, m, temp = 3, int(rng.integers(2, 10)), float(rng.uniform(0.5, 8))
            zt, zs = rng.normal(0, 3, (n, m)), rng.normal(0, 3, (n, m))
            p = target_distribution(zt, temp)
            kl = kl_to_target(p, Tensor(zs), temp).item()
            assert kl >= 0.0
            assert abs(kl_to_target(p, Tensor(zt), temp).item()) <= 1e-9
            q = target_distribution(zs, temp)
            direct = np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1))
            assert abs(kl - temp**2 * direct) <= 1e-9
            zb = min_logit_ensemble(zt, zs, rng.integers(0, m, n))
            lt, ls = mutual_kl_losses(zb, Tensor(zt), Tensor(zs), temp)
            pb = target_distribution(zb, temp)
            assert abs(lt.item() - temp**2 * np.mean(np.sum(pb * (np.log(pb) - np.log(p)), axis=1))) <= 1e-9

        generate_splits(tmp_path, 3, 8, (8, 8), seed=0)
        data = load_dataset(tmp_path)
        arch = ArchConfig(layers=["c4", "M", "c6"], in_channels=3, image_size=[8, 8], num_classes=3)
        steps = 0
        for quantizer, feat in (("hwgq", "attention"), ("lsq", "fitnet")):
            cfg = toy_config(quantizer, feat, teacher_bits=[4, 8], fusion_indices=[1, 2], arch=arch, batch_size=8, epochs=2)
            tr = Trainer(cfg, data)
            w = tr.weights
            for epoch in range(cfg.epochs):
                for xb, yb in tr.loader.epoch():
                    r = tr.train_step(xb, yb, 0.05, epoch)
                    c = r.components
                    expect = w.alpha * (c["ce_S"] + c["ce_T"]) + w.beta * (c["kl_S"] + c["kl_T"]) + w.gamma * c["feat"]
                    assert abs(r.loss_total - expect) <= 1e-9
                    steps += 1
        d.append(f"accounting identity held on {steps} steps")


@pytest.mark.slow
def test_criterion_6_directional_ablation(desk_cfg, desk_data):
    with criterion(6, "directional ablation on the desk dataset, 3 seeds") as d:
        t0 = time.perf_counter()
        presets = ("single", "cmtkd_no_att", "cmtkd_no_ml", "cmtkd")
        means = {}
        for preset in presets:
            accs = [run_experiment(desk_cfg.replace(preset=preset, seed=s, save_checkpoints=False), None, desk_data).final.student.top1
                    for s in (0, 1, 2)]
            means[preset] = float(np.mean(accs))
            d.append(f"{preset} {means[preset]:.2f}")
        runtime = time.perf_counter() - t0
        d.append(f"{runtime / 60:.1f} min")
        assert len(desk_data.train_y) >= 2000 and len(desk_data.test_y) >= 500 and desk_data.num_classes == 10
        assert means["cmtkd"] >= means["single"], "cmtkd below the single 2-bit student"
        assert means["cmtkd"] >= means["cmtkd_no_att"] - 0.5, "cmtkd below cmtkd_no_att - 0.5"
        assert means["cmtkd"] >= means["cmtkd_no_ml"] - 0.5, "cmtkd below cmtkd_no_ml - 0.5"
        assert runtime < 30 * 60


def test_criterion_7_collapse(desk_cfg, tmp_path):
    with criterion(7, "one-hot, single-teacher and 2-bit collapse checks") as d:
        rng = np.random.default_rng(7)
        arch = desk_cfg.arch
        x = Tensor(rng.normal(size=(8, arch.in_channels, *arch.image_size)))
        models = build_models(desk_cfg.replace(seed=7))
        ens = models.ensemble
        last = desk_cfg.fusion_indices[-1]
        with no_grad():
            for j, teacher in enumerate(ens.teachers):
                ens.importance.set_one_hot(j)
                fused, z = collaborative_forward(ens, x)
                h = teacher.run(x, 0, last)
                np.testing.assert_array_equal(fused[last].data, h.data)
                np.testing.assert_array_equal(z.data, ens.head(global_avg_pool2d(h)).data)

        generate_splits(tmp_path, 3, 8, (8, 8), seed=1)
        small = ArchConfig(layers=["c4", "M", "c6"], in_channels=3, image_size=[8, 8], num_classes=3)
        steps = fp_collapse_check(
            desk_cfg.replace(arch=small, fusion_indices=[1, 2], batch_size=8, teacher_bits=[4, 8]), load_dataset(tmp_path)
        )
        d.append(f"fp collapse identical over {steps} steps")

        tensors = 0
        for quantizer in ("hwgq", "lsq"):
            student = build_models(desk_cfg.replace(quantizer=quantizer)).student
            trace = []
            student_forward(student, x, trace)
            for kind, _, _, out, q in trace:
                if kind == "activation" and q.enabled:
                    assert len(np.unique(out.data)) <= 4
                    tensors += 1
        assert tensors > 0
        d.append(f"{tensors} 2-bit activation tensors with <= 4 values")


def test_criterion_8_persistence(desk_cfg, tmp_path):
    with criterion(8, "dataset and checkpoint round trips; re-evaluation; complete pi log") as d:
        images, labels, m = read_dataset(Path(desk_cfg.data_path) / "train.cmtd")
        write_dataset(tmp_path / "copy.cmtd", images, labels, m)
        assert (tmp_path / "copy.cmtd").read_bytes() == (Path(desk_cfg.data_path) / "train.cmtd").read_bytes()
        got = read_dataset(tmp_path / "copy.cmtd")
        np.testing.assert_array_equal(got[0], images)
        np.testing.assert_array_equal(got[1], labels)

        data_dir = generate_splits(tmp_path / "data", 3, 8, (8, 8), seed=2)
        small = ArchConfig(layers=["c4", "M", "c6"], in_channels=3, image_size=[8, 8], num_classes=3)
        cfg = desk_cfg.replace(arch=small, fusion_indices=[1, 2], batch_size=8, epochs=2, data_path=str(data_dir))
        run = tmp_path / "run"
        result = run_experiment(cfg, run)

        arrays, meta = load_checkpoint(run / "last.npz")
        state = result.models.state_dict()
        for k, v in state.items():
            assert arrays[k].dtype == v.dtype
            np.testing.assert_array_equal(arrays[k], v)
        assert meta["config"] == cfg.to_dict() and "rng_state" in meta
        for name in ("best.npz", "last.npz"):
            res = evaluate_checkpoint(run / name, data_dir)
            assert res["evaluated"] == res["recorded"], name
        with open(run / "metrics.csv") as fh:
            logged = [r for r in csv.DictReader(fh) if r["top1_student"]][-1]
        assert float(logged["top1_student"]) == res["evaluated"]["top1_student"]
        assert float(logged["top5_student"]) == res["evaluated"]["top5_student"]
        d.append(f"re-evaluated top1 {res['evaluated']['top1_student']:.2f} exactly")

        with open(run / "pi.csv") as fh:
            keys = [(int(r["step"]), int(r["layer_index"]), int(r["teacher_index"])) for r in csv.DictReader(fh)]
        total = result.history[-1].step
        expected = [(s, k, i) for s in range(total) for k in cfg.fusion_indices for i in range(len(cfg.teacher_bits))]
        assert keys == expected
        d.append(f"{len(keys)} pi rows, no gaps")
