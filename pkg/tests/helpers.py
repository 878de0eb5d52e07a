"""Toy configurations and whole-system checks shared by unit and acceptance tests."""
from __future__ import annotations

from collections import defaultdict

import numpy as np
import pytest

from cmtkd import functional as F
from cmtkd.ensemble import min_logit_ensemble
from cmtkd.gradcheck import analytic_grads, numerical_grad, relative_error
from cmtkd.harness.config import ArchConfig, ExperimentConfig
from cmtkd.harness.optim import DEFAULT_DECAY, SGD, lr_schedule, split_decay
from cmtkd.harness.train import COMPONENTS, Trainer, build_models, compute_losses, effective_weights, total_loss
from cmtkd.netbuilder import QuantConfig, build_network
from cmtkd.quantizers import lsq_range, relaxed_rounding
from cmtkd.tensor import Tensor, backward, no_grad


def toy_config(quantizer="hwgq", feat_loss="attention", **overrides) -> ExperimentConfig:
    """Two teachers {2, 4}-bit, a 2-bit student, two fusion layers, 8x8x1 inputs, 3 classes."""
    base = dict(
        preset="cmtkd",
        teacher_bits=[2, 4],
        student_bits=2,
        quantizer=quantizer,
        feat_loss=feat_loss,
        fusion_indices=[2, 3],
        arch=ArchConfig(layers=["c2", "c3", "M", "c4"], in_channels=1, image_size=[8, 8], num_classes=3),
        dtype="float64",
        batch_size=4,
        epochs=1,
        data_path="unused",
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def toy_batch(seed=0, n=4, cfg=None):
    rng = np.random.default_rng(seed)
    arch = cfg.arch if cfg is not None else toy_config().arch
    x = rng.normal(size=(n, arch.in_channels, *arch.image_size))
    y = rng.integers(0, arch.num_classes, n)
    return x, y


def parameter_group(name: str) -> str:
    if name.endswith(".step"):
        return "lsq step sizes"
    if name.startswith("ensemble.importance"):
        return "rho logits"
    if name.startswith("ensemble.head"):
        return "teacher head"
    if name.startswith("ensemble."):
        return "teacher weights"
    if name.startswith("adapters."):
        return "fitnet adapter"
    return "student weights"


def prepare_toy_models(cfg, seed=0):
    """Models with LSQ steps initialised and rho/adapters moved off their symmetric start."""
    rng = np.random.default_rng(seed + 99)
    models = build_models(cfg, np.float64)
    x, y = toy_batch(seed, cfg=cfg)
    with no_grad():
        compute_losses(models, cfg, effective_weights(cfg), Tensor(x), y)
    models.ensemble.importance.rho.data[...] = rng.normal(0, 0.5, models.ensemble.importance.rho.shape)
    if models.adapters is not None:
        for _, p in models.adapters.named_parameters():
            p.data += rng.normal(0, 0.1, p.shape)
    return models, x, y


def system_gradcheck(cfg, seed=0, eps=1e-6) -> dict[str, float]:
    """Relative error per parameter group of the total loss, quantizer rounding relaxed.

    The min-logit target is computed once and held fixed, matching the
    stop-gradient used by the analytic backward pass.
    """
    models, x, y = prepare_toy_models(cfg, seed)
    weights = effective_weights(cfg)
    xt = Tensor(x)
    with relaxed_rounding():
        with no_grad():
            _, z_s = models.student(xt)
            _, z_t = models.ensemble(xt)
        z_bar = min_logit_ensemble(z_t, z_s, y)

        def fn():
            comps = compute_losses(models, cfg, weights, xt, y, z_bar=z_bar)
            return total_loss(*(comps[c] for c in COMPONENTS), weights)

        named = []
        for prefix, mod in models.named_modules().items():
            named += [(f"{prefix}.{n}", p) for n, p in mod.named_parameters()]
        analytic = analytic_grads(fn, [p for _, p in named])
        numeric = [numerical_grad(fn, p, eps) for _, p in named]
    groups = defaultdict(lambda: ([], []))
    for (name, _), a, n in zip(named, analytic, numeric):
        groups[parameter_group(name)][0].append(a.ravel())
        groups[parameter_group(name)][1].append(n.ravel())
    return {g: relative_error(np.concatenate(a), np.concatenate(n)) for g, (a, n) in groups.items()}


def ste_mask_check(cfg, seed=0) -> int:
    """Verify the gradient through every enabled quantizer against a range-mask oracle.

    Returns the number of quantized tensors checked.
    """
    models, x, y = prepare_toy_models(cfg, seed)
    weights = effective_weights(cfg)
    trace: list = []
    comps = compute_losses(models, cfg, weights, Tensor(x), y, trace=trace)
    backward(total_loss(*(comps[c] for c in COMPONENTS), weights))
    checked = 0
    for kind, _, pre, out, quantizer in trace:
        if not quantizer.enabled:
            continue
        spec = quantizer.spec
        data = pre.data
        if spec.scheme == "hwgq":
            top = data.std() * spec.levels.max_level
            lo = 0.0 if spec.half_wave else -top
            mask = (data >= lo) & (data <= top)
        else:
            qn, qp = lsq_range(spec.bits, quantizer.signed)
            v = data / float(quantizer.step.data[0])
            mask = (v > qn) & (v < qp)
        expect = out.grad * mask
        np.testing.assert_array_equal(pre.grad, expect, err_msg=f"{kind} quantizer of layer")
        checked += 1
    return checked


def fp_collapse_check(cfg, data, epochs=2) -> int:
    """Full-precision n=1, beta=gamma=0 must equal plain cross-entropy training.

    The student is compared with a ``single`` run, the lone teacher with an
    independent copy trained by hand.  Returns the number of steps compared.
    """
    fp = dict(student_bits="fp", teacher_bits=["fp"], beta=0.0, gamma=0.0, epochs=epochs)
    with pytest.warns(UserWarning):
        ens_tr = Trainer(cfg.replace(preset="cmtkd", **fp), data)
    plain_tr = Trainer(cfg.replace(preset="single", **fp), data)
    teacher = ens_tr.models.ensemble.teachers[0]
    head = ens_tr.models.ensemble.head
    ref = build_network(ens_tr.cfg.network_spec(), QuantConfig(cfg.quantizer, None), np.random.default_rng(0), dtype=np.dtype(cfg.dtype))
    ref.load_state_dict({**teacher.state_dict(), **{f"head.{k}": v for k, v in head.state_dict().items()}})
    ref_opt = SGD(split_decay("t", list(ref.named_parameters()), DEFAULT_DECAY), momentum=cfg.momentum)

    steps = 0
    for epoch in range(epochs):
        lr = lr_schedule(epoch, cfg.base_lr, epochs, cfg.schedule, cfg.milestones)
        for (xb, yb), (xb2, _) in zip(ens_tr.loader.epoch(), plain_tr.loader.epoch()):
            np.testing.assert_array_equal(xb, xb2)
            r1 = ens_tr.train_step(xb, yb, lr)
            r2 = plain_tr.train_step(xb, yb, lr)
            assert r1.components["ce_S"] == r2.components["ce_S"]
            ref.train()
            _, z = ref(Tensor(xb.astype(cfg.dtype)))
            loss = F.softmax_cross_entropy(z, yb)
            assert r1.components["ce_T"] == loss.item()
            ref_opt.zero_grad()
            backward(loss)
            ref_opt.step(lr)
            steps += 1
    s1, s2 = ens_tr.models.student.state_dict(), plain_tr.models.student.state_dict()
    for k in s1:
        np.testing.assert_array_equal(s1[k], s2[k], err_msg=k)
    ref_state = ref.state_dict()
    for k, v in teacher.state_dict().items():
        np.testing.assert_array_equal(v, ref_state[k], err_msg=k)
    np.testing.assert_array_equal(ens_tr.models.ensemble.importance.weights(), 1.0)
    return steps
