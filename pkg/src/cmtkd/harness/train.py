"""Training loop: loss assembly, presets, evaluation, CSV export and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .. import functional as F
from ..distill import FitNetAdapters, feature_distill_loss
from ..ensemble import kl_to_target, min_logit_ensemble, mutual_kl_losses, target_distribution
from ..netbuilder import ConvNet, QuantConfig, TeacherEnsemble, build_network
from ..tensor import NonFiniteError, Tensor, backward, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_from_dict
from .data import BatchLoader, Dataset, load_dataset, substream
from .optim import DEFAULT_DECAY, SGD, ParamGroup, lr_schedule, split_decay, weight_decay_for_bits

log = logging.getLogger(__name__)

COMPONENTS = ("ce_S", "ce_T", "kl_S", "kl_T", "feat")
METRICS_COLUMNS = (
    "step", "epoch", "lr", "loss_total", *COMPONENTS,
    "top1_student", "top5_student", "top1_combined_teacher",
)
PI_COLUMNS = ("step", "layer_index", "teacher_index", "pi_value")
MAX_CONSECUTIVE_SKIPS = 10
PI_TOLERANCE = 1e-9


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 100.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


def total_loss(ce_s, ce_t, kl_s, kl_t, feat, weights: LossWeights) -> Tensor:
    """alpha*(ce_S + ce_T) + beta*(kl_S + kl_T) + gamma*feat, evaluated in float64.

    Components may be Tensors (kept on the graph) or plain numbers.
    """
    parts = []
    for name, c in zip(COMPONENTS, (ce_s, ce_t, kl_s, kl_t, feat)):
        t = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=np.float64))
        if t.size != 1:
            raise ValueError(f"loss component {name} is not a scalar")
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"loss component {name} is not finite")
        parts.append(t.astype(np.float64) if t.dtype != np.float64 else t)
    cs, ct, ks, kt, fe = parts
    return weights.alpha * (cs + ct) + weights.beta * (ks + kt) + weights.gamma * fe


def effective_weights(cfg: ExperimentConfig) -> LossWeights:
    """Loss weights after switching off the terms a preset leaves out."""
    beta, gamma = cfg.beta, cfg.gamma
    if cfg.preset == "single":
        beta = gamma = 0.0
    elif cfg.preset in ("kd_fp", "average_teacher"):
        gamma = 0.0
    elif cfg.preset == "cmtkd_no_att":
        gamma = 0.0
    elif cfg.preset == "cmtkd_no_ml":
        beta = 0.0
    return LossWeights(cfg.alpha, beta, gamma)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Accuracy:
    top1: float
    top5: float
    top5_degenerate: bool = False  # fewer than 5 classes: top-5 is trivially 100%


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> int:
    k = min(k, logits.shape[1])
    # stable sort: ties resolved towards the lower class index
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return int((top == labels[:, None]).any(axis=1).sum())


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> Accuracy:
    n = len(labels)
    if n == 0:
        raise ValueError("cannot evaluate on an empty test set")
    m = logits.shape[1]
    return Accuracy(100.0 * topk_correct(logits, labels, 1) / n, 100.0 * topk_correct(logits, labels, 5) / n, m < 5)


def predict(model, x: np.ndarray, batch_size: int) -> np.ndarray:
    """Logits of a ConvNet or the combined teacher of a TeacherEnsemble, in eval mode."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(x), batch_size):
                _, z = model(Tensor(x[i : i + batch_size]))
                out.append(z.data)
    finally:
        model.train(was_training)
    return np.concatenate(out)


def evaluate(model, x: np.ndarray, y: np.ndarray, batch_size: int = 250) -> Accuracy:
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    return accuracy_from_logits(predict(model, x, batch_size), y)


# ---------------------------------------------------------------------------
# models


@dataclass
class Models:
    student: ConvNet
    ensemble: TeacherEnsemble | None = None
    adapters: FitNetAdapters | None = None
    kd_teachers: list[ConvNet] = field(default_factory=list)

    def named_modules(self) -> dict[str, Any]:
        out = {"student": self.student}
        if self.ensemble is not None:
            out["ensemble"] = self.ensemble
        if self.adapters is not None:
            out["adapters"] = self.adapters
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for prefix, m in self.named_modules().items():
            state.update({f"{prefix}.{k}": v for k, v in m.state_dict().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for prefix, m in self.named_modules().items():
            sub = {k[len(prefix) + 1 :]: v for k, v in state.items() if k.startswith(prefix + ".")}
            m.load_state_dict(sub)


def build_models(cfg: ExperimentConfig, dtype=None, student_stream: str = "init/student") -> Models:
    dtype = np.dtype(dtype or cfg.dtype)
    spec = cfg.network_spec()
    student = build_network(spec, QuantConfig(cfg.quantizer, cfg.student_bits), substream(cfg.seed, student_stream), dtype=dtype)
    ensemble = adapters = None
    if cfg.uses_ensemble:
        ensemble = TeacherEnsemble(
            spec,
            [QuantConfig(cfg.quantizer, b) for b in cfg.teacher_bits],
            substream(cfg.seed, "init/teachers"),
            dtype=dtype,
            student_bits=cfg.student_bits,
        )
        if cfg.feat_loss == "fitnet":
            shapes = spec.feature_shapes()
            adapters = FitNetAdapters({k: shapes[k][0] for k in spec.fusion_indices}, dtype)
    return Models(student, ensemble, adapters)


def build_optimizer(cfg: ExperimentConfig, models: Models) -> SGD:
    groups: list[ParamGroup] = split_decay(
        "student", list(models.student.named_parameters()), weight_decay_for_bits(cfg.student_bits)
    )
    ens = models.ensemble
    if ens is not None:
        for i, (teacher, bits) in enumerate(zip(ens.teachers, cfg.teacher_bits)):
            groups += split_decay(f"teacher{i}", list(teacher.named_parameters()), weight_decay_for_bits(bits))
        groups += split_decay("teacher_head", list(ens.head.named_parameters()), DEFAULT_DECAY)
        groups.append(ParamGroup("importance", list(ens.importance.named_parameters()), 0.0, cfg.pi_lr_scale))
    if models.adapters is not None:
        groups += split_decay("adapters", list(models.adapters.named_parameters()), DEFAULT_DECAY)
    return SGD(groups, momentum=cfg.momentum)


# ---------------------------------------------------------------------------
# training


def compute_losses(
    models: Models,
    cfg: ExperimentConfig,
    weights: LossWeights,
    x: Tensor,
    y: np.ndarray,
    z_bar: np.ndarray | None = None,
    trace: list | None = None,
) -> dict[str, Tensor | float]:
    """Loss components for one batch under the configured preset.

    Terms whose weight is zero are not computed and reported as 0.  ``z_bar``
    overrides the min-logit target, which is otherwise derived from the
    current logits; either way it is a constant for differentiation.
    ``trace`` collects per-layer quantizer inputs and outputs.
    """
    comps: dict[str, Tensor | float] = dict.fromkeys(COMPONENTS, 0.0)
    feats_s, z_s = models.student(x, trace)
    comps["ce_S"] = F.softmax_cross_entropy(z_s, y)
    if models.ensemble is not None:
        fused, z_t = models.ensemble(x, trace)
        comps["ce_T"] = F.softmax_cross_entropy(z_t, y)
        if weights.beta > 0:
            if z_bar is None:
                z_bar = min_logit_ensemble(z_t, z_s, y)
            comps["kl_T"], comps["kl_S"] = mutual_kl_losses(z_bar, z_t, z_s, cfg.temperature)
        if weights.gamma > 0:
            comps["feat"] = feature_distill_loss(fused, feats_s, cfg.feat_loss, models.adapters)
    elif models.kd_teachers and weights.beta > 0:
        with no_grad():
            probs = []
            for t in models.kd_teachers:
                t.eval()
                probs.append(target_distribution(t(x)[1].data, cfg.temperature))
        comps["kl_S"] = kl_to_target(np.mean(probs, axis=0), z_s, cfg.temperature)
    return comps


@dataclass
class StepReport:
    step: int
    epoch: int
    lr: float
    loss_total: float
    components: dict[str, float]
    pi: np.ndarray | None
    grad_norms: dict[str, float]
    skipped: bool = False


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    student: Accuracy
    combined_teacher: Accuracy | None = None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    history: list[EpochMetrics]
    best: EpochMetrics | None
    skipped_steps: int
    out_dir: Path | None
    models: Models

    @property
    def final(self) -> EpochMetrics:
        return self.history[-1]


class Trainer:
    """Runs one preset end to end on an in-memory dataset."""

    def __init__(
        self,
        cfg: ExperimentConfig,
        data: Dataset,
        out_dir: str | Path | None = None,
        kd_teachers: list[ConvNet] | None = None,
        student_stream: str = "init/student",
    ):
        self.cfg = cfg
        self.data = data
        self.dtype = np.dtype(cfg.dtype)
        if data.num_classes != cfg.arch.num_classes:
            raise ValueError(f"dataset has {data.num_classes} classes, config expects {cfg.arch.num_classes}")
        self.models = build_models(cfg, self.dtype, student_stream)
        self.models.kd_teachers = list(kd_teachers or [])
        if cfg.preset in ("kd_fp", "average_teacher") and not self.models.kd_teachers:
            raise ValueError(f"preset {cfg.preset!r} needs pretrained teachers")
        self.weights = effective_weights(cfg)
        self.optimizer = build_optimizer(cfg, self.models)
        self.loader = BatchLoader(data.train_x, data.train_y, cfg.batch_size, cfg.seed, cfg.augment, cfg.reshuffle)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.step = 0
        self.skipped = 0
        self._consecutive_skips = 0

    # -- losses ---------------------------------------------------------
    def loss_components(self, x: Tensor, y: np.ndarray) -> dict[str, Tensor | float]:
        return compute_losses(self.models, self.cfg, self.weights, x, y)

    def train_step(self, xb: np.ndarray, yb: np.ndarray, lr: float, epoch: int = 0) -> StepReport:
        """One forward/backward/update; non-finite steps are skipped and counted."""
        self.optimizer.zero_grad()
        for mod in self.models.named_modules().values():
            mod.train()
        components = dict.fromkeys(COMPONENTS, math.nan)
        total = math.nan
        skipped = False
        try:
            comps = self.loss_components(Tensor(xb.astype(self.dtype, copy=False)), yb)
            loss = total_loss(*(comps[c] for c in COMPONENTS), self.weights)
            components = {c: float(v.item() if isinstance(v, Tensor) else v) for c, v in comps.items()}
            total = loss.item()
            backward(loss)
            grads_ok = all(
                p.grad is None or np.isfinite(p.grad).all() for g in self.optimizer.groups for _, p in g.params
            )
            if not grads_ok:
                raise NonFiniteError("non-finite gradient")
        except (NonFiniteError, FloatingPointError) as exc:
            skipped = True
            self.skipped += 1
            self._consecutive_skips += 1
            log.warning("step %d skipped: %s", self.step, exc)
            if self._consecutive_skips > MAX_CONSECUTIVE_SKIPS:
                raise TrainingAborted(f"more than {MAX_CONSECUTIVE_SKIPS} consecutive non-finite steps") from exc
        norms = self.optimizer.grad_norms()
        if not skipped:
            self._consecutive_skips = 0
            self.optimizer.step(lr)
        self.optimizer.zero_grad()
        pi = None
        if self.models.ensemble is not None:
            pi = self.models.ensemble.importance.weights()
            check_pi(pi)
        report = StepReport(self.step, epoch, lr, total, components, pi, norms, skipped)
        self.step += 1
        return report

    # -- evaluation -----------------------------------------------------
    def evaluate(self, epoch: int = -1) -> EpochMetrics:
        bs = self.cfg.eval_batch_size
        student = evaluate(self.models.student, self.data.test_x, self.data.test_y, bs)
        combined = None
        if self.models.ensemble is not None:
            combined = evaluate(self.models.ensemble, self.data.test_x, self.data.test_y, bs)
        return EpochMetrics(epoch, self.step, student, combined)

    # -- main loop ------------------------------------------------------
    def fit(self) -> ExperimentResult:
        cfg = self.cfg
        history: list[EpochMetrics] = []
        best: EpochMetrics | None = None
        writers = _CsvWriters(self.out_dir, list(cfg.fusion_indices) if self.models.ensemble is not None else None)
        try:
            for epoch in range(cfg.epochs):
                lr = lr_schedule(epoch, cfg.base_lr, cfg.epochs, cfg.schedule, cfg.milestones)
                pending = None
                for xb, yb in self.loader.epoch():
                    if cfg.max_steps is not None and self.step >= cfg.max_steps:
                        break
                    report = self.train_step(xb, yb, lr, epoch)
                    if pending is not None:
                        writers.metrics_row(pending)
                    pending = report
                    writers.pi_rows(report)
                metrics = self.evaluate(epoch)
                history.append(metrics)
                if pending is not None:
                    writers.metrics_row(pending, metrics)
                writers.flush()
                log.info(
                    "epoch %d  student top1 %.2f%s", epoch, metrics.student.top1,
                    f"  combined teacher top1 {metrics.combined_teacher.top1:.2f}" if metrics.combined_teacher else "",
                )
                if best is None or metrics.student.top1 > best.student.top1:
                    best = metrics
                    if self.out_dir is not None and cfg.save_checkpoints:
                        self.save(self.out_dir / "best.npz", metrics)
                if cfg.max_steps is not None and self.step >= cfg.max_steps:
                    break
        finally:
            writers.close()
        if self.out_dir is not None and cfg.save_checkpoints:
            self.save(self.out_dir / "last.npz", history[-1])
        return ExperimentResult(cfg, history, best, self.skipped, self.out_dir, self.models)

    def save(self, path: Path, metrics: EpochMetrics) -> Path:
        arrays = self.models.state_dict()
        arrays.update(self.optimizer.state_dict())
        meta = {
            "config": self.cfg.to_dict(),
            "rng_state": self.loader.rng_state(),
            "epoch": metrics.epoch,
            "step": self.step,
            "metrics": metrics_dict(metrics),
            "normalization": {"mean": self.data.mean.tolist(), "std": self.data.std.tolist()},
        }
        return save_checkpoint(path, arrays, meta)


def check_pi(pi: np.ndarray, tol: float = PI_TOLERANCE) -> None:
    sums = pi.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol) or pi.min() < 0 or pi.max() > 1:
        raise AssertionError(f"importance factors left the simplex: row sums {sums}")


def metrics_dict(m: EpochMetrics) -> dict[str, Any]:
    out = {
        "top1_student": m.student.top1,
        "top5_student": m.student.top5,
        "top5_degenerate": m.student.top5_degenerate,
    }
    if m.combined_teacher is not None:
        out["top1_combined_teacher"] = m.combined_teacher.top1
        out["top5_combined_teacher"] = m.combined_teacher.top5
    return out


class _CsvWriters:
    def __init__(self, out_dir: Path | None, layers: list[int] | None):
        self.files = []
        self.layers = layers or []
        with_pi = layers is not None
        self.metrics = self.pi = None
        if out_dir is None:
            return
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "metrics.csv", "w", newline="")
        self.files.append(fh)
        self.metrics = csv.writer(fh)
        self.metrics.writerow(METRICS_COLUMNS)
        if with_pi:
            fh = open(out_dir / "pi.csv", "w", newline="")
            self.files.append(fh)
            self.pi = csv.writer(fh)
            self.pi.writerow(PI_COLUMNS)

    def metrics_row(self, r: StepReport, m: EpochMetrics | None = None) -> None:
        if self.metrics is None:
            return
        evals = ["", "", ""]
        if m is not None:
            evals = [
                repr(m.student.top1),
                repr(m.student.top5),
                repr(m.combined_teacher.top1) if m.combined_teacher is not None else "",
            ]
        row = [r.step, r.epoch, repr(r.lr), repr(r.loss_total)] + [repr(r.components[c]) for c in COMPONENTS]
        self.metrics.writerow(row + evals)

    def pi_rows(self, r: StepReport) -> None:
        if self.pi is None or r.pi is None:
            return
        for j, layer in enumerate(self.layers):
            for i in range(r.pi.shape[1]):
                self.pi.writerow([r.step, layer, i, repr(float(r.pi[j, i]))])

    def flush(self) -> None:
        for fh in self.files:
            fh.flush()

    def close(self) -> None:
        for fh in self.files:
            fh.close()

# ---------------------------------------------------------------------------
# experiments


def pretrain_teachers(cfg: ExperimentConfig, data: Dataset, out_dir: Path | None = None) -> list[ConvNet]:
    """Standalone CE-trained teachers for the kd_fp and average_teacher presets."""
    if cfg.preset == "kd_fp":
        roles = [("fp_teacher", None)]
    elif cfg.preset == "average_teacher":
        roles = [(f"teacher{i}", b) for i, b in enumerate(cfg.teacher_bits)]
    else:
        return []
    epochs = cfg.teacher_epochs or cfg.epochs
    teachers = []
    for name, bits in roles:
        tcfg = cfg.replace(preset="single", student_bits="fp" if bits is None else bits, epochs=epochs, max_steps=None)
        sub = out_dir / f"pretrain_{name}" if out_dir is not None else None
        log.info("pretraining %s (%s)", name, "FP" if bits is None else f"{bits}-bit")
        result = Trainer(tcfg, data, sub, student_stream=f"init/{name}").fit()
        net = result.models.student
        net.eval()
        teachers.append(net)
    return teachers


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, data: Dataset | None = None) -> ExperimentResult:
    """Pretrain (if the preset needs it), train, evaluate every epoch and write artifacts."""
    cfg.validate()
    if data is None:
        data = load_dataset(cfg.data_path, np.dtype(cfg.dtype))
    out = Path(out_dir) if out_dir is not None else None
    teachers = pretrain_teachers(cfg, data, out)
    result = Trainer(cfg, data, out, kd_teachers=teachers).fit()
    if out is not None:
        write_report(out / "report.json", result)
    return result


def write_report(path: Path, result: ExperimentResult) -> None:
    report = {
        "config": result.config.to_dict(),
        "final": metrics_dict(result.final),
        "best": metrics_dict(result.best) if result.best else None,
        "best_epoch": result.best.epoch if result.best else None,
        "skipped_steps": result.skipped_steps,
    }
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def evaluate_checkpoint(path: str | Path, data_path: str | Path | None = None) -> dict[str, Any]:
    """Rebuild the models from a checkpoint and score them on the test split.

    Normalization uses the statistics stored in the checkpoint, so the test
    inputs are identical to the ones seen during training.
    """
    arrays, meta = load_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    dtype = np.dtype(cfg.dtype)
    models = build_models(cfg, dtype)
    models.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("optim.")})
    norm = meta["normalization"]
    data = load_dataset(data_path or cfg.data_path, dtype, (np.asarray(norm["mean"]), np.asarray(norm["std"])))
    student = evaluate(models.student, data.test_x, data.test_y, cfg.eval_batch_size)
    combined = None
    if models.ensemble is not None:
        combined = evaluate(models.ensemble, data.test_x, data.test_y, cfg.eval_batch_size)
    return {
        "evaluated": metrics_dict(EpochMetrics(meta["epoch"], meta["step"], student, combined)),
        "recorded": meta["metrics"],
        "epoch": meta["epoch"],
    }
