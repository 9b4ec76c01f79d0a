"""Joint teacher/student optimisation with the contrastive self-distillation loss.

One backbone holds the teacher; the student is its width-``r`` slice (or, for
the ``ts-separate`` ablation, an independent narrow network). Inside the
contrastive term the teacher output is a constant unless the strategy says
otherwise, so weights outside the student slice only learn from the teacher's
reconstruction loss.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from csd import losses
from csd.arch import (SRBackbone, check_width, load_checkpoint, save_checkpoint,
                      scaled_channels)
from csd.data import PatchBatch, PatchLoader, PairedDataset
from csd.evaluation import evaluate_dataset

log = logging.getLogger(__name__)

HISTORY_FIELDS = ["iter", "loss_total", "loss_recS", "loss_recT", "loss_cl", "lr"]


class Strategy(str, enum.Enum):
    CSD = "csd"
    CSD_A = "csd-a"  # no teacher reconstruction term
    CSD_B = "csd-b"  # contrastive gradients also reach the teacher
    JT1 = "jt1"  # joint reconstruction only
    INDIVIDUAL = "individual"  # single width, reconstruction only
    CSD_GT_POS = "gt-pos"  # ground truth as the positive
    TS_SEPARATE = "ts-separate"  # student does not share weights


@dataclass
class TrainConfig:
    width: float = 0.25
    batch_size: int = 16
    epochs: int = 300
    steps_per_epoch: int = 1000
    lr0: float = 1e-4
    decay_every: int = 200_000
    decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_t: float = 1.0
    lambda_c: float = 200.0
    k: int = 10
    patch: int = 192
    seed: int = 0
    teacher_init: str = "random"
    strategy: Strategy = Strategy.CSD
    loss_kind: str = "csd"
    epsilon: float = losses.EPSILON
    temperature: float = 0.07
    shared_negatives: bool = False
    augment: bool = True
    val_every: int = 10
    val_images: int = 10

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        check_width(self.width)
        if self.loss_kind not in losses.LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        positive = ("batch_size", "steps_per_epoch", "lr0", "decay_every", "decay_factor",
                    "adam_eps", "k", "patch", "temperature", "epsilon", "val_every")
        bad = [name for name in positive if not getattr(self, name) > 0]
        if self.epochs < 0:
            bad.append("epochs")
        if self.lambda_t < 0 or self.lambda_c < 0:
            bad.append("lambda")
        if bad:
            raise ValueError(f"invalid training hyperparameters: {', '.join(bad)}")

    @property
    def total_iterations(self):
        return self.epochs * self.steps_per_epoch


@dataclass
class TrainState:
    iteration: int = 0
    epoch: int = 0
    best_student_psnr: float = -math.inf
    seed: int = 0

    def as_dict(self):
        return dataclasses.asdict(self)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Step decay. A factor of 1/n divides by n**k so 1e-4 -> 1e-5 -> 1e-6 stays exact."""
    k = iteration // cfg.decay_every
    inv = 1.0 / cfg.decay_factor
    if abs(inv - round(inv)) < 1e-9:
        return cfg.lr0 / round(inv) ** k
    return cfg.lr0 * cfg.decay_factor ** k


def make_optimizer(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def build_separate_student(net: SRBackbone, r: float, seed: int | None = None) -> SRBackbone:
    width = scaled_channels(net.base_width, r)
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        return SRBackbone(width, net.n_blocks, net.scale, net.res_scale)


def student_forward(net, student, lr, r):
    return student(lr, 1.0) if student is not None else net(lr, r)


def select_positive(strategy: Strategy, o_t, hr):
    """The contrastive positive: the teacher output (a constant unless CSD_B) or the GT."""
    if strategy is Strategy.CSD_GT_POS:
        return hr
    if strategy is Strategy.CSD_B:
        return o_t
    return o_t.detach()


def contrastive_term(o_s, positive, batch: PatchBatch, extractor, cfg: TrainConfig, kind=None):
    kind = kind or cfg.loss_kind
    if kind == "none":
        return o_s.new_zeros(())
    if kind == "perceptual":
        return losses.perceptual_loss(o_s, batch.hr, extractor)
    if batch.negatives is None:
        raise ValueError(f"loss kind {kind!r} needs negatives in the batch")
    cb = losses.ContrastiveBatch(o_s, positive, batch.negatives)
    if kind == "csd":
        return losses.contrastive_loss(cb, extractor, epsilon=cfg.epsilon)
    return losses.infonce_loss(cb, extractor, cfg.temperature)


def compute_losses(net, extractor, batch: PatchBatch, cfg: TrainConfig,
                   strategy: Strategy | None = None, student=None):
    """Forward both branches and assemble the objective for ``strategy``.

    Returns the differentiable total and a :class:`LossReport` of floats.
    """
    strategy = Strategy(strategy or cfg.strategy)
    o_s = student_forward(net, student, batch.lr, cfg.width)

    if strategy is Strategy.INDIVIDUAL:
        rec_s = F.l1_loss(o_s, batch.hr)
        total = losses.total_loss(rec_s, 0.0, 0.0, losses.LossWeights(0.0, 0.0))
        return total, losses.LossReport(rec_s.item(), 0.0, 0.0, total.item())

    o_t = net(batch.lr, 1.0)
    rec_s, rec_t = losses.reconstruction_loss(o_s, o_t, batch.hr)
    kind = "none" if strategy is Strategy.JT1 else cfg.loss_kind
    cl = contrastive_term(o_s, select_positive(strategy, o_t, batch.hr), batch, extractor,
                          cfg, kind)

    lambda_t = 0.0 if strategy is Strategy.CSD_A else cfg.lambda_t
    lambda_c = 0.0 if kind == "none" else cfg.lambda_c
    total = losses.total_loss(rec_s, rec_t, cl, losses.LossWeights(lambda_t, lambda_c))
    report = losses.LossReport(rec_s.item(), rec_t.item(), cl.item(), total.item())
    return total, report


class Trainer:
    """Owns the optimizer and iteration counter for one run."""

    def __init__(self, cfg: TrainConfig, net: SRBackbone, extractor, student=None, out_dir=None):
        self.cfg = cfg
        self.net = net
        self.extractor = extractor
        if student is None and cfg.strategy is Strategy.TS_SEPARATE:
            student = build_separate_student(net, cfg.width, seed=cfg.seed + 1)
        self.student = student
        params = list(net.parameters())
        if student is not None:
            params += list(student.parameters())
        self.optimizer = make_optimizer(params, cfg)
        self.state = TrainState(seed=cfg.seed)
        self.out_dir = Path(out_dir) if out_dir else None

    def modules(self):
        return [m for m in (self.net, self.student) if m is not None]

    def train_step(self, batch: PatchBatch) -> losses.LossReport:
        lr = lr_at(self.state.iteration, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        for m in self.modules():
            m.train()
        self.optimizer.zero_grad(set_to_none=True)
        try:
            total, report = compute_losses(self.net, self.extractor, batch, self.cfg,
                                           student=self.student)
        except losses.NonFiniteLossError as exc:
            self._dump_diagnostics(exc, batch)
            raise
        total.backward()
        self.optimizer.step()
        self.state.iteration += 1
        self.state.epoch = self.state.iteration // self.cfg.steps_per_epoch
        return report

    def _dump_diagnostics(self, exc, batch):
        info = {"iteration": self.state.iteration, "error": str(exc),
                "lr_range": [float(batch.lr.min()), float(batch.lr.max())],
                "weights_finite": all(bool(torch.isfinite(p).all())
                                      for m in self.modules() for p in m.parameters())}
        log.error("non-finite loss at iteration %d: %s", self.state.iteration, exc)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "nan_dump.json").write_text(json.dumps(info, indent=2))

    def state_dict(self):
        return {"net": self.net.state_dict(),
                "student": self.student.state_dict() if self.student is not None else None,
                "optimizer": self.optimizer.state_dict(),
                "state": self.state.as_dict()}

    def load_state_dict(self, blob):
        self.net.load_state_dict(blob["net"])
        if self.student is not None:
            self.student.load_state_dict(blob["student"])
        self.optimizer.load_state_dict(blob["optimizer"])
        self.state = TrainState(**blob["state"])

    def save(self, path):
        torch.save(self.state_dict(), path)

    def resume(self, path):
        self.load_state_dict(torch.load(path, map_location="cpu", weights_only=False))


@dataclass
class FitResult:
    net: SRBackbone
    student: SRBackbone | None
    history: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)
    state: TrainState | None = None


def validate(net, student, dataset: PairedDataset, r: float) -> dict:
    if student is not None:
        ps = evaluate_dataset(student, dataset, 1.0).psnr_db
    else:
        ps = evaluate_dataset(net, dataset, r).psnr_db
    pt = evaluate_dataset(net, dataset, 1.0).psnr_db
    return {"psnr_student": ps, "psnr_teacher": pt}


def init_teacher(net: SRBackbone, teacher_init: str):
    if teacher_init in ("random", "", None):
        return None
    src, meta = load_checkpoint(teacher_init)
    if src.config() != net.config():
        raise ValueError(f"teacher checkpoint {teacher_init} has config {src.config()}, "
                         f"expected {net.config()}")
    net.load_state_dict(src.state_dict())
    return meta


def write_history(history, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        w.writerows(history)


def fit(cfg: TrainConfig, net: SRBackbone, train_data: PairedDataset, extractor,
        val_data: PairedDataset | None = None, out_dir=None, resume=None) -> FitResult:
    """Run the full loop: validation, checkpoints and a per-iteration loss history."""
    out_dir = Path(out_dir) if out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    init_teacher(net, cfg.teacher_init)
    trainer = Trainer(cfg, net, extractor, out_dir=out_dir)
    if resume:
        trainer.resume(resume)
    result = FitResult(net, trainer.student, state=trainer.state)
    if cfg.epochs == 0:
        return result

    loader = PatchLoader(train_data, cfg.batch_size, cfg.patch, cfg.k, cfg.seed,
                         cfg.steps_per_epoch, cfg.augment, cfg.shared_negatives)
    if val_data is not None and len(val_data) > cfg.val_images:
        val_data = PairedDataset([val_data[i][1] for i in range(cfg.val_images)],
                                 [val_data[i][0] for i in range(cfg.val_images)],
                                 scale=val_data.scale, name=val_data.name)

    def run_validation():
        if val_data is None:
            return
        v = validate(net, trainer.student, val_data, cfg.width)
        v["iter"] = trainer.state.iteration
        result.validations.append(v)
        log.info("iter %d: student %.3f dB, teacher %.3f dB", v["iter"],
                 v["psnr_student"], v["psnr_teacher"])
        if out_dir is None:
            return
        extra = dict(v, width=cfg.width, strategy=cfg.strategy.value)
        save_checkpoint(net, out_dir / "last.pt", **extra)
        if trainer.student is not None:
            save_checkpoint(trainer.student, out_dir / "student_last.pt", **extra)
        if v["psnr_student"] > trainer.state.best_student_psnr:
            trainer.state.best_student_psnr = v["psnr_student"]
            save_checkpoint(net, out_dir / "best.pt", **extra)
            if trainer.student is not None:
                save_checkpoint(trainer.student, out_dir / "student_best.pt", **extra)

    if trainer.state.iteration == 0:
        run_validation()
    val_period = cfg.val_every * cfg.steps_per_epoch
    while trainer.state.iteration < cfg.total_iterations:
        it = trainer.state.iteration
        batch = loader.batch(it // cfg.steps_per_epoch, it % cfg.steps_per_epoch)
        lr = lr_at(it, cfg)
        report = trainer.train_step(batch)
        result.history.append({"iter": it + 1, "loss_total": report.total,
                               "loss_recS": report.recon_student,
                               "loss_recT": report.recon_teacher,
                               "loss_cl": report.contrastive, "lr": lr})
        if trainer.state.iteration % val_period == 0 or \
                trainer.state.iteration == cfg.total_iterations:
            run_validation()
            if out_dir is not None:
                trainer.save(out_dir / "trainer_state.pt")
                write_history(result.history, out_dir / "history.csv")

    if out_dir is not None:
        if val_data is None:
            save_checkpoint(net, out_dir / "last.pt", width=cfg.width)
        trainer.save(out_dir / "trainer_state.pt")
        write_history(result.history, out_dir / "history.csv")
    result.state = trainer.state
    return result
