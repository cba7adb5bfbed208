"""Loss, EMA, the training loop and task extension."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import CatAIR, ModelConfig, load_checkpoint, save_checkpoint
from .degrade import DatasetManifest, load_manifest

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossBreakdown:
    l1: torch.Tensor
    ratio_reg: torch.Tensor
    total: torch.Tensor
    mean_gamma: torch.Tensor

    def as_dict(self):
        return {k: float(getattr(self, k).detach()) for k in ("l1", "ratio_reg", "total", "mean_gamma")}


def loss(pred, target, gammas, gamma0=0.5) -> LossBreakdown:
    """Mean absolute error plus ``(mean(gammas) - gamma0) ** 2`` with unit weight."""
    l1 = (pred - target).abs().mean()
    if len(gammas):
        mean_gamma = torch.stack([torch.as_tensor(g, dtype=l1.dtype) for g in gammas]).mean()
    else:
        mean_gamma = torch.as_tensor(gamma0, dtype=l1.dtype)
    ratio_reg = (mean_gamma - gamma0) ** 2
    return LossBreakdown(l1, ratio_reg, l1 + ratio_reg, mean_gamma)


@torch.no_grad()
def ema_update(shadow, params, beta=0.999):
    """In place: ``shadow = shadow * beta + param * (1 - beta)`` for matching tensors."""
    for s, p in zip(shadow, params):
        s.mul_(beta).add_(p.detach().to(s.dtype), alpha=1.0 - beta)
    return shadow


class EMA:
    """Shadow copy of every floating-point entry of a model's state dict."""

    def __init__(self, model, beta=0.999):
        if not 0.0 < beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        self.beta = beta
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items() if v.is_floating_point()}

    def update(self, model):
        state = model.state_dict()
        ema_update(list(self.shadow.values()), [state[k] for k in self.shadow], self.beta)

    def copy_to(self, model):
        model.load_state_dict(self.shadow, strict=False)
        return model

    def model(self, like):
        return self.copy_to(copy.deepcopy(like))


@dataclass
class TrainResult:
    model: CatAIR
    ema_model: CatAIR | None
    log: list = field(default_factory=list)

    @property
    def best(self):
        return self.ema_model if self.ema_model is not None else self.model


def load_pairs(data):
    """Normalise a manifest, dataset root or ``[(degraded, clean), ...]`` into float32 arrays."""
    if isinstance(data, (str, Path)):
        data = load_manifest(data)
    if isinstance(data, DatasetManifest):
        data = [(deg, clean) for _, _, clean, deg in data.pairs()]
    pairs = [(np.asarray(d, np.float32), np.asarray(c, np.float32)) for d, c in data]
    if not pairs:
        raise ValueError("dataset is empty")
    return pairs


class BatchSampler:
    """Seeded random crops with optional flips and 90-degree rotations."""

    def __init__(self, pairs, batch_size=4, crop=64, seed=0, augment=True):
        self.pairs = pairs
        self.augment = augment
        self.batch_size = batch_size
        self.crop = crop
        self.rng = np.random.default_rng(seed)
        for d, c in pairs:
            if d.shape != c.shape or min(d.shape[:2]) < crop:
                raise ValueError(f"pair shapes {d.shape}/{c.shape} incompatible with crop {crop}")

    def __call__(self):
        degs, cleans = [], []
        for i in self.rng.integers(len(self.pairs), size=self.batch_size):
            d, c = self.pairs[i]
            y = self.rng.integers(d.shape[0] - self.crop + 1)
            x = self.rng.integers(d.shape[1] - self.crop + 1)
            k, flip = (self.rng.integers(4), self.rng.integers(2)) if self.augment else (0, 0)
            out = []
            for img in (d, c):
                img = np.rot90(img[y:y + self.crop, x:x + self.crop], k)
                out.append(img[:, ::-1] if flip else img)
            degs.append(out[0])
            cleans.append(out[1])
        to_t = lambda xs: torch.from_numpy(np.ascontiguousarray(np.stack(xs))).permute(0, 3, 1, 2)
        return to_t(degs), to_t(cleans)


def build_model(config: ModelConfig | None = None, seed=0) -> CatAIR:
    torch.manual_seed(seed)
    return CatAIR(config or ModelConfig())


def train(model: CatAIR, data, steps, lr=2e-4, seed=0, use_ema=True, *, batch_size=4, crop=64,
          ema_beta=0.999, param_groups=None, log_path=None, log_every=1, augment=True) -> TrainResult:
    """Optimise ``model`` in place with Adam on L1 + mask-ratio regularisation.

    Everything random (crops, augmentation, Gumbel noise) derives from ``seed``.
    """
    pairs = load_pairs(data)
    sampler = BatchSampler(pairs, batch_size, crop, seed, augment)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(param_groups or model.parameters(), lr=lr)
    ema = EMA(model, ema_beta) if use_ema else None
    gamma0 = model.config.gamma0
    records = []
    fh = open(log_path, "w") if log_path else None
    try:
        model.train()
        for step in range(1, steps + 1):
            degraded, clean = sampler()
            out = model(degraded, mode="train", generator=gen)
            parts = loss(out.restored, clean, out.gammas, gamma0)
            if not torch.isfinite(parts.total):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            parts.total.backward()
            opt.step()
            if ema is not None:
                ema.update(model)
            if step % log_every == 0 or step == steps:
                rec = {"step": step, **{k: v for k, v in parts.as_dict().items() if k != "total"}}
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if step % 50 == 0:
                    log.info("step %d l1=%.4f reg=%.5f gamma=%.3f", step, rec["l1"], rec["ratio_reg"],
                             rec["mean_gamma"])
    finally:
        if fh:
            fh.close()
    model.eval()
    ema_model = ema.model(model).eval() if ema is not None else None
    return TrainResult(model, ema_model, records)


def save_result(result: TrainResult, out_dir, extra=None):
    """Save ``raw/`` and, when present, ``ema/`` checkpoints plus ``metrics.jsonl``."""
    out_dir = Path(out_dir)
    save_checkpoint(result.model, out_dir / "raw", extra)
    if result.ema_model is not None:
        save_checkpoint(result.ema_model, out_dir / "ema", extra)
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec) + "\n")
    return out_dir


@dataclass
class ExtensionPlan:
    new_tasks: tuple
    old_tasks: tuple = ()
    mix_weights: dict | None = None
    lr_base: float = 2e-4
    lr_prompt_multiplier: float = 5.0
    ema_beta: float = 0.999

    def __post_init__(self):
        self.new_tasks = tuple(self.new_tasks)
        self.old_tasks = tuple(self.old_tasks)
        if not self.new_tasks:
            raise ValueError("an extension needs at least one new task")
        if self.mix_weights is not None:
            total = sum(self.mix_weights.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"mix weights must sum to 1, got {total}")

    @property
    def old_task_count(self):
        return len(self.old_tasks)

    @property
    def new_task_count(self):
        return len(self.new_tasks)

    def weights(self):
        """Dataset mix; by default each new task weighs twice as much as each old one."""
        if self.mix_weights is not None:
            return dict(self.mix_weights)
        raw = {t: 1.0 for t in self.old_tasks} | {t: 2.0 for t in self.new_tasks}
        norm = sum(raw.values())
        return {t: v / norm for t, v in raw.items()}


def extension_param_groups(model: CatAIR, n_old, plan: ExtensionPlan):
    """Optimizer groups: new prompt components at the boosted rate, everything else at ``lr_base``."""
    new = [bank.components[i] for bank in model.prompts for i in range(n_old, bank.num_tasks)]
    new_ids = {id(p) for p in new}
    rest = [p for p in model.parameters() if id(p) not in new_ids]
    return [{"params": rest, "lr": plan.lr_base},
            {"params": new, "lr": plan.lr_base * plan.lr_prompt_multiplier}]


def extend(pretrained, plan: ExtensionPlan, data, steps, seed=0, **train_kwargs) -> TrainResult:
    """Grow every prompt bank by the plan's new tasks and fine-tune with EMA.

    New prompt components train at ``lr_base * lr_prompt_multiplier``; every
    other weight is warm-started at ``lr_base``.
    """
    model = load_checkpoint(pretrained) if isinstance(pretrained, (str, Path)) else copy.deepcopy(pretrained)
    if plan.old_tasks and tuple(plan.old_tasks) != tuple(model.config.tasks):
        raise ValueError(f"plan expects tasks {plan.old_tasks}, checkpoint has {model.config.tasks}")
    n_old = len(model.config.tasks)
    model.add_tasks(plan.new_tasks)
    groups = extension_param_groups(model, n_old, plan)
    return train(model, data, steps, plan.lr_base, seed, use_ema=True, ema_beta=plan.ema_beta,
                 param_groups=groups, **train_kwargs)
