"""Gradient-ascent unlearning and the relearning attacker."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, NumericOverflowError
from .evalkit import fmt6, meta_comment, qa_accuracy
from .mrp import paired_batches
from .nanomodel.model import BaseModel, HookedModel, value_and_grad
from .nanomodel.optim import AdamW
from .seeding import stream
from .taskgen import to_batch


@dataclass(frozen=True)
class GaConfig:
    """Loss weights for ``w_ret * L_ret - w_unl * min(L_unl, cap)`` under one learning rate."""

    w_unl: float = 0.1
    w_ret: float = 1.0
    lr: float = 2e-4
    batch: int = 5
    epochs: int = 2
    unlearn_ce_cap: float | None = None  # None -> 2 ln(vocab)
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.w_unl < 0 or self.w_ret < 0:
            raise InvalidInputError("GA loss weights must be non-negative")

    def cap_for(self, vocab: int) -> float:
        return self.unlearn_ce_cap if self.unlearn_ce_cap is not None else 2.0 * math.log(vocab)


def ga_value_and_grad(model: BaseModel, batch_unl, batch_ret, config: GaConfig):
    cap = config.cap_for(model.config.vocab)
    grads: dict[str, np.ndarray] = {}
    total = 0.0
    for batch, scale, c in ((batch_ret, config.w_ret, None), (batch_unl, -config.w_unl, cap)):
        if scale == 0.0:
            continue
        loss, _, g = value_and_grad(model, batch, "base", scale=scale, cap=c)
        total += loss
        for k, v in g.items():
            grads[k] = grads[k] + v if k in grads else v
    return total, grads


def ga_unlearn(model: BaseModel, d_unl, d_ret, config: GaConfig = GaConfig(), tag: str = "",
               step_log: list | None = None) -> BaseModel:
    """Fine-tune every base weight: descend on retain data, ascend on unlearn data."""
    d_unl, d_ret = list(d_unl), list(d_ret)
    if not d_unl or not d_ret:
        raise InvalidInputError("unlearn and retain sets must be non-empty")
    model = model.copy()
    if config.epochs == 0:
        return model
    bu_all, br_all = to_batch(d_unl), to_batch(d_ret)
    rng = stream(config.seed, f"ga-{tag}")
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    step = 0
    for epoch in range(config.epochs):
        for iu, ir in paired_batches(len(d_unl), len(d_ret), config.batch, rng):
            step += 1
            try:
                loss, g = ga_value_and_grad(model, bu_all.subset(iu), br_all.subset(ir), config)
            except NumericOverflowError as exc:
                raise NumericOverflowError(f"GA step {step}: {exc}") from None
            if not np.isfinite(loss):
                raise NumericOverflowError(f"GA step {step}: loss is not finite")
            opt.step(model.params, g)
            if step_log is not None:
                step_log.append({"epoch": epoch, "step": step, "loss": float(loss)})
    return model


@dataclass(frozen=True)
class AttackConfig:
    epochs: int = 5
    lr: float = 2e-4
    batch: int = 5
    seed: int = 0


def relearn_attack(model, d_attack, eval_sets: dict, config: AttackConfig = AttackConfig()):
    """Fine-tune base weights on ``d_attack`` with plain cross-entropy.

    Projection hooks, when present, are carried over unchanged. Returns the
    attacked model and a trace with one row per epoch (epoch 0 is pre-attack)
    holding the accuracy on each of ``eval_sets``.
    """
    d_attack = list(d_attack)
    if not d_attack:
        raise InvalidInputError("attack set is empty")
    hooked = model.copy() if isinstance(model, HookedModel) else HookedModel(model.copy())

    def row(epoch):
        return {"epoch": epoch, **{name: qa_accuracy(hooked, ex) for name, ex in eval_sets.items()}}

    trace = [row(0)]
    batch_all = to_batch(d_attack)
    rng = stream(config.seed, "relearn-attack")
    opt = AdamW(lr=config.lr)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(d_attack))
        for s in range(0, len(order), config.batch):
            _, _, g = value_and_grad(hooked, batch_all.subset(order[s:s + config.batch]), "base")
            opt.step(hooked.base.params, g)
        trace.append(row(epoch))
    attacked = hooked if isinstance(model, HookedModel) else hooked.base
    return attacked, trace


def write_trace_csv(path, trace, columns=("unlearn_test_acc", "retain1_acc", "retain2_acc"),
                    meta: dict | None = None) -> None:
    """One row per epoch; ``meta`` (if given) becomes a leading ``# key=value`` comment line."""
    with open(Path(path), "w", newline="") as fh:
        if meta:
            fh.write(meta_comment(meta))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", *columns])
        for r in trace:
            w.writerow([r["epoch"], *(fmt6(r[c]) for c in columns)])
