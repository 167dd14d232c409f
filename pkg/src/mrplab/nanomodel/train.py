"""Deterministic supervised pretraining of the base model."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import InvalidInputError, TrainingFailure
from .model import BaseModel, value_and_grad
from .optim import AdamW

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 1e-3
    batch: int = 32
    max_epochs: int = 200
    target: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0


def pretrain(model: BaseModel, corpus, config: PretrainConfig = PretrainConfig(), on_epoch=None) -> BaseModel:
    """Fit ``model`` (a copy is returned) on every topic's train split.

    Training stops once each topic's train accuracy reaches ``config.target``;
    exhausting ``max_epochs`` first raises :class:`TrainingFailure`.
    """
    from ..evalkit import qa_accuracy
    from ..taskgen import to_batch

    corpus = list(corpus)
    train = [e for c in corpus for e in c.split("train")]
    if not train:
        raise InvalidInputError("pretraining corpus has no train examples")
    model = model.copy()

    def per_topic():
        return {c.topic: qa_accuracy(model, c.split("train")) for c in corpus if c.split("train")}

    accs = per_topic() if config.target > 0 else {}
    if all(a >= config.target for a in accs.values()):
        return model
    batch_all = to_batch(train)
    rng = np.random.default_rng([config.seed, 7])
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for s in range(0, len(order), config.batch):
            b = batch_all.subset(order[s:s + config.batch])
            loss, _, g = value_and_grad(model, b, "base")
            opt.step(model.params, g)
            losses.append(loss)
        accs = per_topic()
        log.info("pretrain epoch %d loss %.4f min-acc %.3f", epoch, float(np.mean(losses)), min(accs.values()))
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses)), accs)
        if all(a >= config.target for a in accs.values()):
            return model
    raise TrainingFailure(
        f"train accuracy target {config.target} not reached in {config.max_epochs} epochs",
        {"accuracy": accs, "config": asdict(config)},
    )
