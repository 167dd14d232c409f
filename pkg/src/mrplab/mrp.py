"""Projection-based unlearning: basis initialization, projection training, continual loop.

For every hooked block the model carries an orthonormal basis ``Q`` and applies
``P = I - Q^T Q`` to the block's output. An unlearning request

1. snapshots the current bases,
2. builds new directions orthogonal to retain-set hidden states and aligned with
   the unlearn set (QR of retain states, projection, uncentered PCA),
3. appends them to the previous basis (QR of the stacked rows),
4. trains only the bases on ``-min(L_unlearn, cap) + alpha * L_retain`` while the
   base weights stay frozen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSubspaceError, InvalidInputError, InvalidLayerError, NumericOverflowError, RankCollapseError
from .linalg import ProjectionBasis, apply_projection, pca_top_k, qr_orthobasis
from .nanomodel.model import BaseModel, Batch, HookedModel, forward, value_and_grad
from .nanomodel.optim import AdamWState, adamw_step
from .seeding import stream
from .taskgen import to_batch

log = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-8


@dataclass(frozen=True)
class MrpConfig:
    alpha: float = 1.2
    lr: float = 2e-4
    batch: int = 5
    epochs: int = 2
    init_samples: int = 200
    dims_per_task: int = 2
    hooked_layers: tuple[int, ...] = (2, 3)
    unlearn_ce_cap: float | None = None  # None -> 2 ln(vocab)
    reortho_every_step: bool = True
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hooked_layers", tuple(sorted(set(int(h) for h in self.hooked_layers))))
        if not self.alpha > 1:
            raise InvalidInputError(f"alpha must exceed 1, got {self.alpha}")
        if self.dims_per_task < 1:
            raise InvalidInputError("dims_per_task must be >= 1")
        if self.init_samples < self.dims_per_task:
            raise InvalidInputError("init_samples must be >= dims_per_task")
        if self.batch < 1 or self.epochs < 0:
            raise InvalidInputError("batch must be >= 1 and epochs >= 0")
        if not self.hooked_layers:
            raise InvalidInputError("at least one hooked layer is required")

    def cap_for(self, vocab: int) -> float:
        return self.unlearn_ce_cap if self.unlearn_ce_cap is not None else 2.0 * math.log(vocab)


@dataclass
class HookState:
    """Current and previous bases per hooked block, plus the optimizer moments."""

    bases: dict[int, ProjectionBasis]
    prev: dict[int, ProjectionBasis]
    optimizer: AdamWState = field(default_factory=AdamWState)

    @classmethod
    def empty(cls, layers, dim: int) -> "HookState":
        return cls({h: ProjectionBasis.empty(dim) for h in layers},
                   {h: ProjectionBasis.empty(dim) for h in layers})

    def ranks(self) -> dict[int, int]:
        return {h: b.rank for h, b in self.bases.items()}

    def hooked(self, base: BaseModel) -> HookedModel:
        return HookedModel(base, dict(self.bases))

    def copy(self) -> "HookState":
        return HookState(dict(self.bases), dict(self.prev), AdamWState())


# ---------------------------------------------------------------- initialization


def extract_hidden_states(model, data, layer: int, K: int | None = None, chunk: int = 256) -> np.ndarray:
    """One row per example: mean post-projection state over its answer positions."""
    model = model if isinstance(model, HookedModel) else HookedModel(model)
    if not 0 <= layer < model.config.n_blocks:
        raise InvalidLayerError(f"layer {layer} is neither hooked nor inside [0, {model.config.n_blocks})")
    data = list(data)
    K = len(data) if K is None else K
    if K < 1 or len(data) < K:
        raise InvalidInputError(f"need at least K={K} examples, got {len(data)}")
    rows = []
    for s in range(0, K, chunk):
        part = data[s:min(s + chunk, K)]
        batch = part if isinstance(part, Batch) else to_batch(part)
        _, cap = forward(model, batch, capture_layers=[layer])
        states = cap[layer]
        m = batch.mask[..., None]
        rows.append((states * m).sum(axis=1) / m.sum(axis=1))
    return np.concatenate(rows, axis=0)


def init_projection(q_prev: ProjectionBasis, retain_states, unlearn_states, k: int,
                    rank_tol: float = 1e-8) -> tuple[ProjectionBasis, np.ndarray]:
    """Grow ``q_prev`` by ``k`` directions; returns ``(new_basis, q_init)``.

    ``q_init`` holds the top-``k`` uncentered principal directions of the unlearn
    states after removing their component in the span of the retain states, so
    it annihilates every supplied retain state.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    retain = np.atleast_2d(np.asarray(retain_states, dtype=np.float64))
    unlearn = np.atleast_2d(np.asarray(unlearn_states, dtype=np.float64))
    d = q_prev.dim
    if retain.shape[1] != d or unlearn.shape[1] != d:
        raise InvalidInputError("state width does not match the basis dimension")
    q_ret = qr_orthobasis(retain, rank_tol)
    projected = apply_projection(q_ret, unlearn)
    norms = np.linalg.norm(unlearn, axis=1)
    pnorms = np.linalg.norm(projected, axis=1)
    if np.all(pnorms <= DEGENERATE_TOL * np.maximum(norms, 1e-300)):
        raise DegenerateSubspaceError(
            "unlearn states lie inside the retain span; no direction separates the tasks"
        )
    q_init = pca_top_k(projected, k, rank_tol)
    if q_init.shape[0] < k:
        raise DegenerateSubspaceError(
            f"projected unlearn states span only {q_init.shape[0]} of the {k} requested directions"
        )
    combined = qr_orthobasis(np.vstack([q_prev.rows, q_init]), rank_tol)
    return combined, q_init


# ---------------------------------------------------------------- loss and training


@dataclass(frozen=True)
class CompositeTerms:
    total: float
    unlearn_ce: float
    unlearn_capped: float
    retain_ce: float


def combine_terms(unlearn_ce: float, retain_ce: float, alpha: float, cap: float = math.inf) -> float:
    return -min(unlearn_ce, cap) + alpha * retain_ce


def composite_value_and_grad(model: HookedModel, batch_unl: Batch, batch_ret: Batch, alpha: float,
                             cap: float | None, scope: str = "hooks"):
    """Value, per-term breakdown and gradient of ``-mean min(ce_u, cap) + alpha * L_ret``."""
    lu, raw_u, gu = value_and_grad(model, batch_unl, scope, scale=-1.0, cap=cap)
    lr_, raw_r, gr = value_and_grad(model, batch_ret, scope, scale=alpha)
    total = lu + lr_
    if not np.isfinite(total):
        raise NumericOverflowError("composite loss is not finite")
    grads = {k: gu.get(k, 0.0) + gr.get(k, 0.0) for k in set(gu) | set(gr)}
    return CompositeTerms(total, raw_u, -lu, raw_r), grads


def composite_loss(model, batch_unl: Batch, batch_ret: Batch, alpha: float,
                   cap: float | None = None) -> CompositeTerms:
    model = model if isinstance(model, HookedModel) else HookedModel(model)
    terms, _ = composite_value_and_grad(model, batch_unl, batch_ret, alpha, cap, scope="hooks")
    return terms


def reorthonormalize(rows: np.ndarray, rank_tol: float = 1e-8) -> np.ndarray:
    """Orthonormal rows with the span of ``rows``, rotated to stay closest to ``rows``.

    The span comes from :func:`qr_orthobasis`; an orthogonal Procrustes rotation
    then undoes the sign and order changes QR introduces, so optimizer moments
    keep tracking the same coordinates.
    """
    basis = qr_orthobasis(rows, rank_tol)
    if basis.rank < rows.shape[0]:
        raise RankCollapseError(f"basis collapsed from rank {rows.shape[0]} to {basis.rank}")
    u, _, vt = np.linalg.svd(rows @ basis.rows.T)
    return (u @ vt) @ basis.rows


def paired_batches(n_unl: int, n_ret: int, batch: int, rng: np.random.Generator):
    """Unlearn indices in shuffled batches, each paired with a cycling retain batch."""
    order_u = rng.permutation(n_unl)
    order_r = rng.permutation(n_ret)
    r_pos = 0
    for s in range(0, n_unl, batch):
        bu = order_u[s:s + batch]
        br = np.take(order_r, np.arange(r_pos, r_pos + len(bu)), mode="wrap")
        r_pos = (r_pos + len(bu)) % n_ret
        yield bu, br


def _split_rows(basis: ProjectionBasis, prev: ProjectionBasis) -> tuple[np.ndarray, np.ndarray]:
    """``(frozen, free)``: the previous basis and orthonormal rows completing it to ``basis``."""
    free = qr_orthobasis(apply_projection(prev, basis.rows)) if prev.rank else basis
    expected = basis.rank - prev.rank
    if free.rank != expected:
        raise RankCollapseError(f"basis of rank {basis.rank} does not extend its previous rank {prev.rank}")
    return prev.rows, free.rows.copy()


def train_projection(base: BaseModel, state: HookState, d_unl, d_ret, config: MrpConfig,
                     step_log: list | None = None, on_step=None) -> HookState:
    """Optimize the hooked bases with AdamW; base weights are read-only here.

    Rows inherited from earlier requests (``state.prev``) stay fixed so the row
    space never shrinks; only the rows added by the current request move, and
    they are kept orthogonal to the fixed ones. ``on_step(step, bases)`` sees the
    bases after every update.
    """
    d_unl, d_ret = list(d_unl), list(d_ret)
    if not d_unl or not d_ret:
        raise InvalidInputError("unlearn and retain sets must be non-empty")
    cap = config.cap_for(base.config.vocab)
    frozen, free = {}, {}
    for h, b in state.bases.items():
        prev = state.prev.get(h, ProjectionBasis.empty(b.dim))
        if b.rank > prev.rank:
            frozen[h], free[h] = _split_rows(b, prev)
    if not free or config.epochs == 0:
        return state
    bu_all, br_all = to_batch(d_unl), to_batch(d_ret)
    rng = stream(config.seed, f"mrp-train-{sum(b.rank for b in state.bases.values())}")
    opt = state.optimizer
    params = {f"hooks.{h}": arr for h, arr in free.items()}

    def current(check):
        out = dict(state.bases)
        for h in free:
            out[h] = ProjectionBasis(np.vstack([frozen[h], free[h]]), check=check)
        return out

    step = 0
    for epoch in range(config.epochs):
        for iu, ir in paired_batches(len(d_unl), len(d_ret), config.batch, rng):
            hooked = HookedModel(base, current(check=False))
            terms, g = composite_value_and_grad(hooked, bu_all.subset(iu), br_all.subset(ir),
                                                config.alpha, cap, scope="hooks")
            g = {f"hooks.{h}": g[f"hooks.{h}"][len(frozen[h]):] for h in free}
            adamw_step(params, g, opt, config.lr, config.weight_decay)
            if config.reortho_every_step:
                for h in free:
                    rows = free[h]
                    if len(frozen[h]):
                        rows = rows - (rows @ frozen[h].T) @ frozen[h]
                    free[h][...] = reorthonormalize(rows)
            step += 1
            if step_log is not None:
                step_log.append({"epoch": epoch, "step": step, "loss": terms.total,
                                 "unlearn_ce": terms.unlearn_ce, "retain_ce": terms.retain_ce})
            if on_step is not None:
                on_step(step, current(check=False))
    return HookState(current(check=config.reortho_every_step), state.prev, opt)


def unlearn_task(base: BaseModel, state: HookState, d_unl, d_ret, config: MrpConfig,
                 step_log: list | None = None, tag: str = "", on_step=None) -> HookState:
    """Service one unlearning request; every hooked basis gains ``dims_per_task`` rows."""
    d_unl, d_ret = list(d_unl), list(d_ret)
    if not d_unl or not d_ret:
        raise InvalidInputError("unlearn and retain sets must be non-empty")
    K = config.init_samples
    if len(d_unl) < K or len(d_ret) < K:
        raise InvalidInputError(f"init_samples K={K} exceeds available data ({len(d_unl)}, {len(d_ret)})")
    rng = stream(config.seed, f"mrp-init-{tag}")
    pick_u = [d_unl[i] for i in sorted(rng.choice(len(d_unl), K, replace=False))]
    pick_r = [d_ret[i] for i in sorted(rng.choice(len(d_ret), K, replace=False))]

    prev = dict(state.bases)
    bases = dict(state.bases)
    for h in config.hooked_layers:
        bases.setdefault(h, ProjectionBasis.empty(base.config.d_model))
        prev.setdefault(h, ProjectionBasis.empty(base.config.d_model))
    for h in config.hooked_layers:
        hooked = HookedModel(base, bases)
        ret_states = extract_hidden_states(hooked, pick_r, h, K)
        unl_states = extract_hidden_states(hooked, pick_u, h, K)
        bases[h], _ = init_projection(bases[h], ret_states, unl_states, config.dims_per_task)
        log.info("block %d: rank %d -> %d", h, prev[h].rank, bases[h].rank)
    state = HookState(bases, prev, AdamWState())
    state = train_projection(base, state, d_unl, d_ret, config, step_log, on_step)
    return HookState(dict(state.bases), dict(state.bases), AdamWState())


@dataclass
class StageResult:
    stage: int
    request: str
    state: HookState
    model: HookedModel
    step_log: list


def continual_unlearn(base: BaseModel, requests, config: MrpConfig, order=None, on_stage=None,
                      state: HookState | None = None):
    """Apply ``requests`` (``(name, d_unl, d_ret)`` triples) one after another.

    ``order`` is a list of request indices, ``"random"`` (derived from the config
    seed) or ``None`` for the given order. ``on_stage(result)`` fires after each
    stage. Returns the final hooked model and the list of stage results.
    """
    requests = list(requests)
    if not requests:
        raise InvalidInputError("at least one unlearning request is required")
    if order == "random":
        order = list(stream(config.seed, "unlearn-order").permutation(len(requests)))
    elif order is None:
        order = list(range(len(requests)))
    if sorted(order) != list(range(len(requests))):
        raise InvalidInputError(f"order {order} is not a permutation of the requests")
    state = state or HookState.empty(config.hooked_layers, base.config.d_model)
    results = []
    for stage, idx in enumerate(order, start=1):
        name, d_unl, d_ret = requests[idx]
        steps: list = []
        state = unlearn_task(base, state, d_unl, d_ret, config, steps, tag=f"{stage}-{name}")
        res = StageResult(stage, name, state, state.hooked(base), steps)
        results.append(res)
        if on_stage is not None:
            on_stage(res)
    return state.hooked(base), results


def trainable_param_count(hooks) -> int:
    """Sum of ``rank * dim`` over hooked bases (accepts a HookState, HookedModel or dict)."""
    if isinstance(hooks, HookState):
        hooks = hooks.bases
    elif isinstance(hooks, HookedModel):
        hooks = hooks.hooks
    return int(sum(b.rank * b.dim for b in hooks.values()))
