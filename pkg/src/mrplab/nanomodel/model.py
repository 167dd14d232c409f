"""Pre-norm decoder-only transformer in float64 numpy with a hand-written backward pass.

Shapes: ``(B, L, D)`` batch, sequence, width; attention heads use ``(B, H, L, Dh)``.
Projection hooks sit after whole blocks: the post-residual state of every token
leaving a hooked block is replaced by ``h - (h Q^T) Q``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError, NumericOverflowError
from ..linalg import ProjectionBasis

GELU_C = np.sqrt(2.0 / np.pi)
LN_EPS = 1e-5
# Well above the customary 0.02: at this scale the option-matching circuit then
# forms within a few epochs instead of after a long plateau.
INIT_STD = 0.15


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 512
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    context_len: int = 64
    mlp_expansion: int = 4

    def __post_init__(self):
        for name in ("vocab", "d_model", "n_blocks", "n_heads", "context_len", "mlp_expansion"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise InvalidInputError("d_model must be divisible by n_heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_mlp(self) -> int:
        return self.d_model * self.mlp_expansion


BLOCK_PARAMS = (
    "ln1.g", "ln1.b", "attn.w_qkv", "attn.b_qkv", "attn.w_o", "attn.b_o",
    "ln2.g", "ln2.b", "mlp.w_in", "mlp.b_in", "mlp.w_out", "mlp.b_out",
)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_mlp
    shapes: dict[str, tuple[int, ...]] = {"wte": (cfg.vocab, d), "wpe": (cfg.context_len, d)}
    per_block = {
        "ln1.g": (d,), "ln1.b": (d,),
        "attn.w_qkv": (d, 3 * d), "attn.b_qkv": (3 * d,),
        "attn.w_o": (d, d), "attn.b_o": (d,),
        "ln2.g": (d,), "ln2.b": (d,),
        "mlp.w_in": (d, f), "mlp.b_in": (f,),
        "mlp.w_out": (f, d), "mlp.b_out": (d,),
    }
    for i in range(cfg.n_blocks):
        for name in BLOCK_PARAMS:
            shapes[f"blocks.{i}.{name}"] = per_block[name]
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head"] = (d, cfg.vocab)
    return shapes


def block_param_names(i: int) -> list[str]:
    return [f"blocks.{i}.{name}" for name in BLOCK_PARAMS]


@dataclass
class BaseModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, std: float = INIT_STD) -> "BaseModel":
        rng = np.random.default_rng(seed)
        params = {}
        resid_std = std / np.sqrt(2 * config.n_blocks)
        for name, shape in param_shapes(config).items():
            if name.endswith(".g"):
                params[name] = np.ones(shape)
            elif name.endswith((".b", "b_qkv", "b_o", "b_in", "b_out")):
                params[name] = np.zeros(shape)
            elif name.endswith(("attn.w_o", "mlp.w_out")):
                params[name] = rng.normal(0.0, resid_std, size=shape)
            else:
                params[name] = rng.normal(0.0, std, size=shape)
        return cls(config, params)

    def copy(self) -> "BaseModel":
        return BaseModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass
class HookedModel:
    """Base weights plus projection bases keyed by block index (the hooked set)."""

    base: BaseModel
    hooks: dict[int, ProjectionBasis] = field(default_factory=dict)

    def __post_init__(self):
        cfg = self.base.config
        for h, basis in self.hooks.items():
            if not 0 <= h < cfg.n_blocks:
                raise InvalidInputError(f"hooked block {h} outside [0, {cfg.n_blocks})")
            if basis.dim != cfg.d_model:
                raise InvalidInputError(f"hook at block {h} has dim {basis.dim} != d_model {cfg.d_model}")

    @property
    def config(self) -> ModelConfig:
        return self.base.config

    def active_hooks(self) -> dict[int, np.ndarray]:
        return {h: b.rows for h, b in sorted(self.hooks.items()) if b.rank > 0}

    def copy(self) -> "HookedModel":
        return HookedModel(self.base.copy(), copy.deepcopy(self.hooks))


def as_hooked(model) -> HookedModel:
    return model if isinstance(model, HookedModel) else HookedModel(model)


@dataclass
class Batch:
    tokens: np.ndarray
    labels: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise InvalidInputError("tokens must have shape (B, L) with B >= 1")
        if self.labels.shape != self.tokens.shape or self.mask.shape != self.tokens.shape:
            raise InvalidInputError("tokens, labels and mask must share one shape")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.tokens[idx], self.labels[idx], self.mask[idx])


# ---------------------------------------------------------------- primitives


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    gh = dy * g
    dx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def _gelu(u):
    t = np.tanh(GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def _xty(a, b):
    """Sum over all leading axes of outer products: ``sum a[..., :, None] * b[..., None, :]``."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _causal_bias(L: int) -> np.ndarray:
    bias = np.zeros((L, L))
    bias[np.triu_indices(L, 1)] = -np.inf
    return bias


# ---------------------------------------------------------------- forward


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray):
    if tokens.ndim != 2:
        raise InvalidInputError("tokens must be (B, L)")
    if tokens.shape[1] > cfg.context_len:
        raise InvalidInputError(f"sequence length {tokens.shape[1]} exceeds context {cfg.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise InvalidInputError(f"token id outside [0, {cfg.vocab})")


def _trunk(model: HookedModel, tokens: np.ndarray, capture=(), keep_cache=False):
    """Run embeddings and blocks. Returns final residual, captures, per-block caches."""
    cfg = model.config
    p = model.base.params
    hooks = model.active_hooks()
    _check_tokens(cfg, tokens)
    B, L = tokens.shape
    H, Dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / np.sqrt(Dh)
    bias = _causal_bias(L)

    h = p["wte"][tokens] + p["wpe"][:L]
    captured = {}
    caches = []
    for i in range(cfg.n_blocks):
        pre = f"blocks.{i}."
        h_in = h
        a_in, ln1 = _layernorm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
        qkv = a_in @ p[pre + "attn.w_qkv"] + p[pre + "attn.b_qkv"]
        q, k, v = (
            qkv[..., j * cfg.d_model:(j + 1) * cfg.d_model].reshape(B, L, H, Dh).transpose(0, 2, 1, 3)
            for j in range(3)
        )
        s = (q @ k.transpose(0, 1, 3, 2)) * scale + bias
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(axis=-1, keepdims=True)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, cfg.d_model)
        h = h + o @ p[pre + "attn.w_o"] + p[pre + "attn.b_o"]
        h_mid = h
        m_in, ln2 = _layernorm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        u = m_in @ p[pre + "mlp.w_in"] + p[pre + "mlp.b_in"]
        gu, t = _gelu(u)
        h = h + gu @ p[pre + "mlp.w_out"] + p[pre + "mlp.b_out"]
        h_pre_hook = h
        if i in hooks:
            Q = hooks[i]
            h = h - (h @ Q.T) @ Q
        if i in capture:
            captured[i] = h
        if keep_cache:
            caches.append(dict(h_in=h_in, a_in=a_in, ln1=ln1, q=q, k=k, v=v, att=att, o=o,
                               h_mid=h_mid, m_in=m_in, ln2=ln2, u=u, t=t, gu=gu, h_pre_hook=h_pre_hook))
    return h, captured, caches


def forward(model, batch, capture_layers=()):
    """Full logits ``(B, L, vocab)`` and the post-projection states at ``capture_layers``."""
    model = as_hooked(model)
    tokens = batch.tokens if isinstance(batch, Batch) else np.asarray(batch, dtype=np.int64)
    capture = set(capture_layers)
    bad = [c for c in capture if not 0 <= c < model.config.n_blocks]
    if bad:
        raise InvalidInputError(f"capture layers {bad} outside the block range")
    h, captured, _ = _trunk(model, tokens, capture)
    p = model.base.params
    z, _ = _layernorm(h, p["ln_f.g"], p["ln_f.b"])
    return z @ p["head"], captured


def answer_logits(model, batch: Batch) -> np.ndarray:
    """Logits at masked positions only, shape ``(n_masked, vocab)``; row-major order."""
    model = as_hooked(model)
    h, _, _ = _trunk(model, batch.tokens)
    p = model.base.params
    z, _ = _layernorm(h[batch.mask], p["ln_f.g"], p["ln_f.b"])
    return z @ p["head"]


# ---------------------------------------------------------------- loss


def _masked_ce(logits: np.ndarray, labels: np.ndarray):
    """Per-row cross-entropy and softmax probabilities."""
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = logits - m - np.log(z)
    ce = -logp[np.arange(len(labels)), labels]
    return ce, e / z


def _check_mask(batch: Batch):
    if not batch.mask.any():
        raise InvalidInputError("loss mask marks no positions")


def loss_ce(model, batch: Batch, cap: float | None = None) -> float:
    """Mean next-token cross-entropy over masked positions (each term capped at ``cap``)."""
    _check_mask(batch)
    ce, _ = _masked_ce(answer_logits(model, batch), batch.labels[batch.mask])
    if cap is not None:
        ce = np.minimum(ce, cap)
    return float(ce.mean())


SCOPES = ("base", "hooks", "both")


def value_and_grad(model, batch: Batch, scope: str = "base", scale: float = 1.0,
                   cap: float | None = None):
    """``scale * mean_i min(ce_i, cap)`` and its gradient for the requested scope.

    Returns ``(loss, raw_mean_ce, grads)`` where ``loss`` includes ``scale`` and the
    cap, ``raw_mean_ce`` is the uncapped mean, and ``grads`` maps parameter names
    (and ``hooks.<block>`` for projection rows) to arrays.
    """
    if scope not in SCOPES:
        raise InvalidInputError(f"scope must be one of {SCOPES}")
    model = as_hooked(model)
    _check_mask(batch)
    cfg = model.config
    p = model.base.params
    hooks = model.active_hooks()
    want_base = scope in ("base", "both")
    want_hooks = scope in ("hooks", "both")
    grads: dict[str, np.ndarray] = {}
    if scope == "hooks" and not hooks:
        h, _, _ = _trunk(model, batch.tokens)
        z, _ = _layernorm(h[batch.mask], p["ln_f.g"], p["ln_f.b"])
        ce, _ = _masked_ce(z @ p["head"], batch.labels[batch.mask])
        capped = np.minimum(ce, cap) if cap is not None else ce
        return float(scale * capped.mean()), float(ce.mean()), grads

    h, _, caches = _trunk(model, batch.tokens, keep_cache=True)
    hm = h[batch.mask]
    z, lnf = _layernorm(hm, p["ln_f.g"], p["ln_f.b"])
    logits = z @ p["head"]
    labels = batch.labels[batch.mask]
    ce, probs = _masked_ce(logits, labels)
    raw = float(ce.mean())
    live = np.ones_like(ce) if cap is None else (ce < cap).astype(np.float64)
    capped = ce if cap is None else np.minimum(ce, cap)
    loss = float(scale * capped.mean())
    if not np.isfinite(loss):
        raise NumericOverflowError("loss is not finite")

    n = len(labels)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= (scale / n) * live[:, None]
    if want_base:
        grads["head"] = z.T @ dlogits
    dz = dlogits @ p["head"].T
    dhm, dg, db = _layernorm_back(dz, p["ln_f.g"], lnf)
    if want_base:
        grads["ln_f.g"], grads["ln_f.b"] = dg, db
    dh = np.zeros_like(h)
    dh[batch.mask] = dhm

    B, L = batch.tokens.shape
    H, Dh, D = cfg.n_heads, cfg.d_head, cfg.d_model
    sc = 1.0 / np.sqrt(Dh)
    lowest = min(hooks) if (hooks and not want_base) else 0
    for i in range(cfg.n_blocks - 1, lowest - 1, -1):
        c = caches[i]
        pre = f"blocks.{i}."
        if i in hooks:
            Q = hooks[i]
            x = c["h_pre_hook"]
            gQ = dh @ Q.T
            if want_hooks:
                xq = x @ Q.T
                grads[f"hooks.{i}"] = -(_xty(xq, dh) + _xty(gQ, x))
            dh = dh - gQ @ Q
        # MLP branch
        dgu = dh @ p[pre + "mlp.w_out"].T
        du = _gelu_back(dgu, c["u"], c["t"])
        dm_in = du @ p[pre + "mlp.w_in"].T
        dmid, dg2, db2 = _layernorm_back(dm_in, p[pre + "ln2.g"], c["ln2"])
        if want_base:
            grads[pre + "mlp.w_out"] = _xty(c["gu"], dh)
            grads[pre + "mlp.b_out"] = dh.sum(axis=(0, 1))
            grads[pre + "mlp.w_in"] = _xty(c["m_in"], du)
            grads[pre + "mlp.b_in"] = du.sum(axis=(0, 1))
            grads[pre + "ln2.g"], grads[pre + "ln2.b"] = dg2, db2
        dh = dh + dmid
        # attention branch
        do = dh @ p[pre + "attn.w_o"].T
        if want_base:
            grads[pre + "attn.w_o"] = _xty(c["o"], dh)
            grads[pre + "attn.b_o"] = dh.sum(axis=(0, 1))
        do = do.reshape(B, L, H, Dh).transpose(0, 2, 1, 3)
        att, q, k, v = c["att"], c["q"], c["k"], c["v"]
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * sc
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate(
            [t_.transpose(0, 2, 1, 3).reshape(B, L, D) for t_ in (dq, dk, dv)], axis=-1
        )
        da_in = dqkv @ p[pre + "attn.w_qkv"].T
        dx, dg1, db1 = _layernorm_back(da_in, p[pre + "ln1.g"], c["ln1"])
        if want_base:
            grads[pre + "attn.w_qkv"] = _xty(c["a_in"], dqkv)
            grads[pre + "attn.b_qkv"] = dqkv.sum(axis=(0, 1))
            grads[pre + "ln1.g"], grads[pre + "ln1.b"] = dg1, db1
        dh = dh + dx
    if want_base:
        gwte = np.zeros_like(p["wte"])
        np.add.at(gwte, batch.tokens, dh)
        grads["wte"] = gwte
        gwpe = np.zeros_like(p["wpe"])
        gwpe[:L] = dh.sum(axis=0)
        grads["wpe"] = gwpe
    return loss, raw, grads


def grads(model, batch: Batch, scope: str = "base") -> dict[str, np.ndarray]:
    """Gradient of the mean masked cross-entropy for ``scope`` in {base, hooks, both}."""
    _, _, g = value_and_grad(model, batch, scope)
    return g
