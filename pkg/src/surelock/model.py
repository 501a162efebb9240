"""Toy bidirectional masked-diffusion transformer with a row-partitioned forward.

The forward pass splits sequence positions into *computed* rows and
*skipped* rows. Computed rows get the full pre-LN residual stack
(x + Attn(LN(x)), then + FFN(LN(.))); skipped rows contribute only stored
key/value vectors to attention and carry a frozen block input through the
layers unchanged. Attention is fully bidirectional, positions come from an
additive learned table, and the feed-forward is gated (up / gate / down
with SiLU), so per-step GEMM cost is exactly proportional to the number of
computed rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, InvalidInputError, NoWorkError, StateCorruptionError
from .prng import normals

LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the toy transformer.

    ``vocab_size`` includes the reserved mask token (``mask_id``, by default
    the last id). ``n_kv_heads`` may divide ``n_heads`` for grouped key/value
    sharing; head width is ``d_model // n_heads``.
    """

    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq: int
    n_kv_heads: int | None = None
    mask_id: int | None = None

    def __post_init__(self):
        if self.n_kv_heads is None:
            object.__setattr__(self, "n_kv_heads", self.n_heads)
        if self.mask_id is None:
            object.__setattr__(self, "mask_id", self.vocab_size - 1)
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must be at least 3 (two tokens plus mask)")
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_seq) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(f"n_kv_heads={self.n_kv_heads} must divide n_heads={self.n_heads}")
        if not 0 <= self.mask_id < self.vocab_size:
            raise ConfigError(f"mask_id={self.mask_id} outside vocabulary")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "d_ff": self.d_ff,
            "max_seq": self.max_seq,
            "mask_id": self.mask_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerWeights:
    wq: np.ndarray  # (d, d)
    wk: np.ndarray  # (d, kv_dim)
    wv: np.ndarray  # (d, kv_dim)
    wo: np.ndarray  # (d, d)
    ln1_gain: np.ndarray  # (d,)
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w_up: np.ndarray  # (d, d_ff)
    w_gate: np.ndarray  # (d, d_ff)
    w_down: np.ndarray  # (d_ff, d)

    FIELDS = ("wq", "wk", "wv", "wo", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias", "w_up", "w_gate", "w_down")


@dataclass
class Weights:
    config: ModelConfig
    embedding: np.ndarray  # (V, d)
    positional: np.ndarray  # (max_seq, d)
    layers: list[LayerWeights]
    head: np.ndarray  # (d, V)
    seed: int | None = None

    def scaled(self, factor: float) -> "Weights":
        """A copy with every parameter multiplied by ``factor``."""
        return Weights(
            config=self.config,
            embedding=self.embedding * factor,
            positional=self.positional * factor,
            layers=[
                LayerWeights(**{name: getattr(layer, name) * factor for name in LayerWeights.FIELDS})
                for layer in self.layers
            ],
            head=self.head * factor,
            seed=self.seed,
        )

    def validate_shapes(self) -> None:
        cfg = self.config
        expect = _tensor_shapes(cfg)
        for name, arr in self._named_tensors():
            if arr.shape != expect[name]:
                raise ConfigError(f"tensor {name} has shape {arr.shape}, expected {expect[name]}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"tensor {name} contains non-finite values")

    def _named_tensors(self):
        yield "embedding", self.embedding
        yield "positional", self.positional
        for i, layer in enumerate(self.layers):
            for name in LayerWeights.FIELDS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "head", self.head


def _tensor_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, kv, dff = cfg.d_model, cfg.kv_dim, cfg.d_ff
    shapes = {
        "embedding": (cfg.vocab_size, d),
        "positional": (cfg.max_seq, d),
        "head": (d, cfg.vocab_size),
    }
    per_layer = {
        "wq": (d, d),
        "wk": (d, kv),
        "wv": (d, kv),
        "wo": (d, d),
        "ln1_gain": (d,),
        "ln1_bias": (d,),
        "ln2_gain": (d,),
        "ln2_bias": (d,),
        "w_up": (d, dff),
        "w_gate": (d, dff),
        "w_down": (dff, d),
    }
    for i in range(cfg.n_layers):
        for name, shape in per_layer.items():
            shapes[f"layers.{i}.{name}"] = shape
    return shapes


INIT_STD = 0.02


def init_weights(cfg: ModelConfig, seed: int) -> Weights:
    """Draw all parameters N(0, 0.02^2) from one splitmix64/Box-Muller stream.

    Tensors are filled row-major from a single normal stream in a fixed
    order - embedding, positional table, then each layer's fields in
    declaration order (wq, wk, wv, wo, ln1 gain/bias, ln2 gain/bias, w_up,
    w_gate, w_down), then the output head - so equal seeds give
    bit-identical parameters.
    """
    shapes = _tensor_shapes(cfg)
    order = ["embedding", "positional"]
    for i in range(cfg.n_layers):
        order.extend(f"layers.{i}.{name}" for name in LayerWeights.FIELDS)
    order.append("head")

    total = sum(int(np.prod(shapes[name])) for name in order)
    stream = normals(seed, total) * INIT_STD

    tensors: dict[str, np.ndarray] = {}
    cursor = 0
    for name in order:
        shape = shapes[name]
        size = int(np.prod(shape))
        tensors[name] = stream[cursor : cursor + size].reshape(shape).copy()
        cursor += size

    layers = [
        LayerWeights(**{fld: tensors[f"layers.{i}.{fld}"] for fld in LayerWeights.FIELDS})
        for i in range(cfg.n_layers)
    ]
    return Weights(
        config=cfg,
        embedding=tensors["embedding"],
        positional=tensors["positional"],
        layers=layers,
        head=tensors["head"],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# key/value caches and frozen block inputs


@dataclass
class LayerKVCache:
    """Stored key/value rows for positions excluded from this step's compute.

    ``valid`` marks the rows a forward call may read; in pure lock-mode runs
    the valid set is exactly the locked set and those rows stay immutable
    until an unlock event.
    """

    k: np.ndarray  # (N, kv_dim)
    v: np.ndarray  # (N, kv_dim)
    valid: np.ndarray  # (N,) bool

    @classmethod
    def empty(cls, n: int, kv_dim: int) -> "LayerKVCache":
        return cls(
            k=np.zeros((n, kv_dim), dtype=np.float64),
            v=np.zeros((n, kv_dim), dtype=np.float64),
            valid=np.zeros(n, dtype=bool),
        )


@dataclass
class FrozenInputs:
    """Block-input rows captured once at lock time, one row per position."""

    x_hat: np.ndarray  # (N, d)
    valid: np.ndarray  # (N,) bool

    @classmethod
    def empty(cls, n: int, d: int) -> "FrozenInputs":
        return cls(x_hat=np.zeros((n, d), dtype=np.float64), valid=np.zeros(n, dtype=bool))


@dataclass
class ForwardResult:
    logits: np.ndarray  # (C, V) for computed rows, in `active` order
    fresh_k: list[np.ndarray]  # per layer, (C, kv_dim)
    fresh_v: list[np.ndarray]
    block_inputs: np.ndarray  # (C, d) embedding rows of computed positions
    head_flops: int  # output-head GEMM cost, reported separately
    attn_weight_sums: np.ndarray | None = None  # (n_layers, C, H) when collected
    post_ln_max_norm: float = 0.0  # max row 2-norm seen after either LN


def forward_partial(
    w: Weights,
    tokens: np.ndarray,
    mask_flags: np.ndarray,
    active: np.ndarray,
    caches: list[LayerKVCache],
    frozen: FrozenInputs,
    scale: float = 1.0,
    counter=None,
    collect_stats: bool = False,
) -> ForwardResult:
    """Forward pass over the computed rows only.

    ``active`` lists the positions to compute (sorted, unique). Every other
    position must have a valid cache row at every layer; those rows supply
    K/V to attention and are otherwise untouched, so changing a skipped
    position's token id cannot change any output. ``scale`` multiplies every
    weight tensor (scale=0 exercises the constant-logit degenerate case).
    ``counter`` receives one gemm(m, n, k) call per matrix multiply.
    """
    cfg = w.config
    n = len(tokens)
    if n > cfg.max_seq:
        raise InvalidInputError(f"sequence length {n} exceeds max_seq {cfg.max_seq}")
    active = np.asarray(active, dtype=np.intp)
    if active.size == 0:
        raise NoWorkError("forward requested with no computed rows")
    if active.size != np.unique(active).size or active.min() < 0 or active.max() >= n:
        raise InvalidInputError("computed row indices must be unique and in range")
    if np.any(tokens[mask_flags] != cfg.mask_id):
        raise InvalidInputError("masked positions must carry the mask token id")

    skipped = np.setdiff1d(np.arange(n), active)
    if len(caches) != cfg.n_layers:
        raise StateCorruptionError(f"expected {cfg.n_layers} cache layers, got {len(caches)}")
    for li, cache in enumerate(caches):
        if skipped.size and not np.all(cache.valid[skipped]):
            bad = skipped[~cache.valid[skipped]]
            raise StateCorruptionError(f"layer {li}: no cached K/V for skipped rows {bad.tolist()}")
    if skipped.size and not np.all(frozen.valid[skipped]):
        bad = skipped[~frozen.valid[skipped]]
        raise StateCorruptionError(f"no frozen block input for skipped rows {bad.tolist()}")

    if scale != 1.0:
        w = w.scaled(scale)

    c = active.size
    d, h, dh, kv_dim = cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.kv_dim
    inv_sqrt_dh = 1.0 / np.sqrt(dh)

    emb_rows = w.embedding[tokens[active]] + w.positional[active]
    x = emb_rows.copy()  # (C, d); skipped rows live only in caches/frozen

    fresh_k: list[np.ndarray] = []
    fresh_v: list[np.ndarray] = []
    weight_sums = [] if collect_stats else None
    max_norm = 0.0

    for cache, layer in zip(caches, w.layers):
        hid = kernels.layernorm_rows(x, layer.ln1_gain, layer.ln1_bias, LN_EPS)
        if collect_stats:
            max_norm = max(max_norm, float(np.linalg.norm(hid, axis=1).max()))

        q = hid @ layer.wq
        if counter is not None:
            counter.gemm(c, d, d)
        k = hid @ layer.wk
        v = hid @ layer.wv
        if counter is not None:
            counter.gemm(c, kv_dim, d)
            counter.gemm(c, kv_dim, d)
        fresh_k.append(k)
        fresh_v.append(v)

        k_all = cache.k.copy()
        v_all = cache.v.copy()
        k_all[active] = k
        v_all[active] = v

        q3 = np.ascontiguousarray(q.reshape(c, h, dh))
        k3 = k_all.reshape(n, cfg.n_kv_heads, dh)
        v3 = v_all.reshape(n, cfg.n_kv_heads, dh)
        attn = kernels.attention_rows(q3, k3, v3, inv_sqrt_dh, cfg.group_size)
        if counter is not None:
            # per head: scores (C x N from dh) and weighted values (C x dh from N)
            for _ in range(h):
                counter.gemm(c, n, dh)
                counter.gemm(c, dh, n)
        if collect_stats:
            weight_sums.append(
                kernels.attention_row_weights(q3, k3, inv_sqrt_dh, cfg.group_size).sum(axis=2)
            )

        out = attn.reshape(c, d) @ layer.wo
        if counter is not None:
            counter.gemm(c, d, d)
        x = x + out

        hid2 = kernels.layernorm_rows(x, layer.ln2_gain, layer.ln2_bias, LN_EPS)
        if collect_stats:
            max_norm = max(max_norm, float(np.linalg.norm(hid2, axis=1).max()))
        up = hid2 @ layer.w_up
        gate = hid2 @ layer.w_gate
        if counter is not None:
            counter.gemm(c, cfg.d_ff, d)
            counter.gemm(c, cfg.d_ff, d)
        act = gate / (1.0 + np.exp(-gate)) * up
        down = act @ layer.w_down
        if counter is not None:
            counter.gemm(c, d, cfg.d_ff)
        x = x + down

    logits = x @ w.head
    head_flops = 2 * c * d * cfg.vocab_size
    if counter is not None:
        counter.gemm_head(c, cfg.vocab_size, d)

    return ForwardResult(
        logits=logits,
        fresh_k=fresh_k,
        fresh_v=fresh_v,
        block_inputs=emb_rows,
        head_flops=head_flops,
        attn_weight_sums=np.stack(weight_sums) if collect_stats else None,
        post_ln_max_norm=max_norm,
    )


# ---------------------------------------------------------------------------
# weight file I/O: one JSON document {config, seed?, tensors}


def save_weights(w: Weights, path: str | Path) -> None:
    doc = {
        "config": w.config.to_dict(),
        "tensors": {name: arr.tolist() for name, arr in w._named_tensors()},
    }
    if w.seed is not None:
        doc["seed"] = w.seed
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_weights(path: str | Path) -> Weights:
    doc = json.loads(Path(path).read_text())
    try:
        cfg = ModelConfig.from_dict(doc["config"])
        tensors = {name: np.asarray(arr, dtype=np.float64) for name, arr in doc["tensors"].items()}
        layers = [
            LayerWeights(**{fld: tensors[f"layers.{i}.{fld}"] for fld in LayerWeights.FIELDS})
            for i in range(cfg.n_layers)
        ]
        w = Weights(
            config=cfg,
            embedding=tensors["embedding"],
            positional=tensors["positional"],
            layers=layers,
            head=tensors["head"],
            seed=doc.get("seed"),
        )
    except KeyError as exc:
        raise ConfigError(f"weight file {path} is missing tensor {exc}") from exc
    w.validate_shapes()
    return w
