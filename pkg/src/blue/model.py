"""Pyramid encoder-decoder over rounded-coordinate patch hierarchies.

Encoder: per-point context vectors are embedded, a [CLS] slot is prepended,
sinusoidal positions are added, and a transformer runs at the raw level. The
run-length lists from the blur hierarchy then pool point rows into patch
rows (attention pooling by default), the [CLS] row rides along unchanged, and
the next transformer runs at the coarser level. The topmost [CLS] output is
the trajectory representation.

Decoder: starting from the coarsest encoder output, a transformer refines it,
cross-attention (queries = the next finer encoder output) stretches it back
to the finer length, self-attention smooths it, and a transformer runs on the
sum with the finer encoder output. No positional encoding is added in the
decoder; the encoder outputs already carry it. Two small MLP heads map the
final point rows back to the spatial and temporal context vectors, and the
pretraining loss is the batch mean of each trajectory's summed squared error
over valid points.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import Parameter

POOLING_MODES = ("attention", "mean", "max", "min")

# canonical level -> decimal places of that level's coordinate cells
LEVEL_DECIMALS = {1: 5, 2: 3, 3: 2}
_DECIMALS_TO_LAYER_SLOT = {5: 0, 3: 1, 2: 2}


@dataclass
class ModelConfig:
    d: int = 128
    heads: int = 4
    layers: tuple[int, int, int] = (2, 4, 2)
    dropout: float = 0.1
    pooling: str = "attention"
    levels_enabled: tuple[int, ...] = (1, 2, 3)
    ffn_mult: int = 4
    dtype: str = "float32"
    loss_point_mean: bool = False

    def __post_init__(self) -> None:
        self.layers = tuple(int(x) for x in self.layers)
        self.levels_enabled = tuple(sorted(set(int(x) for x in self.levels_enabled)))
        if self.d < 2 or self.d % 2 != 0:
            raise ValueError(f"d must be a positive even number, got {self.d}")
        if self.heads < 1 or self.d % self.heads != 0:
            raise ValueError(f"heads must divide d, got d={self.d}, heads={self.heads}")
        if len(self.layers) != 3 or any(n < 1 for n in self.layers):
            raise ValueError(f"layers must be three positive counts, got {self.layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if not self.levels_enabled or any(l not in (1, 2, 3) for l in self.levels_enabled):
            raise ValueError(
                f"levels_enabled must be a non-empty subset of (1, 2, 3), got {self.levels_enabled}"
            )
        if self.ffn_mult < 1:
            raise ValueError(f"ffn_mult must be >= 1, got {self.ffn_mult}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.loss_point_mean not in (True, False):
            raise ValueError("loss_point_mean must be a bool")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def precisions(self) -> tuple[int, ...]:
        """Decimal places per structural level, finest first.

        The raw level is always present as input; levels 2 and 3 exist only
        when enabled. Disabling level 1 removes its transformer, not the raw
        input itself.
        """
        out = [LEVEL_DECIMALS[1]]
        if 2 in self.levels_enabled:
            out.append(LEVEL_DECIMALS[2])
        if 3 in self.levels_enabled:
            out.append(LEVEL_DECIMALS[3])
        return tuple(out)

    def layer_count(self, decimals: int) -> int:
        return self.layers[_DECIMALS_TO_LAYER_SLOT[decimals]]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("layers", "levels_enabled"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def sinusoidal_encoding(length: int, d: int, dtype=np.float32) -> np.ndarray:
    """Classic sin/cos position table, shape (length, d)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, idx / d)
    pe = np.zeros((length, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(dtype)


# ---------------------------------------------------------------------------
# Parameter store and layer building blocks
# ---------------------------------------------------------------------------


class ParamStore:
    """Ordered, name-addressed parameter registry."""

    def __init__(self, dtype):
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}

    def create(self, name: str, array: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(array, name, dtype=self.dtype)
        self.params[name] = p
        return p

    def glorot(self, name: str, fan_in: int, fan_out: int, rng) -> Parameter:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return self.create(name, rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def zeros(self, name: str, shape) -> Parameter:
        return self.create(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Parameter:
        return self.create(name, np.ones(shape))

    def all(self) -> list[Parameter]:
        return list(self.params.values())

    def total_size(self) -> int:
        return sum(p.data.size for p in self.params.values())


class Linear:
    def __init__(self, store, name, d_in, d_out, rng, bias=True):
        self.w = store.glorot(f"{name}.w", d_in, d_out, rng)
        self.b = store.zeros(f"{name}.b", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.w)
        if self.b is not None:
            out = ad.add(out, self.b)
        return out


class LayerNorm:
    def __init__(self, store, name, d):
        self.gamma = store.ones(f"{name}.gamma", (d,))
        self.beta = store.zeros(f"{name}.beta", (d,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x), self.gamma), self.beta)


class MultiHeadAttention:
    """Standard multi-head attention with key-validity masking.

    Dropout (when training) is applied to the attention weights.
    """

    def __init__(self, store, name, d, heads, dropout_p, rng):
        self.wq = Linear(store, f"{name}.q", d, d, rng)
        self.wk = Linear(store, f"{name}.k", d, d, rng)
        self.wv = Linear(store, f"{name}.v", d, d, rng)
        self.wo = Linear(store, f"{name}.o", d, d, rng)
        self.heads = heads
        self.dh = d // heads
        self.p = dropout_p

    def __call__(self, q_in, k_in, v_in, key_valid, train=False, rng=None) -> Tensor:
        B, Lq, d = q_in.shape
        Lk = k_in.shape[1]

        def split(x, L):  # (B, L, d) -> (B, heads, L, dh)
            return ad.swap_axes(ad.reshape(x, (B, L, self.heads, self.dh)), 1, 2)

        qh = split(self.wq(q_in), Lq)
        kh = split(self.wk(k_in), Lk)
        vh = split(self.wv(v_in), Lk)
        scores = ad.scale(ad.matmul(qh, ad.swap_axes(kh, -1, -2)), 1.0 / math.sqrt(self.dh))
        amask = np.where(key_valid, 0.0, -np.inf)[:, None, None, :]  # (B, 1, 1, Lk)
        attn = ad.masked_softmax(scores, amask)
        attn = ad.dropout(attn, self.p, train, rng)
        ctx = ad.matmul(attn, vh)  # (B, heads, Lq, dh)
        return self.wo(ad.reshape(ad.swap_axes(ctx, 1, 2), (B, Lq, d)))


class EncoderLayer:
    """Pre-norm transformer block: attention then a relu FFN, residual both."""

    def __init__(self, store, name, d, heads, ffn_mult, dropout_p, rng):
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, heads, dropout_p, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.ff1 = Linear(store, f"{name}.ff1", d, d * ffn_mult, rng)
        self.ff2 = Linear(store, f"{name}.ff2", d * ffn_mult, d, rng)
        self.p = dropout_p

    def __call__(self, x, key_valid, train=False, rng=None) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h, h, key_valid, train, rng))
        f = self.ff2(ad.relu(self.ff1(self.ln2(x))))
        return ad.add(x, ad.dropout(f, self.p, train, rng))


class TransformerStack:
    def __init__(self, store, name, n_layers, d, heads, ffn_mult, dropout_p, rng):
        self.layers = [
            EncoderLayer(store, f"{name}.l{i}", d, heads, ffn_mult, dropout_p, rng)
            for i in range(n_layers)
        ]
        self.ln_out = LayerNorm(store, f"{name}.ln_out", d)

    def __call__(self, x, key_valid, train=False, rng=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, key_valid, train, rng)
        return self.ln_out(x)


class ScoreMlp:
    """Per-slot pooling score: linear, layer norm, relu, linear to a scalar."""

    def __init__(self, store, name, d, rng):
        self.lin1 = Linear(store, f"{name}.lin1", d, d, rng)
        self.ln = LayerNorm(store, f"{name}.ln", d)
        self.lin2 = Linear(store, f"{name}.lin2", d, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ad.relu(self.ln(self.lin1(x))))


class Mlp2:
    """Two-layer relu MLP used for the reconstruction and task heads."""

    def __init__(self, store, name, d_in, d_out, rng):
        self.lin1 = Linear(store, f"{name}.lin1", d_in, d_in, rng)
        self.lin2 = Linear(store, f"{name}.lin2", d_in, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ad.relu(self.lin1(x)))


class EncoderOutput(NamedTuple):
    levels: list  # Tensor per structural level, each (B, L_k + 1, d) with [CLS]
    masks: list  # bool (B, L_k + 1) validity per level, [CLS] column included
    cls: Tensor  # (B, d) topmost [CLS] rows


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------


class BlueModel:
    """Hierarchy of transformers over blurred coordinate patches."""

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        cfg = config
        d = cfg.d
        self.store = ParamStore(cfg.np_dtype)
        store = self.store

        # -- point embedding -------------------------------------------------
        self.spatial_lin = Linear(store, "embed.spatial", 6, d, rng)
        self.temporal_w1 = store.glorot("embed.temporal.w1", 6, d // 2, rng)
        self.temporal_w2 = store.glorot("embed.temporal.w2", 6, d // 2, rng)
        self.cls_token = store.create("embed.cls", rng.normal(0.0, 0.02, size=(d,)))
        self.pad_embedding = store.zeros("embed.pad", (d,))

        precisions = cfg.precisions
        self.level_tags = [f"p{p}" for p in precisions]
        n_levels = len(precisions)

        # -- encoder stacks ---------------------------------------------------
        self.enc_stacks: list[Optional[TransformerStack]] = []
        for i, p in enumerate(precisions):
            if i == 0 and 1 not in cfg.levels_enabled:
                self.enc_stacks.append(None)  # raw level kept, transformer removed
                continue
            self.enc_stacks.append(
                TransformerStack(
                    store, f"enc.{self.level_tags[i]}", cfg.layer_count(p), d,
                    cfg.heads, cfg.ffn_mult, cfg.dropout, rng,
                )
            )

        # -- pooling per level transition --------------------------------------
        self.pool_mlps: list[Optional[ScoreMlp]] = []
        for k in range(n_levels - 1):
            tag = f"pool.{self.level_tags[k]}_{self.level_tags[k + 1]}"
            if cfg.pooling == "attention":
                self.pool_mlps.append(ScoreMlp(store, tag, d, rng))
            else:
                self.pool_mlps.append(None)

        # -- decoder: mirrored stacks plus bare attention between levels -------
        self.dec_stacks: list[Optional[TransformerStack]] = []
        self.cross_attn: list[Optional[MultiHeadAttention]] = []
        self.self_attn: list[Optional[MultiHeadAttention]] = []
        if n_levels > 1:
            for i, p in enumerate(precisions):
                if i == 0 and 1 not in cfg.levels_enabled:
                    self.dec_stacks.append(None)
                    continue
                self.dec_stacks.append(
                    TransformerStack(
                        store, f"dec.{self.level_tags[i]}", cfg.layer_count(p), d,
                        cfg.heads, cfg.ffn_mult, cfg.dropout, rng,
                    )
                )
            for k in range(n_levels - 1):
                tag = f"up.{self.level_tags[k + 1]}_{self.level_tags[k]}"
                self.cross_attn.append(
                    MultiHeadAttention(store, f"{tag}.cross", d, cfg.heads, cfg.dropout, rng)
                )
                self.self_attn.append(
                    MultiHeadAttention(store, f"{tag}.self", d, cfg.heads, cfg.dropout, rng)
                )

        # -- reconstruction heads ----------------------------------------------
        self.head_spatial = Mlp2(store, "head.spatial", d, 6, rng)
        self.head_temporal = Mlp2(store, "head.temporal", d, 6, rng)

    # -- small helpers --------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return self.store.all()

    def param_count(self) -> int:
        return self.store.total_size()

    def _broadcast_row(self, p: Parameter, B: int) -> Tensor:
        """(d,) parameter -> (B, 1, d) tensor, gradient summed back."""
        row = ad.reshape(p, (1, 1, self.config.d))
        return ad.mul(row, np.ones((B, 1, 1), dtype=self.config.np_dtype))

    # -- forward pieces ---------------------------------------------------------

    def embed_points(self, spatial: Tensor, temporal: Tensor) -> Tensor:
        """Context vectors -> d-dim embeddings: linear spatial part plus a
        half-linear, half-sinusoidal temporal part, shapes (B, L, 6) -> (B, L, d)."""
        e_s = self.spatial_lin(spatial)
        lin = ad.matmul(temporal, self.temporal_w1)
        per = ad.sin(ad.matmul(temporal, self.temporal_w2))
        return ad.add(e_s, ad.concat([lin, per], axis=-1))

    def add_positional(self, x: Tensor) -> Tensor:
        pe = sinusoidal_encoding(x.shape[1], self.config.d, self.config.np_dtype)
        return ad.add(x, pe[None, :, :])

    def _prepend_cls(self, body: Tensor) -> Tensor:
        cls = self._broadcast_row(self.cls_token, body.shape[0])
        return ad.concat([cls, body], axis=1)

    @staticmethod
    def _with_cls_column(mask: np.ndarray) -> np.ndarray:
        B = mask.shape[0]
        return np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)

    def patch_tensor(self, h: Tensor, transition) -> Tensor:
        """Arrange the finer rows into patch slots, shape (B, L_next, M, d).

        [CLS] is dropped before patching; pad slots hold the pad embedding.
        """
        B, L1p, d = h.shape
        body = ad.slice_axis(h, 1, 1, L1p)
        flat = ad.reshape(body, (B * (L1p - 1), d))
        gathered = ad.gather_rows(flat, transition.index)  # (B, Ln, M, d)
        slot = transition.slot_mask[..., None].astype(self.config.np_dtype)
        pad = ad.reshape(self.pad_embedding, (1, 1, 1, d))
        return ad.add(ad.mul(gathered, slot), ad.mul(pad, 1.0 - slot))

    def patchify_pool(self, h: Tensor, transition, k: int, train=False, rng=None) -> Tensor:
        """Pool finer rows into patch rows and re-prepend the carried [CLS].

        Output shape (B, L_next + 1, d); padded patch positions hold the pad
        embedding.
        """
        cfg = self.config
        B, _, d = h.shape
        P = self.patch_tensor(h, transition)
        Ln, M = transition.index.shape[1], transition.index.shape[2]
        slot = transition.slot_mask.astype(cfg.np_dtype)

        if cfg.pooling == "attention":
            scores = ad.reshape(self.pool_mlps[k](P), (B, Ln, M))
            amask = np.where(transition.slot_mask, 0.0, -np.inf)
            weights = ad.masked_softmax(scores, amask)  # pad slots exactly 0
            pooled = ad.matmul(ad.reshape(weights, (B, Ln, 1, M)), P)
            pooled = ad.reshape(pooled, (B, Ln, d))
        elif cfg.pooling == "mean":
            denom = np.maximum(transition.lengths, 1).astype(cfg.np_dtype)
            w = slot / denom[..., None]
            pooled = ad.reshape(ad.matmul(Tensor(w[:, :, None, :]), P), (B, Ln, d))
        elif cfg.pooling == "max":
            fill = ((1.0 - slot) * -1e30)[..., None]
            pooled = ad.reduce_max(ad.add(ad.mul(P, slot[..., None]), fill), axis=2)
        else:  # min
            fill = ((1.0 - slot) * 1e30)[..., None]
            pooled = ad.reduce_min(ad.add(ad.mul(P, slot[..., None]), fill), axis=2)

        cls_row = ad.slice_axis(h, 1, 0, 1)
        e_next = ad.concat([cls_row, pooled], axis=1)  # (B, Ln + 1, d)
        m = self._with_cls_column(transition.mask)[..., None].astype(cfg.np_dtype)
        pad = ad.reshape(self.pad_embedding, (1, 1, d))
        return ad.add(ad.mul(e_next, m), ad.mul(pad, 1.0 - m))

    def encode(self, batch, train: bool = False, rng=None) -> EncoderOutput:
        """Run the encoder pyramid; returns every level plus the [CLS] vector."""
        cfg = self.config
        B = batch.S.shape[0]
        E = self.embed_points(Tensor(batch.S), Tensor(batch.T))
        x = self.add_positional(self._prepend_cls(E))
        mask = self._with_cls_column(batch.mask1)
        if self.enc_stacks[0] is not None:
            x = self.enc_stacks[0](x, mask, train, rng)
        levels, masks = [x], [mask]

        if len(batch.transitions) != len(self.enc_stacks) - 1:
            raise ValueError(
                f"batch has {len(batch.transitions)} patch transitions but the model "
                f"expects {len(self.enc_stacks) - 1}; rebuild the batch with "
                f"precisions {cfg.precisions}"
            )
        for k, transition in enumerate(batch.transitions):
            e = self.patchify_pool(x, transition, k, train, rng)
            e = self.add_positional(e)
            mask = self._with_cls_column(transition.mask)
            x = self.enc_stacks[k + 1](e, mask, train, rng)
            levels.append(x)
            masks.append(mask)

        cls = ad.reshape(ad.slice_axis(x, 1, 0, 1), (B, cfg.d))
        return EncoderOutput(levels=levels, masks=masks, cls=cls)

    def decode(self, enc: EncoderOutput, train: bool = False, rng=None) -> Tensor:
        """Stretch the coarsest level back to per-point rows, (B, L1 + 1, d)."""
        top = len(enc.levels) - 1
        x = enc.levels[top]
        if top == 0:
            return x  # single-level variant: reconstruct straight off the encoder
        if self.dec_stacks[top] is not None:
            x = self.dec_stacks[top](x, enc.masks[top], train, rng)
        for k in range(top - 1, -1, -1):
            q = enc.levels[k]
            x = self.cross_attn[k](q, x, x, enc.masks[k + 1], train, rng)
            x = self.self_attn[k](x, x, x, enc.masks[k], train, rng)
            x = ad.add(x, q)
            if self.dec_stacks[k] is not None:
                x = self.dec_stacks[k](x, enc.masks[k], train, rng)
        return x

    def reconstruct_and_loss(self, h_hat: Tensor, batch) -> Tensor:
        """Squared-error reconstruction of both context vectors, batch mean."""
        cfg = self.config
        B, L1p, d = h_hat.shape
        rows = ad.slice_axis(h_hat, 1, 1, L1p)  # drop [CLS]
        y_s = self.head_spatial(rows)
        y_t = self.head_temporal(rows)
        m = batch.mask1[..., None].astype(cfg.np_dtype)
        err_s = ad.mul(ad.squared_error(y_s, batch.S), m)
        err_t = ad.mul(ad.squared_error(y_t, batch.T), m)
        per_traj = ad.add(
            ad.tensor_sum(err_s, axis=(1, 2)), ad.tensor_sum(err_t, axis=(1, 2))
        )  # (B,)
        if cfg.loss_point_mean:
            per_traj = ad.mul(per_traj, 1.0 / batch.lengths1.astype(cfg.np_dtype))
        return ad.mean(per_traj)

    def forward_loss(self, batch, train: bool = False, rng=None) -> Tensor:
        enc = self.encode(batch, train, rng)
        h_hat = self.decode(enc, train, rng)
        return self.reconstruct_and_loss(h_hat, batch)

    def embed(self, batch) -> np.ndarray:
        """Trajectory representations without gradients, shape (B, d)."""
        return np.array(self.encode(batch, train=False).cls.data)
