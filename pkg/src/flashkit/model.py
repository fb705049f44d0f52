"""Model assembly and losses.

Blocks are counted uniformly across kinds: `layers` residual blocks. GAU
kinds stack that many gated attention units; transformer kinds alternate
attention and FFN blocks (so `layers` must be even), which keeps the
"one transformer pair ~ two GAUs" replacement at equal block count.

Byte-level vocabulary: causal LMs predict over 256 byte values; masked LMs
extend the table by one reserved mask id (256) and predict over 257.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import attention as attn
from . import layers, ops
from .layers import ParamInit
from .tensor import Tensor

MODEL_KINDS = ("flash_quad", "flash", "transformer_pp", "mhsa_mlp", "linear")
BASELINE_FFN_EXPANSION = 4  # transformer baselines widen their FFN by 4x


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 128
    layers: int = 4
    context: int = 256           # T
    chunk: int = 64              # C (flash kind)
    kind: str = "flash_quad"
    kernel: str = "relu2"        # relu2 | softmax
    causal: bool = True
    norm: str = "layer"          # layer | scale
    vocab: int = 256
    expansion: int = 2           # e = expansion * d for GAU kinds
    s: Optional[int] = None      # shared head size; default min(128, d)
    heads: int = 4               # MHSA baseline head count
    tied_embedding: bool = True
    linear_form: str = "normalized"  # chunk aggregation: normalized | plain_sum

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.kernel not in ("relu2", "softmax"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.kind == "flash" and self.context % self.chunk:
            raise ConfigError(
                f"chunk size {self.chunk} must divide context length {self.context}")
        if self.kind in ("transformer_pp", "mhsa_mlp"):
            if self.layers % 2:
                raise ConfigError("transformer kinds need an even block count")
            if self.d % self.heads:
                raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")

    @property
    def e(self) -> int:
        return self.expansion * self.d

    @property
    def head_size(self) -> int:
        return min(128, self.d) if self.s is None else self.s

    @property
    def table_size(self) -> int:
        # masked-LM models reserve one extra id for the mask token
        return self.vocab if self.causal else self.vocab + 1

    @property
    def mask_id(self) -> int:
        return self.vocab

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        return ModelConfig(**json.loads(text))


@dataclass
class Model:
    cfg: ModelConfig
    seed: int
    embedding: Tensor                   # [table_size, d]
    pos: layers.ScaledSinParams
    blocks: list                        # [(tag, params), ...]
    final_norm: layers.NormParams
    out_proj: Optional[layers.DenseParams]
    param_table: dict[str, Tensor] = field(repr=False, default_factory=dict)

    def params(self) -> dict[str, Tensor]:
        return self.param_table

    def num_params(self) -> int:
        return sum(t.size for t in self.param_table.values())

    @property
    def dtype(self):
        return self.embedding.dtype

    def embed(self, tokens: np.ndarray, position_offset: int = 0) -> Tensor:
        tokens = np.asarray(tokens)
        emb = ops.gather_rows(self.embedding, tokens)  # [B, T, d]
        pos = layers.scaled_sin(tokens.shape[-1], self.cfg.d, self.pos,
                                offset=position_offset)
        return ops.add(emb, pos)

    def backbone(self, h: Tensor, segment_ids: Optional[np.ndarray] = None) -> Tensor:
        """Blocks + final norm over embedded input h: [B, T, d]."""
        cfg = self.cfg
        b, t, d = h.shape
        if cfg.kind == "flash":
            g = t // cfg.chunk
            if t % cfg.chunk:
                raise ConfigError(f"sequence length {t} not divisible by chunk {cfg.chunk}")
            h = ops.reshape(h, (b, g, cfg.chunk, d))
            seg = None if segment_ids is None else np.asarray(segment_ids).reshape(b, g, cfg.chunk)
            for _, p in self.blocks:
                h = attn.flash_forward(h, p, seg, cfg.causal, cfg.kernel, cfg.linear_form)
            h = ops.reshape(h, (b, t, d))
        else:
            for tag, p in self.blocks:
                if tag == "gau":
                    h = attn.gau_forward(h, p, cfg.causal, cfg.kernel)
                elif tag == "linear":
                    h = attn.linear_gau_forward(h, p, cfg.causal)
                elif tag == "mhsa":
                    h = attn.mhsa_forward(h, p, cfg.causal)
                elif tag == "glu":
                    h = glu_ffn_forward(h, p)
                else:
                    h = mlp_ffn_forward(h, p)
        return layers.norm(h, self.final_norm)

    def logits(self, h: Tensor) -> Tensor:
        b, t, d = h.shape
        flat = ops.reshape(h, (b * t, d))
        if self.out_proj is not None:
            out = layers.dense(flat, self.out_proj)
        else:
            out = ops.contract(flat, self.embedding, "nd,vd->nv")
        return ops.reshape(out, (b, t, self.cfg.table_size))

    def forward(self, tokens: np.ndarray, segment_ids: Optional[np.ndarray] = None) -> Tensor:
        return self.logits(self.backbone(self.embed(tokens), segment_ids))


# ---------------------------------------------------------------------------
# Baseline FFN blocks
# ---------------------------------------------------------------------------


@dataclass
class GluFfnParams:
    norm: layers.NormParams
    fused: layers.DenseParams  # d -> 2e
    out: layers.DenseParams    # e -> d
    e: int


def make_glu_ffn(init: ParamInit, name: str, d: int, e: int, norm_kind: str) -> GluFfnParams:
    return GluFfnParams(
        norm=layers.make_norm(init, f"{name}.norm", d, norm_kind),
        fused=layers.make_dense(init, f"{name}.fused", d, 2 * e),
        out=layers.make_dense(init, f"{name}.out", e, d),
        e=e,
    )


def glu_ffn_forward(x: Tensor, p: GluFfnParams) -> Tensor:
    uv = ops.unary(layers.dense(layers.norm(x, p.norm), p.fused), "gelu")
    u, v = ops.split(uv, [p.e, p.e], axis=-1)
    return ops.add(layers.dense(ops.mul(u, v), p.out), x)


@dataclass
class MlpFfnParams:
    norm: layers.NormParams
    fc: layers.DenseParams   # d -> e
    out: layers.DenseParams  # e -> d


def make_mlp_ffn(init: ParamInit, name: str, d: int, e: int, norm_kind: str) -> MlpFfnParams:
    return MlpFfnParams(
        norm=layers.make_norm(init, f"{name}.norm", d, norm_kind),
        fc=layers.make_dense(init, f"{name}.fc", d, e),
        out=layers.make_dense(init, f"{name}.out", e, d),
    )


def mlp_ffn_forward(x: Tensor, p: MlpFfnParams) -> Tensor:
    h = ops.unary(layers.dense(layers.norm(x, p.norm), p.fc), "gelu")
    return ops.add(layers.dense(h, p.out), x)


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------


def build_model(cfg: ModelConfig, seed: int, dtype=np.float64) -> Model:
    init = ParamInit(seed, dtype=dtype)
    d, e, s = cfg.d, cfg.e, cfg.head_size
    embedding = init.normal("embedding", (cfg.table_size, d))
    pos = layers.make_scaled_sin(init, "pos", d)

    blocks = []
    for i in range(cfg.layers):
        name = f"block{i}"
        if cfg.kind == "flash_quad":
            blocks.append(("gau", attn.make_gau(init, name, d, e, s, cfg.context,
                                                heads=2, norm_kind=cfg.norm)))
        elif cfg.kind == "flash":
            blocks.append(("gau", attn.make_gau(init, name, d, e, s, cfg.chunk,
                                                heads=4, norm_kind=cfg.norm)))
        elif cfg.kind == "linear":
            blocks.append(("linear", attn.make_gau(init, name, d, e, s, None,
                                                   heads=2, norm_kind=cfg.norm)))
        elif cfg.kind == "transformer_pp":
            if i % 2 == 0:
                blocks.append(("mhsa", attn.make_mhsa(init, name, d, cfg.heads, cfg.norm)))
            else:
                blocks.append(("glu", make_glu_ffn(init, name, d,
                                                   BASELINE_FFN_EXPANSION * d, cfg.norm)))
        else:  # mhsa_mlp
            if i % 2 == 0:
                blocks.append(("mhsa", attn.make_mhsa(init, name, d, cfg.heads, cfg.norm)))
            else:
                blocks.append(("mlp", make_mlp_ffn(init, name, d,
                                                   BASELINE_FFN_EXPANSION * d, cfg.norm)))

    final_norm = layers.make_norm(init, "final_norm", d, cfg.norm)
    out_proj = None
    if not cfg.tied_embedding:
        out_proj = layers.make_dense(init, "out_proj", d, cfg.table_size)
    return Model(cfg=cfg, seed=seed, embedding=embedding, pos=pos, blocks=blocks,
                 final_norm=final_norm, out_proj=out_proj, param_table=init.table)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _one_hot(ids: np.ndarray, depth: int, dtype) -> np.ndarray:
    return np.eye(depth, dtype=dtype)[ids]


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood of `targets` under `logits` [..., V].

    With `weights` (same shape as targets) the mean runs over weighted
    positions only — zero-weight positions contribute exactly nothing.
    """
    depth = logits.shape[-1]
    logp = layers.log_softmax_rows(logits)
    target = _one_hot(np.asarray(targets), depth, logits.dtype.type)
    if weights is None:
        count = float(np.asarray(targets).size)
    else:
        count = float(weights.sum())
        target = target * weights[..., None]
    spec = "btv,btv->" if logp.ndim == 3 else "nv,nv->"
    picked = ops.contract(logp, ops.constant(target), spec)
    return ops.scale(picked, -1.0 / count)


def lm_loss(model: Model, tokens: np.ndarray,
            segment_ids: Optional[np.ndarray] = None) -> Tensor:
    """Mean next-token cross-entropy in nats; perplexity is exp(loss)."""
    if not model.cfg.causal:
        raise ConfigError("lm_loss needs a causal model")
    tokens = np.asarray(tokens)
    t = tokens.shape[1]
    logits = model.forward(tokens, segment_ids)
    pred = ops.slice_axis(logits, 1, 0, t - 1)
    return cross_entropy(pred, tokens[:, 1:])


def mask_tokens(tokens: np.ndarray, rng: np.random.Generator, vocab: int,
                mask_id: int, rate: float = 0.15):
    """BERT-style corruption: of the selected 15%, 80% -> mask id, 10% ->
    random byte, 10% kept. Resamples if no position was selected."""
    while True:
        selected = rng.random(tokens.shape) < rate
        if selected.any():
            break
    roll = rng.random(tokens.shape)
    corrupted = tokens.copy()
    corrupted[selected & (roll < 0.8)] = mask_id
    random_pos = selected & (roll >= 0.8) & (roll < 0.9)
    corrupted[random_pos] = rng.integers(0, vocab, size=int(random_pos.sum()))
    return corrupted, selected


def mlm_loss(model: Model, tokens: np.ndarray, rng: np.random.Generator,
             segment_ids: Optional[np.ndarray] = None) -> Tensor:
    """Cross-entropy of reconstructing the selected positions only."""
    if model.cfg.causal:
        raise ConfigError("mlm_loss needs a non-causal model")
    tokens = np.asarray(tokens)
    corrupted, selected = mask_tokens(tokens, rng, model.cfg.vocab, model.cfg.mask_id)
    logits = model.forward(corrupted, segment_ids)
    return cross_entropy(logits, tokens, weights=selected.astype(model.dtype.type))
