"""Disentangled attention fusion network with a linear Cox risk head.

Shapes used throughout (B = batch):

* pathway tokens: list of N_g arrays, token n is (B, |pathway n|)
* slide summary: weights (B, N_h) and means (B, N_h, D_p)
* Z_g (B, N_g, D_gh), Z_h (B, N_h, D_gh) with D_gh = d_emb + d_enc
* branch outputs (B, N, d_z); pooled blocks (B, d_z)

Branch naming follows the attention query/key modality: ``gg`` and ``hh`` are
self-attention (modality-specific); ``hg`` has transcriptomic queries over
slide keys/values (N_g rows) and ``gh`` slide queries over transcriptomic
keys/values (N_h rows).
"""
from __future__ import annotations

import dataclasses
import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from .config import ConfigError
from .diffgraph import Tensor

BLOCKS = ("gg", "hh", "hg", "gh")
CHECKPOINT_FORMAT = "dimaf-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    pathway_sizes: tuple[int, ...] = ()
    n_prototypes: int = 16
    patch_dim: int = 16
    d_emb: int = 24
    d_enc: int = 8
    d_z: int = 32
    ln_eps: float = 1e-5
    attn_scale: float | None = None

    @property
    def n_pathways(self) -> int:
        return len(self.pathway_sizes)

    @property
    def d_gh(self) -> int:
        return self.d_emb + self.d_enc

    @property
    def scale(self) -> float:
        return float(self.attn_scale if self.attn_scale is not None else self.d_z)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pathway_sizes"] = list(self.pathway_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["pathway_sizes"] = tuple(d["pathway_sizes"])
        return cls(**d)


@dataclass
class ModelInputs:
    tokens: list[np.ndarray]
    proto_weights: np.ndarray
    proto_means: np.ndarray

    def __len__(self) -> int:
        return self.proto_weights.shape[0]

    def take(self, index) -> "ModelInputs":
        index = np.asarray(index)
        return ModelInputs([t[index] for t in self.tokens], self.proto_weights[index],
                           self.proto_means[index])


@dataclass
class DisentangledRepr:
    """Pre-pool LN outputs and their pooled (row-mean) vectors per block."""

    matrices: dict[str, Tensor]
    pooled: dict[str, Tensor]

    def concat(self) -> Tensor:
        return dg.concat([self.pooled[b] for b in BLOCKS], axis=-1)

    def pooled_numpy(self) -> dict[str, np.ndarray]:
        return {b: self.pooled[b].value for b in BLOCKS}


# ---------------------------------------------------------------- building blocks


def _dense_selu(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return dg.selu(dg.add(dg.matmul(x, w), b))


def encode_pathways(tokens, params, cfg: ModelConfig) -> Tensor:
    """Per-pathway two-layer SNN, then append the learnable pathway encoding."""
    if len(tokens) != cfg.n_pathways:
        raise ConfigError(f"expected {cfg.n_pathways} pathway tokens, got {len(tokens)}")
    rows = []
    for n, tok in enumerate(tokens):
        t = dg.as_tensor(tok)
        if t.ndim == 1:
            t = dg.reshape(t, (1, t.shape[0]))
        h = _dense_selu(t, params[f"snn.{n}.w1"], params[f"snn.{n}.b1"])
        rows.append(_dense_selu(h, params[f"snn.{n}.w2"], params[f"snn.{n}.b2"]))
    emb = dg.stack(rows, axis=1)                                    # B x N_g x d_emb
    enc = dg.broadcast_to(params["pathway_enc"], (emb.shape[0], cfg.n_pathways, cfg.d_enc))
    return dg.concat([emb, enc], axis=-1)


def encode_slide(proto_weights, proto_means, params, cfg: ModelConfig) -> Tensor:
    """[pi_c | mu_c] through a shared two-layer SELU MLP, plus prototype encoding c."""
    w = np.asarray(proto_weights, dtype=np.float64)
    mu = np.asarray(proto_means, dtype=np.float64)
    if w.ndim == 1:
        w, mu = w[None], mu[None]
    if w.shape[1] != cfg.n_prototypes or mu.shape[1] != cfg.n_prototypes:
        raise ConfigError(f"expected {cfg.n_prototypes} mixture components, got {w.shape[1]}")
    x = Tensor(np.concatenate([w[..., None], mu], axis=-1))         # B x N_h x (1 + D_p)
    h = _dense_selu(x, params["slide.w1"], params["slide.b1"])
    emb = _dense_selu(h, params["slide.w2"], params["slide.b2"])
    enc = dg.broadcast_to(params["proto_enc"], (emb.shape[0], cfg.n_prototypes, cfg.d_enc))
    return dg.concat([emb, enc], axis=-1)


def attention(z_q: Tensor, z_kv: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, d: float,
              return_weights: bool = False):
    """softmax((Z_q W_Q)(Z_kv W_K)^T / sqrt(d)) (Z_kv W_V)."""
    if d <= 0:
        raise ValueError("attention scale d must be positive")
    q = dg.matmul(z_q, wq)
    k = dg.matmul(z_kv, wk)
    v = dg.matmul(z_kv, wv)
    a = dg.softmax_rows(dg.matmul(q, dg.transpose(k)) * (1.0 / np.sqrt(d)))
    out = dg.matmul(a, v)
    return (out, a) if return_weights else out


def self_attention(z, wq, wk, wv, d, return_weights=False):
    return attention(z, z, wq, wk, wv, d, return_weights)


def cross_attention(z_q, z_kv, wq, wk, wv, d, return_weights=False):
    return attention(z_q, z_kv, wq, wk, wv, d, return_weights)


def fuse(z_g: Tensor, z_h: Tensor, params, cfg: ModelConfig) -> DisentangledRepr:
    """Four attention branches, per-branch layer norm, mean over rows."""
    sources = {"gg": (z_g, z_g), "hh": (z_h, z_h), "hg": (z_g, z_h), "gh": (z_h, z_g)}
    matrices, pooled = {}, {}
    for b in BLOCKS:
        zq, zkv = sources[b]
        out = attention(zq, zkv, params[f"attn.{b}.wq"], params[f"attn.{b}.wk"],
                        params[f"attn.{b}.wv"], cfg.scale)
        ln = dg.layer_norm(out, params[f"ln.{b}.gain"], params[f"ln.{b}.bias"], cfg.ln_eps)
        matrices[b] = ln
        pooled[b] = dg.mean(ln, axis=-2)
    return DisentangledRepr(matrices, pooled)


def risk_score(rep: DisentangledRepr, params) -> Tensor:
    """Linear head over [z_gg | z_hh | z_hg | z_gh]; returns (B,) risks."""
    z = rep.concat()
    r = dg.add(dg.matmul(z, params["head.w"]), params["head.b"])
    return dg.reshape(r, (z.shape[0],))


# ---------------------------------------------------------------- model


def init_params(cfg: ModelConfig, seed: int) -> "OrderedDict[str, Tensor]":
    if cfg.n_pathways < 1 or cfg.n_prototypes < 1:
        raise ValueError("model needs at least one pathway and one prototype")
    rng = np.random.default_rng([seed, 4])
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape)

    def dense(prefix, fan_in, fan_out):
        arrays[f"{prefix}.w1"] = normal((fan_in, cfg.d_emb), 1 / np.sqrt(fan_in))
        arrays[f"{prefix}.b1"] = np.zeros(cfg.d_emb)
        arrays[f"{prefix}.w2"] = normal((cfg.d_emb, fan_out), 1 / np.sqrt(cfg.d_emb))
        arrays[f"{prefix}.b2"] = np.zeros(fan_out)

    for n, size in enumerate(cfg.pathway_sizes):
        dense(f"snn.{n}", size, cfg.d_emb)
    arrays["pathway_enc"] = normal((cfg.n_pathways, cfg.d_enc), 0.02)
    dense("slide", 1 + cfg.patch_dim, cfg.d_emb)
    arrays["proto_enc"] = normal((cfg.n_prototypes, cfg.d_enc), 0.02)
    for b in BLOCKS:
        for m in ("wq", "wk", "wv"):
            arrays[f"attn.{b}.{m}"] = normal((cfg.d_gh, cfg.d_z), 1 / np.sqrt(cfg.d_gh))
    for b in BLOCKS:
        arrays[f"ln.{b}.gain"] = np.ones(cfg.d_z)
        arrays[f"ln.{b}.bias"] = np.zeros(cfg.d_z)
    arrays["head.w"] = normal((4 * cfg.d_z, 1), 1 / np.sqrt(4 * cfg.d_z))
    arrays["head.b"] = np.zeros(1)
    return OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in arrays.items())


@dataclass
class ForwardOutput:
    risk: Tensor
    repr: DisentangledRepr
    z_g: Tensor
    z_h: Tensor


class DimafModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, params=None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    @property
    def n_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def forward(self, inputs: ModelInputs) -> ForwardOutput:
        z_g = encode_pathways(inputs.tokens, self.params, self.cfg)
        z_h = encode_slide(inputs.proto_weights, inputs.proto_means, self.params, self.cfg)
        rep = fuse(z_g, z_h, self.params, self.cfg)
        return ForwardOutput(risk_score(rep, self.params), rep, z_g, z_h)

    __call__ = forward

    def predict(self, inputs: ModelInputs) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Risks and pooled blocks as arrays, without recording a tape."""
        with dg.no_grad():
            out = self.forward(inputs)
        return out.risk.value.copy(), {b: v.copy() for b, v in out.repr.pooled_numpy().items()}

    def head_blocks(self) -> tuple[dict[str, np.ndarray], float]:
        """Risk-head weights split per block, and the bias."""
        w = self.params["head.w"].value[:, 0]
        d = self.cfg.d_z
        return {b: w[i * d:(i + 1) * d].copy() for i, b in enumerate(BLOCKS)}, float(self.params["head.b"].value[0])

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.value.copy()) for k, p in self.params.items())


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: DimafModel, extras: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> Path:
    """Write a versioned ``.npz``: ``__meta__`` JSON, ``param/<name>`` and ``extra/<name>`` arrays."""
    path = Path(path)
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
              "model_config": model.cfg.to_dict(), "param_names": list(model.params),
              "meta": meta or {}}
    arrays = {"__meta__": np.array(json.dumps(header, sort_keys=True))}
    arrays.update({f"param/{k}": v for k, v in model.state_dict().items()})
    arrays.update({f"extra/{k}": np.asarray(v) for k, v in (extras or {}).items()})
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[DimafModel, dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["__meta__"]))
            data = {k: z[k] for k in z.files if k != "__meta__"}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a DIMAF checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')} unsupported "
                              f"(expected {CHECKPOINT_VERSION})")
    cfg = ModelConfig.from_dict(header["model_config"])
    params = OrderedDict((k, Tensor(data[f"param/{k}"], requires_grad=True, name=k))
                         for k in header["param_names"])
    extras = {k[len("extra/"):]: v for k, v in data.items() if k.startswith("extra/")}
    return DimafModel(cfg, params=params), extras, header["meta"]
