"""Exact block-level Shapley attribution of the Cox risk score.

The four players are the pooled representation blocks (gg, hh, hg, gh). A
coalition keeps its blocks at the patient's values and replaces the others
with a baseline (by default the training-set mean representation). Because
the risk head is linear, the enumeration over all 16 coalitions must agree
with the closed form ``w_b . (z_b - baseline_b)``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import BLOCKS

SPECIFIC = ("gg", "hh")
SHARED = ("hg", "gh")
REPORT_SCHEMA = "dimaf.explain_report"
REPORT_VERSION = 1
NORMALIZATION = ("per-patient |phi| normalized to sum 1 over the four blocks, "
                 "then averaged over patients")


class ReportSchemaError(ValueError):
    pass


@dataclass
class BlockAttribution:
    phi: dict[str, np.ndarray]      # block -> (n,) contributions in risk units
    baseline_risk: float
    risk: np.ndarray

    def total(self) -> np.ndarray:
        return sum(self.phi[b] for b in BLOCKS)


def _linear_value(w: dict[str, np.ndarray], bias: float, blocks: dict[str, np.ndarray]) -> np.ndarray:
    return sum(blocks[b] @ w[b] for b in BLOCKS) + bias


def shapley_blocks(head_w: dict[str, np.ndarray], head_b: float, pooled: dict[str, np.ndarray],
                   baseline: dict[str, np.ndarray]) -> BlockAttribution:
    """Shapley values by enumerating every coalition of the four blocks.

    ``pooled[b]`` is (n, d_z) or (d_z,); ``baseline[b]`` is (d_z,).
    """
    pooled = {b: np.atleast_2d(np.asarray(pooled[b], dtype=np.float64)) for b in BLOCKS}
    n_players = len(BLOCKS)
    value = {}
    for mask in itertools.product((False, True), repeat=n_players):
        blocks = {b: pooled[b] if keep else np.broadcast_to(baseline[b], pooled[b].shape)
                  for b, keep in zip(BLOCKS, mask)}
        value[mask] = _linear_value(head_w, head_b, blocks)
    phi = {}
    for i, b in enumerate(BLOCKS):
        acc = np.zeros(pooled[b].shape[0])
        for mask, v in value.items():
            if mask[i]:
                continue
            s = sum(mask)
            weight = math.factorial(s) * math.factorial(n_players - s - 1) / math.factorial(n_players)
            with_i = mask[:i] + (True,) + mask[i + 1:]
            acc = acc + weight * (value[with_i] - v)
        phi[b] = acc
    base = float(_linear_value(head_w, head_b, {b: np.asarray(baseline[b])[None] for b in BLOCKS})[0])
    return BlockAttribution(phi, base, value[(True,) * n_players])


def shapley_blocks_linear(head_w, head_b, pooled, baseline) -> BlockAttribution:
    """Closed form for a linear head: phi_b = w_b . (z_b - baseline_b)."""
    pooled = {b: np.atleast_2d(np.asarray(pooled[b], dtype=np.float64)) for b in BLOCKS}
    phi = {b: (pooled[b] - baseline[b]) @ head_w[b] for b in BLOCKS}
    base = float(sum(np.asarray(baseline[b]) @ head_w[b] for b in BLOCKS) + head_b)
    return BlockAttribution(phi, base, _linear_value(head_w, head_b, pooled))


@dataclass
class ShareReport:
    block_shares: dict[str, float]
    specific: float
    shared: float
    n_patients: int
    n_excluded: int
    per_patient: np.ndarray = field(repr=False, default=None)   # (n_used, 4)

    def as_dict(self) -> dict:
        return {"blocks": {b: self.block_shares[b] for b in BLOCKS}, "specific": self.specific,
                "shared": self.shared, "n_patients": self.n_patients, "n_excluded": self.n_excluded}


def normalized_shares(attr: BlockAttribution) -> ShareReport:
    """Average of per-patient normalized |phi|, with Specific/Shared groupings."""
    mag = np.abs(np.column_stack([attr.phi[b] for b in BLOCKS]))
    tot = mag.sum(axis=1)
    keep = tot > 0
    shares = mag[keep] / tot[keep, None]
    mean = shares.mean(axis=0) if shares.shape[0] else np.full(len(BLOCKS), np.nan)
    block = {b: float(mean[i]) for i, b in enumerate(BLOCKS)}
    return ShareReport(block, block["gg"] + block["hh"], block["hg"] + block["gh"],
                       int(keep.sum()), int((~keep).sum()), shares)


def normalized_report(model, inputs, baseline: dict[str, np.ndarray]) -> ShareReport:
    """Shares for every patient in ``inputs`` under ``model``."""
    _, pooled = model.predict(inputs)
    w, b = model.head_blocks()
    return normalized_shares(shapley_blocks(w, b, pooled, baseline))


def aggregate_shares(reports: list[ShareReport]) -> dict:
    """Mean and population std across checkpoints (folds) for every share."""
    keys = [*BLOCKS, "specific", "shared"]
    rows = np.array([[r.block_shares[b] for b in BLOCKS] + [r.specific, r.shared] for r in reports])
    return {k: {"mean": float(rows[:, i].mean()), "std": float(rows[:, i].std()),
                "values": [float(v) for v in rows[:, i]]} for i, k in enumerate(keys)}


def write_explain_report(out_dir, reports: list[ShareReport], sources: list[str],
                         variant: str, baseline_kind: str = "train_mean") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"schema": REPORT_SCHEMA, "version": REPORT_VERSION, "variant": variant,
           "metadata": {"normalization": NORMALIZATION, "baseline": baseline_kind,
                        "attribution": "exact Shapley over 4 blocks"},
           "checkpoints": [{"source": s, **r.as_dict()} for s, r in zip(sources, reports)],
           "summary": aggregate_shares(reports)}
    jpath = out / "explain_report.json"
    jpath.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    cpath = out / "explain_report.csv"
    k = len(reports)
    lines = [",".join(["variant", "repr"] + [f"fold_{i}" for i in range(k)] + ["mean", "std"])]
    names = {"specific": "Specific", "shared": "Shared", "hh": "Z_hh", "gg": "Z_gg",
             "gh": "Z_gh", "hg": "Z_hg"}
    for key in ("specific", "shared", "hh", "gg", "gh", "hg"):
        s = doc["summary"][key]
        lines.append(",".join([variant, names[key], *(repr(v) for v in s["values"]),
                               repr(s["mean"]), repr(s["std"])]))
    cpath.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return jpath, cpath


def read_explain_report(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema") != REPORT_SCHEMA:
        raise ReportSchemaError(f"{path}: not an explain report")
    if doc.get("version") != REPORT_VERSION:
        raise ReportSchemaError(f"{path}: explain report version {doc.get('version')} needs migration "
                                f"to version {REPORT_VERSION}")
    return doc
