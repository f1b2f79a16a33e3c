"""Closed-form vs. measured operation counts for Tri-Former and its token mixers.

Convention: one multiply-accumulate counts as 1. Softmax exponentials
(``exp``) and normalised elements (``norm``) are tallied as separate row
kinds and never enter the MAC totals or the headline ratio.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import (Attention, TriFormerConfig, TriFormerModel, full3d_attention,
                    spatial_attention, spectral_attention)
from .tensor import Tensor, counting, no_grad

MODES = ("full3d", "factorized")


def _check_extents(*ext):
    if any(int(e) < 1 for e in ext):
        raise ConfigError(f"extents must be positive, got {ext}")


def pairwise_score_count(H: int, W: int, L: int, mode: str) -> int:
    """Query-key pairs scored per head at unit channel width."""
    _check_extents(H, W, L)
    hw = H * W
    if mode == "full3d":
        return (hw * L) ** 2
    if mode == "factorized":
        return L * hw ** 2 + hw * L ** 2
    raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")


def token_mixer_macs(H: int, W: int, L: int, C: int, heads: int, mode: str) -> int:
    """Projection MACs plus score and aggregation MACs for one token mixer.

    The factorized mixer carries two independent attention units (spectral
    and spatial), hence two sets of Q/K/V/output projections.
    """
    _check_extents(H, W, L, C, heads)
    if C % heads:
        raise ConfigError(f"C={C} not divisible by heads={heads}")
    units = 1 if mode == "full3d" else 2
    return units * 4 * H * W * L * C * C + 2 * pairwise_score_count(H, W, L, mode) * C


def measure_token_mixer_macs(H: int, W: int, L: int, C: int, heads: int, mode: str, seed: int = 0) -> int:
    """MACs counted on an actual forward pass of the mixer (batch 1)."""
    _check_extents(H, W, L, C, heads)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, H, W, L, C)))
    with no_grad(), counting() as c:
        if mode == "full3d":
            full3d_attention(x, Attention(C, heads, rng, np.float64))
        elif mode == "factorized":
            spectral_attention(x, Attention(C, heads, rng, np.float64))
            spatial_attention(x, Attention(C, heads, rng, np.float64))
        else:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    return c.macs


# -- whole-model report ------------------------------------------------------------


def analytic_rows(config: TriFormerConfig) -> list[tuple[str, str, int]]:
    """(layer name, kind, count) for a batch-1 forward, derived from config alone."""
    rows = []
    P, w, r = config.patch, config.stage_widths, config.mlp_ratio
    ext = config.extents()
    H, W, L = ext[0]
    rows.append(("stem.compress", "mac", H * W * L * 3 * w[0]))
    rows.append(("stem.conv", "mac", H * W * L * 27 * w[0] * w[0]))
    rows.append(("stem.conv", "norm", H * W * L * w[0]))
    for s in range(3):
        H, W, L = ext[s + 1]
        cin, c, heads = w[s], w[s + 1], config.heads_per_stage[s]
        vol, hw = H * W * L, H * W
        rows.append((f"stage{s + 1}.down", "mac", vol * 8 * cin * c))
        for b in range(config.stage_depths[s]):
            p = f"stage{s + 1}.block{b}"
            rows += [
                (f"{p}.norm1", "norm", vol * c),
                (f"{p}.spectral", "mac", 4 * vol * c * c + 2 * hw * L * L * c),
                (f"{p}.spectral", "exp", heads * hw * L * L),
                (f"{p}.spatial", "mac", 4 * vol * c * c + 2 * L * hw * hw * c),
                (f"{p}.spatial", "exp", heads * L * hw * hw),
                (f"{p}.norm2", "norm", vol * c),
                (f"{p}.mixer", "mac", vol * 27 * c + 2 * vol * c * r * c),
            ]
    rows.append(("head", "mac", w[3] * config.num_classes))
    return rows


@dataclass
class CostReport:
    layers: list[dict] = field(default_factory=list)
    totals: dict = field(default_factory=dict)
    ratio: float = 0.0
    pairwise_ratio: float = 0.0
    extents: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"layers": self.layers, "totals": self.totals, "ratio": self.ratio,
                "pairwise_ratio": self.pairwise_ratio, "extents": self.extents}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        width = max([len(r["name"]) for r in self.layers] + [5])
        lines = [f"{'layer':<{width}}  {'kind':<4}  {'analytic':>16}  {'measured':>16}"]
        for r in self.layers:
            lines.append(f"{r['name']:<{width}}  {r['kind']:<4}  {r['analytic']:>16,}  {r['measured']:>16,}")
        for k, v in self.totals.items():
            lines.append(f"{'total':<{width}}  {k:<4}  {v['analytic']:>16,}  {v['measured']:>16,}")
        lines.append(f"token-mixer MAC ratio full3d/factorized: {self.ratio:.4f}")
        lines.append(f"pairwise-score ratio at stage-1 extents: {self.pairwise_ratio:.4f}")
        return "\n".join(lines)


def model_flops_report(config: TriFormerConfig, extents: tuple[int, int, int] | None = None) -> CostReport:
    """Per-layer analytic and instrumented counts for a batch-1 forward.

    ``extents`` = (H, W, L) of the raw input patch; H must equal W and
    overrides ``config.patch`` / ``config.in_bands``.
    """
    if extents is not None:
        H, W, L = (int(e) for e in extents)
        _check_extents(H, W, L)
        if H != W:
            raise ConfigError(f"patches are square; got H={H}, W={W}")
        config = TriFormerConfig.from_dict({**config.to_dict(), "patch": H, "in_bands": L})
    model = TriFormerModel(config, seed=0)
    x = Tensor(np.zeros((1, config.patch, config.patch, config.in_bands, 1), dtype=config.np_dtype))
    with no_grad(), counting() as c:
        model(x)
    layers = []
    for name, kind, value in analytic_rows(config):
        layers.append({"name": name, "kind": kind, "analytic": int(value),
                       "measured": int(c.counts.get(name, {}).get(kind, 0))})
    totals = {}
    for kind in ("mac", "exp", "norm"):
        rows = [r for r in layers if r["kind"] == kind]
        totals[kind] = {"analytic": sum(r["analytic"] for r in rows), "measured": sum(r["measured"] for r in rows)}
    full = fact = 0
    for s in range(3):
        H, W, L = config.extents()[s + 1]
        c_, h_ = config.stage_widths[s + 1], config.heads_per_stage[s]
        n = config.stage_depths[s]
        full += n * token_mixer_macs(H, W, L, c_, h_, "full3d")
        fact += n * token_mixer_macs(H, W, L, c_, h_, "factorized")
    H, W, L = config.extents()[1]
    pr = pairwise_score_count(H, W, L, "full3d") / pairwise_score_count(H, W, L, "factorized")
    return CostReport(layers, totals, full / fact if fact else 0.0, pr, [list(e) for e in config.extents()])
