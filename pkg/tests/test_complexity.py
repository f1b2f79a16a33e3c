import json

import numpy as np
import pytest

from triformer.complexity import (measure_token_mixer_macs, model_flops_report, pairwise_score_count,
                                  token_mixer_macs)
from triformer.errors import ConfigError
from triformer.model import TriFormerConfig, TriFormerModel
from triformer.tensor import Tensor, counting, no_grad


def test_pairwise_examples():
    assert pairwise_score_count(1, 1, 1, "full3d") == 1
    assert pairwise_score_count(1, 1, 1, "factorized") == 2
    assert pairwise_score_count(9, 9, 16, "full3d") == 1_679_616
    assert pairwise_score_count(9, 9, 16, "factorized") == 104_976 + 20_736 == 125_712
    assert 1_679_616 / 125_712 == pytest.approx(13.36, abs=5e-3)


def test_factorized_cheaper_on_grid():
    # full - factorized = HW*L*((HW-1)(L-1) - 1): a tie at HW = L = 2, strictly cheaper beyond
    for h in range(1, 8):
        for w in range(1, 8):
            for l in range(2, 20):
                if h * w < 2:
                    continue
                fact, full = pairwise_score_count(h, w, l, "factorized"), pairwise_score_count(h, w, l, "full3d")
                if h * w == 2 and l == 2:
                    assert fact == full == 16
                else:
                    assert fact < full


def test_ratio_grows_on_geometric_sweep():
    ratios = [pairwise_score_count(n, n, 2 * n, "full3d") / pairwise_score_count(n, n, 2 * n, "factorized")
              for n in (2, 4, 8, 16, 32, 64)]
    assert all(b > a for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] > 50


def test_factorized_cost_monotone():
    base = token_mixer_macs(3, 3, 4, 8, 2, "factorized")
    for bumped in [(4, 3, 4, 8), (3, 4, 4, 8), (3, 3, 5, 8), (3, 3, 4, 10)]:
        assert token_mixer_macs(*bumped, 2, "factorized") >= base


@pytest.mark.parametrize("mode", ["full3d", "factorized"])
@pytest.mark.parametrize("H,W,L,C,heads", [(5, 5, 6, 16, 2), (2, 2, 2, 2, 2), (3, 4, 2, 6, 3), (1, 1, 1, 1, 1)])
def test_measured_equals_analytic(mode, H, W, L, C, heads):
    assert measure_token_mixer_macs(H, W, L, C, heads, mode) == token_mixer_macs(H, W, L, C, heads, mode)


def test_reference_mixer_counts():
    # 4*HWL*C^2 per attention unit plus 2*pairs*C
    assert token_mixer_macs(5, 5, 6, 16, 2, "full3d") == 4 * 150 * 256 + 2 * 150 ** 2 * 16 == 873_600
    assert token_mixer_macs(5, 5, 6, 16, 2, "factorized") == 2 * 4 * 150 * 256 + 2 * (6 * 625 + 25 * 36) * 16


def test_zero_extent_rejected():
    with pytest.raises(ConfigError):
        pairwise_score_count(0, 3, 3, "full3d")
    with pytest.raises(ConfigError):
        token_mixer_macs(3, 3, 0, 4, 1, "factorized")
    with pytest.raises(ConfigError):
        pairwise_score_count(3, 3, 3, "axial")


SMALL = TriFormerConfig(in_bands=12, num_classes=4, patch=7, stage_widths=(8, 16, 32, 64), stage_depths=(1, 2, 1))


@pytest.mark.parametrize("cfg", [SMALL, TriFormerConfig.tiny(in_bands=16)])
def test_report_measured_equals_analytic_per_layer(cfg):
    rep = model_flops_report(cfg)
    for row in rep.layers:
        assert row["measured"] == row["analytic"], row
    for kind, tot in rep.totals.items():
        rows = [r for r in rep.layers if r["kind"] == kind]
        assert tot["analytic"] == sum(r["analytic"] for r in rows) == tot["measured"]


def test_report_rows_cover_every_counted_op():
    with no_grad(), counting() as c:
        TriFormerModel(SMALL)(Tensor(np.zeros((1, 7, 7, 12, 1), np.float32)))
    rep = model_flops_report(SMALL)
    for kind in ("mac", "exp", "norm"):
        assert c.total(kind) == rep.totals[kind]["measured"]


def test_report_doubling_bands():
    def rows(L):
        rep = model_flops_report(SMALL, (7, 7, L))
        get = lambda n: next(r["analytic"] for r in rep.layers if r["name"] == n and r["kind"] == "mac")
        return get("stage1.block0.spectral"), get("stage1.block0.spatial")

    spec1, spat1 = rows(16)
    spec2, spat2 = rows(32)
    assert spec2 > 2 * spec1
    assert spat2 == 2 * spat1


def test_report_deterministic_and_json():
    a, b = model_flops_report(SMALL), model_flops_report(SMALL)
    assert a.to_json() == b.to_json()
    d = json.loads(a.to_json())
    assert {"layers", "totals", "ratio"} <= set(d)
    assert all({"name", "analytic", "measured"} <= set(r) for r in d["layers"])
    assert "total" in a.to_text()


def test_report_ratio_above_one_and_square_check():
    rep = model_flops_report(SMALL, (9, 9, 32))
    assert rep.pairwise_ratio > 1 and rep.ratio > 0
    with pytest.raises(ConfigError):
        model_flops_report(SMALL, (9, 7, 32))
