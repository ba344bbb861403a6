import numpy as np
import pytest

from dilqa.bench import CostModel, compare, estimate, report, report_tsv, run_benchmark
from dilqa.encoder import ModelConfig
from dilqa.tensor import ContractError


class TestCostModel:
    def test_block_formula(self):
        cost = CostModel(d_model=64, d_ff=128)
        n, d, dff = 48, 64, 128
        assert cost.block_macs(n) == 4 * n * d * d + 2 * n * n * d + 2 * n * d * dff

    def test_strictly_increasing(self):
        cost = CostModel(d_model=32, d_ff=64)
        values = [cost.block_macs(n) for n in range(1, 50)]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_embed_is_free(self):
        assert CostModel(64, 128).embed_macs(384) == 0


class TestEstimate:
    def test_k0_collapses_to_baseline(self):
        cfg = ModelConfig(l=4, k=0, d_model=32, n_heads=4, d_ff=48, q_max=8, p_max=24)
        est = estimate(cfg, q=3, p=5, n_q=8, n_p=24)
        assert est.ni_q_macs == est.ni_p_macs == 0
        assert est.i_qp_macs == est.baseline_macs
        assert est.dil_total_macs == est.baseline_macs

    def test_asymptotic_ratio_l12_k10(self):
        cfg = ModelConfig(l=12, k=10, d_model=64, n_heads=4, d_ff=128,
                          q_max=16, p_max=48)
        # the pair term dominates as q*p grows; the ratio tends to l/(l-k) = 6
        ratios = [estimate(cfg, q=n, p=n).mac_ratio for n in (1, 10, 100, 1000)]
        assert all(a < b for a, b in zip(ratios, ratios[1:]))
        assert ratios[-1] == pytest.approx(6.0, rel=0.01)

    def test_cross_term_accounting(self):
        # one interaction block on n_q+n_p costs exactly 2*d*(2*n_q*n_p) more
        # in the quadratic term than two split blocks of n_q and n_p
        cfg = ModelConfig(l=1, k=0, d_model=32, n_heads=4, d_ff=48, q_max=8, p_max=24)
        cost = CostModel(cfg.d_model, cfg.d_ff)
        n_q, n_p = 7, 20
        joint = cost.block_macs(n_q + n_p)
        split = cost.block_macs(n_q) + cost.block_macs(n_p)
        linear_extra = 4 * 0 * 0  # linear terms are additive across the split
        quad_extra = 2 * cfg.d_model * (2 * n_q * n_p)
        assert joint - split == quad_extra + linear_extra

    def test_budget_check(self):
        cfg = ModelConfig(l=2, k=1, q_max=8, p_max=8)
        with pytest.raises(ContractError):
            estimate(cfg, q=1, p=1, n_q=9, n_p=8)


def phase_macs(rep, name):
    return rep.phases[name].macs


class TestRunBenchmark:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_instrumented_equals_closed_form(self, seed):
        rng = np.random.default_rng(seed)
        l = int(rng.integers(1, 5))
        k = int(rng.integers(0, l + 1))
        cfg = ModelConfig(l=l, k=k, d_model=16, n_heads=2, d_ff=24,
                          vocab_size=32, q_max=6, p_max=10)
        q, p = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        n_q = int(rng.integers(2, cfg.q_max + 1))
        n_p = int(rng.integers(1, cfg.p_max + 1))
        est = estimate(cfg, q, p, n_q, n_p)
        dil = run_benchmark(cfg, q, p, mode="dil", n_q=n_q, n_p=n_p)
        assert phase_macs(dil, "NI Q") == est.ni_q_macs
        assert phase_macs(dil, "NI P") == est.ni_p_macs
        assert phase_macs(dil, "I Q-P") == est.i_qp_macs
        assert phase_macs(dil, "head") == est.head_macs
        base = run_benchmark(cfg, q, p, mode="baseline", n_q=n_q, n_p=n_p)
        assert phase_macs(base, "I Q-P") == est.baseline_macs
        assert phase_macs(base, "head") == est.head_macs

    def test_prebuilt_cache_moves_paragraph_time_out(self):
        cfg = ModelConfig(l=2, k=1, d_model=16, n_heads=2, d_ff=24,
                          vocab_size=32, q_max=6, p_max=10)
        rep = run_benchmark(cfg, 2, 3, mode="dil_with_prebuilt_cache")
        assert rep.phases["NI P"].seconds == 0.0
        assert rep.init_seconds > 0.0
        assert rep.phases["NI P"].macs > 0  # the work still happened

    def test_zero_questions(self):
        cfg = ModelConfig(l=2, k=1, d_model=16, n_heads=2, d_ff=24,
                          vocab_size=32, q_max=6, p_max=10)
        rep = run_benchmark(cfg, 0, 0, mode="dil")
        assert rep.total_macs == 0

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            run_benchmark(ModelConfig(l=2, k=1), 1, 1, mode="gpu")


class TestCompareAndReport:
    @pytest.fixture(scope="class")
    def reports(self):
        cfg = ModelConfig(l=4, k=3, d_model=16, n_heads=2, d_ff=24,
                          vocab_size=32, q_max=6, p_max=10)
        return compare(cfg, q=4, p=4)

    def test_speedup_filled(self, reports):
        baseline = next(r for r in reports if r.mode == "baseline")
        dil = next(r for r in reports if r.mode == "dil")
        assert baseline.speedup == pytest.approx(1.0)
        assert dil.speedup == baseline.total_seconds / dil.total_seconds

    def test_normalized_pair_phase_consistent(self, reports):
        # per-block per-pair seconds: baseline and split modes within 2x
        baseline = next(r for r in reports if r.mode == "baseline")
        dil = next(r for r in reports if r.mode == "dil")
        norm_base = baseline.phases["I Q-P"].seconds / (baseline.config.l * 16)
        norm_dil = dil.phases["I Q-P"].seconds / ((dil.config.l - dil.config.k) * 16)
        assert 0.5 <= norm_base / norm_dil <= 2.0

    def test_report_layout(self, reports):
        text = report(reports[1], normalize=True)
        for token in ("NI Q", "NI P", "I Q-P", "Total", "sec/unit", "MACs"):
            assert token in text
        assert "matrix products only" in text

    def test_tsv_output(self, reports):
        tsv = report_tsv(reports)
        lines = tsv.strip().splitlines()
        assert lines[0].split("\t") == ["mode", "phase", "seconds", "macs",
                                        "normalized_seconds"]
        assert any(line.startswith("baseline\tTotal") for line in lines)
