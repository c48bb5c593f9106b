import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ivgae.errors import InfeasibleRateError, MechanismInfeasibleError
from ivgae.missingness import (
    MAR,
    MNAR,
    full_mask,
    gen_mar,
    gen_mcar,
    gen_mnar,
    generate,
    mask_stats,
    read_mask,
    repair_coverage,
    write_mask,
)
from ivgae.synth import gaussian

from .conftest import make_dataset


@pytest.fixture(scope="module")
def gauss():
    return gaussian(1000, 10, seed=0)


class TestMCAR:
    def test_exact_count(self):
        d = gaussian(10, 10, seed=0)
        assert int((gen_mcar(d, 0.3, 0).m == 0).sum()) == 30

    def test_deterministic(self):
        d = gaussian(10, 10, seed=0)
        assert np.array_equal(gen_mcar(d, 0.3, 4).m, gen_mcar(d, 0.3, 4).m)
        assert not np.array_equal(gen_mcar(d, 0.3, 4).m, gen_mcar(d, 0.3, 5).m)

    def test_infeasible(self):
        d = gaussian(4, 4, seed=0)
        with pytest.raises(InfeasibleRateError):
            gen_mcar(d, 0.8, 0)
        with pytest.raises(InfeasibleRateError):
            gen_mcar(d, 1.0, 0)

    def test_column_concentration(self, gauss):
        # binomial-like spread: 300 expected per column, sd about 14.5
        good = 0
        for seed in range(100):
            per_col = (gen_mcar(gauss, 0.3, seed).m == 0).sum(axis=0)
            good += int(np.sum((per_col >= 250) & (per_col <= 350)) >= 9)
        assert good == 100

    def test_no_value_dependence(self, gauss):
        r = [np.mean(np.abs(mask_stats(gen_mcar(gauss, 0.3, s), gauss).diagnostics["point_biserial"]))
             for s in range(50)]
        assert np.mean(r) < 0.05


class TestMAR:
    def test_drivers_observed_and_rate(self, gauss):
        mask = gen_mar(gauss, 0.3, 0)
        drivers = mask.mar_config["drivers"]
        assert (mask.m[:, drivers] == 1).all()
        assert abs((mask.m == 0).mean() - 0.3) <= 0.01

    def test_driver_gap_two_columns(self):
        gen = np.random.default_rng(0)
        d = make_dataset(np.column_stack([gen.uniform(size=2000), gen.normal(size=2000)]))
        mask = gen_mar(d, 0.3, 0)
        report = mask_stats(mask, d)
        assert min(report.diagnostics["driver_gap"].values()) > 0.3

    def test_gap_on_gaussian(self, gauss):
        report = mask_stats(gen_mar(gauss, 0.3, 1), gauss)
        assert min(report.diagnostics["driver_gap"].values()) > 0.3
        assert report.diagnostics["driver_missing"] == 0.0

    def test_single_column(self):
        with pytest.raises(MechanismInfeasibleError):
            gen_mar(make_dataset(np.arange(5.0)[:, None]), 0.3, 0)

    def test_unreachable(self):
        with pytest.raises(InfeasibleRateError):
            gen_mar(gaussian(10, 2, seed=0), 0.6, 0)

    def test_independent_of_masked_value_given_driver(self, gauss):
        # the target's own values are not consulted: swapping them leaves the mask unchanged
        mask = gen_mar(gauss, 0.3, 2)
        cells = gauss.cells.copy()
        for t in mask.mar_config["targets"]:
            cells[:, t] = np.random.default_rng(t).normal(size=gauss.n)
        again = gen_mar(gauss.with_cells(cells), 0.3, 2)
        assert np.array_equal(mask.m, again.m)


class TestMNAR:
    def test_self_dependence(self):
        ratios, rates = [], []
        for seed in range(20):
            d = gaussian(1000, 10, seed=seed)
            mask = gen_mnar(d, 0.3, seed)
            diag = mask_stats(mask, d).diagnostics
            ratios.append(diag["extreme_decile_ratio"])
            rates.append((mask.m == 0).mean())
        assert np.mean(ratios) >= 2.0
        assert abs(np.mean(rates) - 0.3) <= 0.02

    def test_report_has_ratio(self, gauss):
        assert "extreme_decile_ratio" in mask_stats(gen_mnar(gauss, 0.3, 0), gauss).diagnostics

    def test_boost_one_is_uniform(self, gauss):
        hits = np.zeros(gauss.cells.shape)
        for seed in range(20):
            hits += gen_mnar(gauss, 0.3, seed, boost=1.0).m == 0
        d = mask_stats(gen_mnar(gauss, 0.3, 0, boost=1.0), gauss).diagnostics
        assert 0.8 < d["extreme_decile_ratio"] < 1.25
        assert abs(hits.mean() / 20 - 0.3) < 0.01

    def test_categorical_boost(self):
        gen = np.random.default_rng(3)
        codes = gen.integers(0, 4, size=2000)
        d = make_dataset(gen.normal(size=(2000, 1)), {"c": (codes, 4)})
        mask = gen_mnar(d, 0.3, 0)
        rates = [(mask.m[codes == k, 1] == 0).mean() for k in range(4)]
        assert max(rates) > 2 * min(rates)

    def test_categorical_infeasible(self):
        codes = np.array([0] * 95 + [1] * 5)
        d = make_dataset(np.arange(100.0)[:, None], {"c": (codes, 2)})
        with pytest.raises(InfeasibleRateError):
            gen_mnar(d, 0.9, 0, boost=3.0)


class TestCoverageAndFormat:
    @given(st.integers(2, 15), st.integers(2, 8), st.floats(0.05, 0.6), st.integers(0, 1000), st.sampled_from(["mcar", "mnar"]))
    def test_every_line_observed(self, n, p, rate, seed, mech):
        d = gaussian(n, p, seed=seed)
        try:
            mask = generate(d, mech, rate, seed)
        except InfeasibleRateError:
            return
        assert (mask.m.sum(axis=1) >= 1).all() and (mask.m.sum(axis=0) >= 1).all()
        if mech == "mcar":
            assert int((mask.m == 0).sum()) == math.floor(rate * n * p)

    @given(st.integers(0, 1000))
    def test_repair_keeps_count(self, seed):
        gen = np.random.default_rng(seed)
        m = (gen.uniform(size=(6, 5)) > 0.6).astype(np.int8)
        m[0] = 0
        m[:, 1] = 0
        if m.sum() < 8:
            return
        out = repair_coverage(m, np.random.default_rng(seed))
        assert out.sum() == m.sum()
        assert (out.sum(axis=1) >= 1).all() and (out.sum(axis=0) >= 1).all()

    def test_full_mask_stats(self, gauss):
        assert mask_stats(full_mask(gauss), gauss).global_rate == 0.0

    def test_exact_rate_report(self):
        d = gaussian(10, 10, seed=0)
        assert mask_stats(gen_mcar(d, 0.3, 0), d).global_rate == 0.3

    def test_mechanism_case_insensitive(self):
        d = gaussian(30, 4, seed=0)
        assert generate(d, "mar", 0.3, 0).mechanism == MAR
        assert generate(d, "MnAr", 0.3, 0).mechanism == MNAR
        with pytest.raises(ValueError):
            generate(d, "weird", 0.3, 0)

    def test_file_round_trip(self, tmp_path):
        d = gaussian(30, 4, seed=0)
        mask = gen_mar(d, 0.3, 7)
        side = write_mask(mask, d.names, tmp_path / "m.csv")
        assert side.exists()
        back = read_mask(tmp_path / "m.csv")
        assert np.array_equal(back.m, mask.m)
        assert back.sidecar()["mar_config"]["drivers"] == mask.mar_config["drivers"]
