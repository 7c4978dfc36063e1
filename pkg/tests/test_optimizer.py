import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egorse import cbo
from egorse.gp import GpConfig
from egorse.optimizer import EgorseConfig, History, best_point, read_history_csv, run_egorse
from egorse.problems import make_mb

FAST_ACQ = cbo.AcquisitionSettings(global_population=10, global_generations=5, local_refine_steps=5)
FAST_GP = GpConfig(n_starts=2, maxiter=30)


def sphere(x):
    return float(np.sum((x[:2] - 0.3) ** 2))


def fast_config(**kw):
    kw.setdefault("acquisition", FAST_ACQ)
    kw.setdefault("gp", FAST_GP)
    return EgorseConfig(**kw)


class TestConfig:
    def test_defaults(self):
        c = EgorseConfig(d=10)
        assert c.budget_per_subspace == 40 and c.initial_doe_size == 10 and c.T == 2
        assert c.total_evaluations == 10 + 10 * 2 * 40

    def test_eight_hundred_budget(self):
        c = EgorseConfig(d=10, max_nb_it=9, initial_doe_size=80)
        assert c.total_evaluations == 800

    @pytest.mark.parametrize("kw", [
        {"d": 10, "d_e": 10}, {"d": 10, "methods": ()}, {"d": 10, "methods": ("sobol",)},
        {"d": 10, "budget_per_subspace": 4}, {"d": 10, "initial_doe_size": 1},
        {"d": 10, "max_nb_it": -1}, {"d": 10, "inner_seeding": "warm"},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EgorseConfig(**kw)


class TestRun:
    def test_only_doe(self):
        h = run_egorse(sphere, fast_config(d=6, max_nb_it=0, initial_doe_size=7))
        assert len(h) == 7
        assert np.array_equal(h.best_trace, np.minimum.accumulate(h.f_values))
        assert {r.method_tag for r in h.records} == {"doe"}

    def test_accounting_and_provenance(self):
        calls = []
        cfg = fast_config(d=8, max_nb_it=2, budget_per_subspace=6, initial_doe_size=5,
                          methods=("pls", "gaussian"))
        h = run_egorse(lambda x: calls.append(1) or sphere(x), cfg)
        assert len(h) == cfg.total_evaluations == len(calls) == 5 + 2 * 2 * 6
        assert [r.evaluation_index for r in h.records] == list(range(len(h)))
        tags = [r.method_tag for r in h.records]
        assert tags == ["doe"] * 5 + (["pls"] * 6 + ["gaussian"] * 6) * 2
        assert h.gp_input_dims == {2}
        assert np.all(np.abs(h.points) <= 1.0)
        assert set(r.used_map for r in h.records[5:]) <= {"B", "W"}

    def test_deterministic(self):
        cfg = fast_config(d=6, max_nb_it=1, budget_per_subspace=6, initial_doe_size=6, seed=3)
        a, b = run_egorse(sphere, cfg), run_egorse(sphere, cfg)
        assert np.array_equal(a.f_values, b.f_values)
        assert np.array_equal(a.points, b.points)
        assert a.to_csv(timing=False) == b.to_csv(timing=False)

    def test_non_finite_objective(self):
        def f(x):
            return np.inf if x[0] > 0.5 else sphere(x)
        h = run_egorse(f, fast_config(d=5, max_nb_it=1, budget_per_subspace=6, seed=1))
        assert len(h) == 5 + 2 * 6
        assert np.isfinite(h.best_trace[-1])

    def test_supervised_fallback(self):
        # constant outputs: PLS cannot build a direction and falls back to Gaussian
        h = run_egorse(lambda x: 1.0, fast_config(d=5, methods=("pls",), max_nb_it=1,
                                                  budget_per_subspace=5))
        assert all("pls-fallback" in r.flags for r in h.records[5:])
        assert h.transfer_matrices[0].method_tag == "gaussian"

    def test_shared_archive_and_projected_seeding(self):
        cfg = fast_config(d=6, max_nb_it=1, budget_per_subspace=6, inner_seeding="projected",
                          share_within_iteration=True)
        h = run_egorse(sphere, cfg)
        assert len(h) == cfg.total_evaluations

    def test_mgp_variant(self):
        from egorse.embeddings import MgpConfig
        cfg = fast_config(d=5, methods=("mgp", "gaussian"), max_nb_it=1, budget_per_subspace=5,
                          mgp=MgpConfig(map_iterations=10, n_random_starts=0))
        assert len(run_egorse(sphere, cfg)) == cfg.total_evaluations


class TestBestPoint:
    def test_single_record(self):
        h = History()
        h.append(full_point=np.zeros(3), f_value=2.0, wall_clock_seconds=0.0,
                 outer_iteration=-1, method_tag="doe", used_map="none")
        x, v = best_point(h)
        assert v == 2.0 and np.array_equal(x, np.zeros(3))

    def test_matches_scan_and_trace(self):
        h = run_egorse(sphere, fast_config(d=5, max_nb_it=1, budget_per_subspace=5))
        x, v = best_point(h)
        assert v == min(h.f_values) == h.best_trace[-1]
        assert sphere(x) == v

    def test_earliest_on_ties(self):
        h = History()
        for i, v in enumerate([3.0, 1.0, 1.0]):
            h.append(full_point=np.full(2, i), f_value=v, wall_clock_seconds=0.0,
                     outer_iteration=0, method_tag="gaussian", used_map="B")
        assert np.array_equal(best_point(h)[0], np.full(2, 1))

    def test_empty(self):
        with pytest.raises(ValueError):
            best_point(History())


class TestCsv:
    def test_round_trip(self, tmp_path):
        h = run_egorse(make_mb(6, 0), fast_config(d=6, max_nb_it=1, budget_per_subspace=5))
        path = tmp_path / "h.csv"
        h.to_csv(path)
        back = read_history_csv(path)
        assert np.array_equal(back["f_value"], h.f_values)
        assert np.array_equal(back["best_so_far"], h.best_trace)
        assert back["method"] == [r.method_tag for r in h.records]
        assert open(path).readline().strip() == \
            "eval_index,outer_iter,method,used_map,f_value,best_so_far,wall_clock_s"

    def test_timing_off(self):
        h = run_egorse(sphere, fast_config(d=5, max_nb_it=0))
        rows = h.to_csv(timing=False).splitlines()[1:]
        assert all(r.endswith(",0") for r in rows)


@settings(max_examples=8, deadline=None)
@given(st.integers(3, 30), st.integers(1, 2), st.integers(0, 2),
       st.sampled_from([("gaussian",), ("hash",), ("pls",), ("pls", "gaussian")]),
       st.integers(2, 8), st.integers(0, 1000))
def test_property_budget_exact(d, d_e, n_it, methods, doe, seed):
    if d_e >= d:
        d_e = d - 1
    cfg = fast_config(d=d, d_e=d_e, methods=methods, max_nb_it=n_it,
                      budget_per_subspace=d_e + 3, initial_doe_size=doe, seed=seed)
    p = make_mb(d, seed)
    h = run_egorse(p, cfg)
    assert len(h) == cfg.total_evaluations == p.evaluations
    assert all(k <= d_e for k in h.gp_input_dims)
    assert np.all(np.diff(h.best_trace) <= 0)
