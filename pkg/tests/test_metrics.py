import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cdrode import geometry as geo
from cdrode import graph as gr
from cdrode import metrics as mt
from cdrode import synthetic
from cdrode.dynamics import ModelConfig, zero_params
from cdrode.ode import SolverConfig
from conftest import SMALL, random_params, toy_graph

letters = st.text(alphabet=gr.ALPHABET, min_size=1, max_size=30)


def test_saturated_argmax():
    logits = np.zeros((1, 20))
    logits[0, 0] = 50.0
    d = mt.decode(logits, coords=np.zeros((1, 3, 3)))
    assert d.sequence == "A" and d.confidence[0] == 1.0


def test_argmax_ties_pick_lowest_index():
    logits = np.zeros((2, 20))
    logits[0, [4, 9]] = 3.0
    logits[1, [19, 2]] = 1.0
    assert mt.decode(logits, coords=np.zeros((2, 3, 3))).sequence == "FD"


def test_decode_rebuilds_structure():
    x = synthetic.random_backbone(9, np.random.default_rng(0))
    internal = geo.placement_coords(x)
    d = mt.decode(np.zeros((6, 20)), internal, x[:3])
    assert mt.rmsd_eval(d.coords, x[3:]) < 1e-3
    np.testing.assert_allclose(d.probabilities.sum(1), 1.0, atol=1e-9)


def test_zero_dynamics_generate_uniform_all_alanine():
    g = toy_graph(0, m=5, n=3)
    d = mt.generate(g, zero_params(ModelConfig(**SMALL)), SolverConfig(t_end=10.0, steps=4))
    assert d.sequence == "AAAAA"
    np.testing.assert_allclose(d.probabilities, 0.05, rtol=0, atol=1e-15)


def test_generate_deterministic_and_adaptive():
    g = toy_graph(1, m=4, n=2)
    params = random_params(ModelConfig(**SMALL), seed=1, scale=0.1)
    cfg = SolverConfig(method="heun_adaptive", t_end=20.0)
    a, b = mt.generate(g, params, cfg), mt.generate(g, params, cfg)
    assert a.sequence == b.sequence
    assert a.probabilities.tobytes() == b.probabilities.tobytes()
    assert a.coords.tobytes() == b.coords.tobytes()


def test_perplexity_cases():
    u = np.full((4, 20), 0.05)
    assert mt.perplexity(u, "ACDE") == 20.0
    assert mt.perplexity(mt.softmax(np.zeros((7, 20))), "ACDEFGH") == 20.0
    onehot = np.eye(20)[[0, 1, 2, 3]]
    assert mt.perplexity(onehot, "ACDE") == 1.0
    half = np.vstack([onehot[:2], u[:2]])
    assert abs(mt.perplexity(half, "ACDE") - np.sqrt(20)) < 1e-12
    assert abs(np.sqrt(20) - 4.4721) < 1e-4


def test_perplexity_clamps_zero_probability():
    rows = np.zeros((1, 20))
    rows[0, 1] = 1.0
    assert mt.perplexity(rows, "A") == pytest.approx(1e12)
    with pytest.raises(mt.MetricError):
        mt.perplexity(rows, "AC")


def test_aar_cases():
    assert mt.aar("ACDE", "ACDE") == 100.0
    assert mt.aar("ACDE", "ACDF") == 75.0
    assert mt.aar("AAAA", "CCCC") == 0.0
    with pytest.raises(mt.MetricError):
        mt.aar("AC", "ACD")


@given(st.integers(0, 10_000))
def test_rmsd_eval_delegates_and_is_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    P, Q = rng.normal(size=(2, 6, 3, 3))
    assert mt.rmsd_eval(P, Q) == geo.kabsch_rmsd(P[:, 1], Q[:, 1])
    R, t = synthetic.random_rotation(rng), rng.normal(size=3)
    assert abs(mt.rmsd_eval(P @ R.T + t, Q) - mt.rmsd_eval(P, Q)) < 1e-9
    assert abs(mt.rmsd_eval(P, Q @ R.T + t) - mt.rmsd_eval(P, Q)) < 1e-9
    assert mt.rmsd_eval(P, P @ R.T + t) < 1e-9


def test_published_table_values():
    kd = mt.hydropathy_table()
    diwv = mt.instability_table()
    # Kyte-Doolittle extremes and the Guruprasad weights of a few dipeptides
    assert kd["I"] == 4.5 and kd["R"] == -4.5 and kd["A"] == 1.8
    assert diwv["P"]["P"] == 20.26 and diwv["W"]["C"] == 1.0
    assert set(kd) == set(gr.ALPHABET) and all(set(row) == set(gr.ALPHABET) for row in diwv.values())


def test_index_examples():
    assert mt.biochemical_indices("FWYA")[2] == 0.75
    assert mt.biochemical_indices("II")[0] == 4.5
    for pair in ["PP", "WC", "SS", "DG"]:
        v = mt.instability_table()[pair[0]][pair[1]]
        assert mt.biochemical_indices(pair)[1] == 5 * v
    with pytest.raises(mt.MetricError):
        mt.biochemical_indices("AXA")
    with pytest.raises(mt.MetricError):
        mt.biochemical_indices("")


@given(letters)
def test_index_ranges(seq):
    gravy, _, arom = mt.biochemical_indices(seq)
    assert -4.5 <= gravy <= 4.5
    assert 0 <= arom <= 1


def test_table_checksum_guard(monkeypatch):
    mt._table.cache_clear()
    monkeypatch.setitem(mt.TABLE_CHECKSUMS, "kyte_doolittle.json", "0" * 64)
    with pytest.raises(mt.MetricError, match="checksum"):
        mt.hydropathy_table()
    mt._table.cache_clear()


def test_evaluate_pools_designs():
    truth_seq = ["ACDE", "FG"]
    xyz = [synthetic.random_backbone(4, np.random.default_rng(1)), synthetic.random_backbone(2, np.random.default_rng(2))]
    designs = [
        mt.DesignResult("ACDF", np.full((4, 20), 0.05), xyz[0], np.full(4, 0.05)),
        mt.DesignResult("FG", np.eye(20)[[4, 5]], xyz[1], np.ones(2)),
    ]
    rep = mt.evaluate(designs, zip(truth_seq, xyz))
    assert abs(rep.ppl - 20 ** (4 / 6)) < 1e-12
    assert rep.aar == 87.5 and rep.rmsd < 1e-9
    assert 1 <= rep.ppl and 0 <= rep.aar <= 100 and 0 <= rep.aromaticity <= 1
    assert set(rep.to_dict()) == {"ppl", "aar", "rmsd", "gravy", "instability", "aromaticity"}
    json.dumps(rep.to_dict())
    assert "PPL" in rep.table()
    with pytest.raises(mt.MetricError):
        mt.evaluate(designs[:1], zip(truth_seq, xyz))


def test_design_result_round_trip():
    d = mt.DesignResult("AC", np.full((2, 20), 0.05), np.arange(18.0).reshape(2, 3, 3), np.full(2, 0.05))
    e = mt.DesignResult.from_json(json.loads(json.dumps(d.to_json())))
    assert e.sequence == d.sequence and np.array_equal(e.coords, d.coords)
    with pytest.raises(mt.MetricError):
        mt.DesignResult.from_json({"sequence": "A"})


def test_fixed_backbone_design_neighbours_and_frozen_structure():
    x = synthetic.random_backbone(31, np.random.default_rng(3))
    g = gr.fixed_backbone_graph(None, x, k=30)
    assert np.all(np.bincount(g.dst, minlength=31) == 30)
    params = random_params(ModelConfig(**SMALL), seed=2, scale=0.3)
    d = mt.fixed_backbone_design((None, x), params, SolverConfig(t_end=5.0, steps=3))
    np.testing.assert_array_equal(d.coords, x)
    from cdrode.dynamics import f_psi
    from cdrode.ode import integrate

    zT = integrate(lambda t, z: f_psi(t, z, g, params, t_end=5.0).value, gr.init_state(g), SolverConfig(t_end=5.0, steps=3)).final
    np.testing.assert_array_equal(zT[:, 20:], gr.init_state(g)[:, 20:])
