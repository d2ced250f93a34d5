import hypothesis
import numpy as np
import pytest

from cdrode import graph as gr
from cdrode import synthetic

hypothesis.settings.register_profile("ci", max_examples=30, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("ci")


def toy_graph(seed, m=8, n=6, heavy_len=None, conditional=True):
    """Conditional graph for a synthetic complex with an m-residue CDR and n antigen residues."""
    start = 4
    L = heavy_len or start + m + 4
    hs, h, ags, ag = synthetic.toy_complex(seed, heavy_len=L, cdr_start=start, cdr_len=m, antigen_len=max(n, 1))
    anchors = gr.Anchors(h[start - 3 : start].copy(), h[start + m].copy())
    pos = np.arange(start, start + m)
    if conditional:
        return gr.build_graph(m, ags[:n], ag[:n], anchors, positions=pos, labels=hs[start : start + m], true_coords=h[start : start + m])
    return gr.build_graph(m, anchors=anchors, positions=pos, labels=hs[start : start + m], true_coords=h[start : start + m])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_graph():
    return toy_graph(3, m=4, n=3)


SMALL = dict(widths=(8, 16, 8), heads=4, encoder_widths=(8, 16))


def random_params(config=None, seed=0, scale=1.0):
    """Dense uniform weights in +-scale/sqrt(fan_in), including the output projection."""
    from cdrode.dynamics import ModelConfig, ModelParams, param_shapes

    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    arrays = {k: rng.uniform(-1, 1, s) * scale / np.sqrt(s[0]) for k, s in param_shapes(config).items()}
    return ModelParams(config, arrays)


# ----------------------------------------------------------------------------
# acceptance reporting: tests marked criterion("An") roll up to one line each

CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    entry = CRITERIA.setdefault(mark.args[0], {"passed": 0, "failed": 0, "details": []})
    entry["failed" if rep.failed else "passed"] += 1
    entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(CRITERIA, key=lambda s: int(s[1:])):
        e = CRITERIA[name]
        status = "PASS" if e["failed"] == 0 else "FAIL"
        terminalreporter.write_line(f"{name} {status} ({e['passed']} passed, {e['failed']} failed)")
        for d in e["details"]:
            for line in str(d).splitlines():
                terminalreporter.write_line(f"    {line}")
