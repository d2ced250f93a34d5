import json
import random
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrode import data_io as dio
from cdrode import synthetic
from cdrode.dynamics import ModelConfig
from cdrode.training import init_params

CORPUS = Path(__file__).resolve().parents[1] / "data" / "corpus"


def atom(serial, name, res, chain, num, xyz, alt=" ", icode=" ", rec="ATOM"):
    return (
        f"{rec:<6s}{serial:5d} {name:<4s}{alt}{res:>3s} {chain}{num:4d}{icode}   "
        f"{xyz[0]:8.3f}{xyz[1]:8.3f}{xyz[2]:8.3f}  1.00  0.00           {name[0]}"
    )


def residue_lines(res, chain, num, base, names=("N", "CA", "C"), **kw):
    return [atom(i + 1, n, res, chain, num, base + np.array([i, 0.5 * i, 0.0]), **kw) for i, n in enumerate(names)]


def write(tmp_path, lines, name="s.pdb"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\nEND\n")
    return p


def test_minimal_single_residue(tmp_path):
    chains = dio.parse_structure(write(tmp_path, residue_lines("GLY", "H", 1, np.zeros(3))))
    (r,) = chains["H"].residues
    assert chains["H"].sequence == "G" and set(r.atoms) == {"N", "CA", "C"}
    np.testing.assert_allclose(r.backbone()[1], [1.0, 0.5, 0.0])


def test_incomplete_and_nonstandard_residues_dropped(tmp_path):
    lines = (
        residue_lines("ALA", "H", 1, np.zeros(3))
        + residue_lines("LYS", "H", 2, np.ones(3), names=("CA",))
        + residue_lines("MSE", "H", 3, 2 * np.ones(3), rec="HETATM")
        + residue_lines("TRP", "H", 4, 3 * np.ones(3))
    )
    warns = []
    chains = dio.parse_structure(write(tmp_path, lines), warns)
    assert chains["H"].sequence == "AW"
    assert any("LYS" in w and "missing N, C" in w for w in warns)
    assert any("MSE" in w for w in warns)


def test_altloc_and_first_model(tmp_path):
    lines = (
        ["MODEL        1"]
        + residue_lines("ALA", "H", 1, np.zeros(3), alt="A")
        + residue_lines("ALA", "H", 1, 9 * np.ones(3), alt="B")
        + ["ENDMDL", "MODEL        2"]
        + residue_lines("CYS", "H", 2, np.ones(3))
        + ["ENDMDL"]
    )
    chains = dio.parse_structure(write(tmp_path, lines))
    assert chains["H"].sequence == "A"
    np.testing.assert_allclose(chains["H"].coords[0, 0], 0.0)


def test_insertion_codes_sort_after_base(tmp_path):
    lines = (
        residue_lines("GLY", "H", 101, np.zeros(3), icode="B")
        + residue_lines("ALA", "H", 101, np.ones(3), icode="A")
        + residue_lines("CYS", "H", 101, 2 * np.ones(3))
        + residue_lines("ASP", "H", 100, 3 * np.ones(3))
    )
    assert dio.parse_structure(write(tmp_path, lines))["H"].sequence == "DCAG"


def test_parse_errors(tmp_path):
    with pytest.raises(dio.StructureError, match="cannot read"):
        dio.parse_structure(tmp_path / "absent.pdb")
    with pytest.raises(dio.StructureError, match="no ATOM"):
        dio.parse_structure(write(tmp_path, ["REMARK nothing"]))
    bad = residue_lines("ALA", "H", 1, np.zeros(3))
    bad[1] = bad[1][:30] + "   x.yz " + bad[1][38:]
    with pytest.raises(dio.StructureError, match=":2:"):
        dio.parse_structure(write(tmp_path, bad))


def test_corpus_parses():
    files = sorted(CORPUS.glob("*.pdb"))
    assert len(files) == 5
    for f in files:
        chains = dio.parse_structure(f)
        assert len(chains["H"]) == 30 and len(chains["A"]) == 6


def chain_of(seq, xyz, cid="H", start=1):
    res = []
    for i, (a, x) in enumerate(zip(seq, xyz)):
        r = dio.Residue(cid, start + i, "", dio.ONE_TO_THREE[a])
        r.atoms = {n: list(p) for n, p in zip(dio.BACKBONE, x)}
        res.append(r)
    return dio.Chain(cid, res)


def toy_chains(seed=0, L=12, n=5):
    rng = np.random.default_rng(seed)
    h = synthetic.random_backbone(L, rng)
    ag = synthetic.random_backbone(n, rng) + 8.0
    seq = "".join(rng.choice(list("ACDEFGHIKLMNPQRSTVWY"), L))
    return {"H": chain_of(seq, h), "A": chain_of("KLMNP"[:n], ag, "A")}


def test_extract_flanks_adjacent():
    chains = toy_chains()
    cx = dio.extract_complex(chains, dio.TaskSpec("x.pdb", "H", (3, 10), ["A"]))
    h = chains["H"]
    assert cx.cdr_sequence == h.sequence[2:10]
    np.testing.assert_array_equal(cx.left_anchor[-1], h.coords[1])  # residue 2
    np.testing.assert_array_equal(cx.right_flank, h.coords[10])  # residue 11
    np.testing.assert_array_equal(cx.cdr_positions, np.arange(3, 11))
    assert cx.provenance["cdr_range"] == [3, 10] and cx.antigen_sequence == "KLMNP"


def test_epitope_cutoff_boundaries():
    chains = toy_chains()
    base = dict(structure="x.pdb", antibody_chain="H", cdr_range=(4, 9), antigen_chains=["A"])
    assert len(dio.extract_complex(chains, dio.TaskSpec(**base)).antigen_sequence) == 5
    assert dio.extract_complex(chains, dio.TaskSpec(**base, epitope_cutoff=0.0)).antigen_sequence == ""
    cx = dio.extract_complex(chains, dio.TaskSpec(**base))
    flank = np.stack([cx.left_anchor[2, 1], cx.right_flank[1]])
    d = np.linalg.norm(cx.antigen_coords[:, None, 1] - flank[None], axis=-1).min(1)
    cut = float(np.median(d))
    kept = dio.extract_complex(chains, dio.TaskSpec(**base, epitope_cutoff=cut))
    assert len(kept.antigen_sequence) == int((d <= cut).sum())


def test_extract_errors():
    chains = toy_chains()
    for rng_, msg in [((0, 5), "outside"), ((3, 13), "outside"), ((1, 4), "left flank"), ((9, 12), "right flank")]:
        with pytest.raises(dio.TaskError, match=msg):
            dio.extract_complex(chains, dio.TaskSpec("x", "H", rng_, ["A"]))
    with pytest.raises(dio.TaskError, match="not found"):
        dio.extract_complex(chains, dio.TaskSpec("x", "L", (3, 5), ["A"]))
    with pytest.raises(dio.TaskError, match="antigen chain"):
        dio.extract_complex(chains, dio.TaskSpec("x", "H", (3, 5), []))
    gap = dict(chains)
    gap["H"] = dio.Chain("H", [r for r in chains["H"].residues if r.resseq != 6])
    with pytest.raises(dio.TaskError, match="missing between 5 and 7"):
        dio.extract_complex(gap, dio.TaskSpec("x", "H", (3, 10), ["A"]))
    fb = dio.extract_complex(chains, dio.TaskSpec("x", "H", (1, 12), mode="fixed_backbone"))
    assert fb.cdr_sequence == chains["H"].sequence and fb.left_anchor.shape == (3, 3, 3)


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_extract_is_order_insensitive(seed):
    chains = toy_chains(seed % 50)
    h = chains["H"].residues[:]
    random.Random(seed).shuffle(h)
    shuffled = {"A": chains["A"], "H": dio.Chain("H", h)}
    task = dio.TaskSpec("x", "H", (3, 10), ["A"])
    assert dio.extract_complex(shuffled, task).to_json() == dio.extract_complex(chains, task).to_json()


def test_taskspec_validation(tmp_path):
    with pytest.raises(dio.TaskError):
        dio.TaskSpec("x", "H", (5, 3))
    with pytest.raises(dio.TaskError):
        dio.TaskSpec("x", "H", (1, 3), mode="docking")
    with pytest.raises(dio.TaskError):
        dio.TaskSpec("x", "H", (1, 3), epitope_cutoff=-1.0)
    with pytest.raises(dio.TaskError, match="unknown task keys"):
        dio.TaskSpec.from_dict({"structure": "x", "antibody_chain": "H", "cdr_range": [1, 2], "colour": 1})
    p = tmp_path / "t.json"
    p.write_text(json.dumps({"structure": "a.pdb", "antibody_chain": "H", "cdr_range": [2, 3]}))
    (t,) = dio.load_tasks(p)
    assert t.structure == str(tmp_path / "a.pdb") and t.cdr_range == (2, 3)
    assert dio.TaskSpec.from_dict(t.to_dict()) == t


def test_dataset_round_trip(tmp_path):
    chains = toy_chains(1)
    cxs = [dio.extract_complex(chains, dio.TaskSpec("x", "H", r, ["A"])) for r in [(3, 10), (2, 5)]]
    p = tmp_path / "d.jsonl"
    dio.write_dataset(p, cxs)
    back = dio.read_dataset(p)
    assert [b.to_json() for b in back] == [c.to_json() for c in cxs]
    np.testing.assert_array_equal(back[0].cdr_coords, cxs[0].cdr_coords)
    assert all(json.loads(line)["v"] == 1 for line in p.read_text().splitlines())
    dio.append_dataset(p, cxs[:1])
    assert len(dio.read_dataset(p)) == 3
    dio.write_dataset(p, [])
    assert p.read_text() == "" and dio.read_dataset(p) == []


def test_dataset_errors(tmp_path):
    cx = dio.extract_complex(toy_chains(2), dio.TaskSpec("x", "H", (3, 10), ["A"]))
    good = json.dumps(cx.to_json())
    p = tmp_path / "d.jsonl"
    p.write_text(good + "\n{broken\n")
    with pytest.raises(dio.DataError, match="line 2"):
        dio.read_dataset(p)
    d = cx.to_json()
    d["v"] = 2
    p.write_text(json.dumps(d) + "\n")
    with pytest.raises(dio.DataError, match="version"):
        dio.read_dataset(p)
    d = cx.to_json()
    d["cdr_coords"] = d["cdr_coords"][:-1]
    p.write_text(good + "\n" + json.dumps(d) + "\n")
    with pytest.raises(dio.DataError, match="line 2.*cdr_coords"):
        dio.read_dataset(p)


def test_model_round_trip_bit_identical(tmp_path):
    params = init_params(ModelConfig(widths=(8, 16, 8), encoder_widths=(8, 16)), seed=4)
    params.arrays["out.W"] = np.random.default_rng(0).normal(size=params.arrays["out.W"].shape)
    p = tmp_path / "m.abode"
    dio.save_model(p, params, {"seed": 4})
    back, header = dio.load_model(p)
    assert p.read_bytes()[:6] == b"ABODE1" and header["seed"] == 4
    assert back.config == params.config and list(back.arrays) == list(params.arrays)
    for k, v in params.arrays.items():
        assert back.arrays[k].tobytes() == v.tobytes()


def test_model_errors(tmp_path):
    params = init_params(ModelConfig(widths=(8, 16, 8), encoder_widths=(8, 16)), seed=0)
    p = tmp_path / "m.abode"
    dio.save_model(p, params)
    raw = p.read_bytes()
    q = tmp_path / "bad.abode"
    q.write_bytes(raw[:-8])
    with pytest.raises(dio.ModelFileError, match="truncated payload"):
        dio.load_model(q)
    q.write_bytes(raw[:10])
    with pytest.raises(dio.ModelFileError, match="truncated header"):
        dio.load_model(q)
    q.write_bytes(b"ABODE2" + raw[6:])
    with pytest.raises(dio.ModelFileError, match="not an ABODE1"):
        dio.load_model(q)
    q.write_bytes(raw + b"\0" * 8)
    with pytest.raises(dio.ModelFileError, match="trailing"):
        dio.load_model(q)
    hlen = int.from_bytes(raw[6:14], "little")
    header = json.loads(raw[14 : 14 + hlen])
    header["shapes"]["out.W"] = [3, 3]
    hb = json.dumps(header).encode()
    q.write_bytes(b"ABODE1" + len(hb).to_bytes(8, "little") + hb + raw[14 + hlen :])
    with pytest.raises(dio.ModelFileError, match="shapes disagree"):
        dio.load_model(q)
    with pytest.raises(dio.ModelFileError, match="cannot read"):
        dio.load_model(tmp_path / "nope")
