"""PDB parsing, task specs, JSON-Lines datasets and the model container."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import ModelConfig, ModelParams, param_shapes

log = logging.getLogger(__name__)

THREE_TO_ONE = {
    "ALA": "A", "CYS": "C", "ASP": "D", "GLU": "E", "PHE": "F",
    "GLY": "G", "HIS": "H", "ILE": "I", "LYS": "K", "LEU": "L",
    "MET": "M", "ASN": "N", "PRO": "P", "GLN": "Q", "ARG": "R",
    "SER": "S", "THR": "T", "VAL": "V", "TRP": "W", "TYR": "Y",
}  # fmt: skip
ONE_TO_THREE = {v: k for k, v in THREE_TO_ONE.items()}
BACKBONE = ("N", "CA", "C")
DATASET_VERSION = 1
MAGIC = b"ABODE1"
TASK_MODES = ("conditional", "unconditional", "fixed_backbone")


class DataError(ValueError):
    pass


class StructureError(DataError):
    pass


class TaskError(DataError):
    pass


class ModelFileError(DataError):
    pass


# ----------------------------------------------------------------------------
# structures


@dataclass
class Residue:
    chain: str
    resseq: int
    icode: str
    name: str
    atoms: dict = field(default_factory=dict)  # atom name -> xyz

    @property
    def key(self) -> tuple[int, str]:
        return (self.resseq, self.icode)

    @property
    def letter(self) -> str:
        return THREE_TO_ONE[self.name]

    def backbone(self) -> np.ndarray:
        return np.array([self.atoms[a] for a in BACKBONE], dtype=np.float64)


@dataclass
class Chain:
    chain_id: str
    residues: list  # of Residue, sorted by (resSeq, iCode)

    @property
    def sequence(self) -> str:
        return "".join(r.letter for r in self.residues)

    @property
    def coords(self) -> np.ndarray:
        if not self.residues:
            return np.zeros((0, 3, 3))
        return np.stack([r.backbone() for r in self.residues])

    def index_of(self, resseq: int, icode: str = "") -> int:
        for i, r in enumerate(self.residues):
            if r.key == (resseq, icode):
                return i
        raise KeyError((self.chain_id, resseq, icode))

    def __len__(self) -> int:
        return len(self.residues)


def _field(line: str, a: int, b: int) -> str:
    return line[a - 1 : b]


def parse_structure(path, warnings: list | None = None) -> dict[str, Chain]:
    """Chains of complete standard residues from a PDB-format file.

    Keeps altLoc blank or 'A', reads only the first MODEL, and drops (with a
    warning) residues with missing backbone atoms or nonstandard names.
    """
    warn = warnings if warnings is not None else []
    try:
        text = Path(path).read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise StructureError(f"cannot read {path}: {exc}") from None
    residues: dict[tuple[str, int, str], Residue] = {}
    nonstandard: set[tuple[str, int, str, str]] = set()
    seen_atoms = False
    models = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        rec = _field(line, 1, 6).strip()
        if rec == "MODEL":
            models += 1
            continue
        if rec == "ENDMDL":
            if models >= 1:
                break
            continue
        if rec not in ("ATOM", "HETATM"):
            continue
        seen_atoms = True
        alt = _field(line, 17, 17).strip()
        if alt not in ("", "A"):
            continue
        atom = _field(line, 13, 16).strip()
        resname = _field(line, 18, 20).strip()
        chain = _field(line, 22, 22).strip()
        try:
            resseq = int(_field(line, 23, 26))
            xyz = [float(_field(line, a, a + 7)) for a in (31, 39, 47)]
        except ValueError:
            raise StructureError(f"{path}:{lineno}: malformed residue number or coordinate field") from None
        if not all(math.isfinite(v) for v in xyz):
            raise StructureError(f"{path}:{lineno}: non-finite coordinate")
        icode = _field(line, 27, 27).strip()
        key = (chain, resseq, icode)
        if resname not in THREE_TO_ONE:
            if (chain, resseq, icode, resname) not in nonstandard:
                nonstandard.add((chain, resseq, icode, resname))
                warn.append(f"dropping nonstandard residue {resname} {chain}{resseq}{icode}")
            continue
        res = residues.get(key)
        if res is None:
            res = residues[key] = Residue(chain, resseq, icode, resname)
        if atom in BACKBONE and atom not in res.atoms:
            res.atoms[atom] = xyz
    if not seen_atoms:
        raise StructureError(f"{path}: no ATOM records")
    chains: dict[str, list] = {}
    for key in sorted(residues, key=lambda k: (k[0], k[1], k[2])):
        r = residues[key]
        missing = [a for a in BACKBONE if a not in r.atoms]
        if missing:
            warn.append(f"dropping {r.name} {r.chain}{r.resseq}{r.icode}: missing {', '.join(missing)}")
            continue
        chains.setdefault(r.chain, []).append(r)
    for w in warn:
        log.warning(w)
    return {cid: Chain(cid, res) for cid, res in sorted(chains.items())}


def write_pdb(path, chains: dict[str, tuple[str, np.ndarray]], start: int = 1) -> None:
    """Write backbone-only ATOM records; ``chains`` maps id -> (sequence, coords (L, 3, 3))."""
    lines = []
    serial = 1
    for cid, (seq, xyz) in chains.items():
        for i, (aa, res) in enumerate(zip(seq, np.asarray(xyz))):
            for atom, p in zip(BACKBONE, res):
                lines.append(
                    f"ATOM  {serial:5d}  {atom:<3s} {ONE_TO_THREE[aa]} {cid}{start + i:4d}    "
                    f"{p[0]:8.3f}{p[1]:8.3f}{p[2]:8.3f}  1.00  0.00           {atom[0]}"
                )
                serial += 1
        lines.append("TER")
    lines.append("END")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# tasks


@dataclass
class TaskSpec:
    structure: str
    antibody_chain: str
    cdr_range: tuple  # (start, end) resSeq, 1-based inclusive, file numbering
    antigen_chains: list = field(default_factory=list)
    epitope_cutoff: float | None = None
    mode: str = "conditional"
    name: str = ""

    def __post_init__(self):
        if self.mode not in TASK_MODES:
            raise TaskError(f"unknown mode {self.mode!r}")
        if len(self.cdr_range) != 2:
            raise TaskError("cdr_range must be [start, end]")
        self.cdr_range = (int(self.cdr_range[0]), int(self.cdr_range[1]))
        if self.cdr_range[0] > self.cdr_range[1]:
            raise TaskError(f"empty CDR range {list(self.cdr_range)}")
        if self.epitope_cutoff is not None and self.epitope_cutoff < 0:
            raise TaskError("epitope cutoff must be non-negative")
        self.antigen_chains = list(self.antigen_chains)

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "TaskSpec":
        known = {"structure", "antibody_chain", "cdr_range", "antigen_chains", "epitope_cutoff", "mode", "name"}
        extra = set(d) - known
        if extra:
            raise TaskError(f"unknown task keys: {sorted(extra)}")
        try:
            t = cls(**d)
        except TypeError as exc:
            raise TaskError(str(exc)) from None
        if base is not None and not Path(t.structure).is_absolute():
            t.structure = str(Path(base) / t.structure)
        return t

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cdr_range"] = list(self.cdr_range)
        return d


def load_tasks(path) -> list[TaskSpec]:
    """A task file holds one task object or a list of them; paths resolve against its folder."""
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise TaskError(f"cannot read task file {path}: {exc}") from None
    items = raw if isinstance(raw, list) else [raw]
    return [TaskSpec.from_dict(d, p.parent) for d in items]


@dataclass
class FeaturizedComplex:
    name: str
    cdr_sequence: str
    cdr_coords: np.ndarray  # (m, 3, 3)
    cdr_positions: np.ndarray  # (m,) index along the antibody chain
    left_anchor: np.ndarray  # (3, 3, 3) residues before the CDR, nearest last
    right_flank: np.ndarray  # (3, 3) residue after the CDR
    antigen_sequence: str = ""
    antigen_coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    antigen_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    chain_sequence: str = ""
    chain_coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    cdr_start: int = 0
    mode: str = "conditional"
    provenance: dict = field(default_factory=dict)

    @property
    def framework_sequence(self) -> str:
        return self.chain_sequence[: self.cdr_start]

    @property
    def framework_coords(self) -> np.ndarray:
        return self.chain_coords[: self.cdr_start]

    def to_json(self) -> dict:
        def arr(x):
            return np.asarray(x, dtype=np.float64).tolist()

        return {
            "v": DATASET_VERSION,
            "name": self.name,
            "mode": self.mode,
            "cdr_sequence": self.cdr_sequence,
            "cdr_coords": arr(self.cdr_coords),
            "cdr_positions": [int(i) for i in self.cdr_positions],
            "left_anchor": arr(self.left_anchor),
            "right_flank": arr(self.right_flank),
            "antigen_sequence": self.antigen_sequence,
            "antigen_coords": arr(self.antigen_coords),
            "antigen_positions": [int(i) for i in self.antigen_positions],
            "chain_sequence": self.chain_sequence,
            "chain_coords": arr(self.chain_coords),
            "cdr_start": int(self.cdr_start),
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, d: dict) -> "FeaturizedComplex":
        if d.get("v") != DATASET_VERSION:
            raise DataError(f"dataset version {d.get('v')!r} is not {DATASET_VERSION}")

        def xyz(key, n):
            a = np.asarray(d[key], dtype=np.float64).reshape(-1, 3, 3) if n else np.zeros((0, 3, 3))
            if len(a) != n:
                raise DataError(f"{key}: expected {n} residues, found {len(a)}")
            return a

        try:
            m = len(d["cdr_sequence"])
            n = len(d["antigen_sequence"])
            L = len(d["chain_sequence"])
            return cls(
                name=str(d["name"]),
                mode=str(d["mode"]),
                cdr_sequence=d["cdr_sequence"],
                cdr_coords=xyz("cdr_coords", m),
                cdr_positions=np.asarray(d["cdr_positions"], dtype=np.intp),
                left_anchor=np.asarray(d["left_anchor"], dtype=np.float64).reshape(3, 3, 3),
                right_flank=np.asarray(d["right_flank"], dtype=np.float64).reshape(3, 3),
                antigen_sequence=d["antigen_sequence"],
                antigen_coords=xyz("antigen_coords", n),
                antigen_positions=np.asarray(d["antigen_positions"], dtype=np.intp),
                chain_sequence=d["chain_sequence"],
                chain_coords=xyz("chain_coords", L),
                cdr_start=int(d["cdr_start"]),
                provenance=dict(d.get("provenance", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"schema violation: {exc}") from None


def extract_complex(chains: dict[str, Chain], task: TaskSpec) -> FeaturizedComplex:
    """Cut the CDR, its flanks and the (optionally epitope-filtered) antigen out of parsed chains."""
    if task.antibody_chain not in chains:
        raise TaskError(f"antibody chain {task.antibody_chain!r} not found")
    ab = chains[task.antibody_chain]
    ab = Chain(ab.chain_id, sorted(ab.residues, key=lambda r: r.key))
    lo, hi = task.cdr_range
    nums = [r.resseq for r in ab.residues]
    if not nums or lo < nums[0] or hi > nums[-1]:
        first, last = (nums[0], nums[-1]) if nums else (None, None)
        raise TaskError(f"CDR range [{lo}, {hi}] outside chain {ab.chain_id} residues [{first}, {last}]")
    idx = [i for i, r in enumerate(ab.residues) if lo <= r.resseq <= hi]
    if not idx:
        raise TaskError(f"CDR range [{lo}, {hi}] selects no complete residue")
    start, end = idx[0], idx[-1]
    for a, b in zip(ab.residues[start:end], ab.residues[start + 1 : end + 1]):
        if b.resseq > a.resseq + 1:
            raise TaskError(f"CDR residue missing between {a.resseq} and {b.resseq} (dropped or absent)")
    seq = ab.sequence
    xyz = ab.coords
    if task.mode != "fixed_backbone":
        if start < 1:
            raise TaskError(f"missing left flank before residue {lo}")
        if end + 1 >= len(ab.residues):
            raise TaskError(f"missing right flank after residue {hi}")
    left = _left_anchor(xyz, start)
    right = xyz[end + 1] if end + 1 < len(xyz) else xyz[end]
    ag_seq, ag_xyz, ag_pos = "", np.zeros((0, 3, 3)), np.zeros(0, dtype=np.intp)
    if task.mode == "conditional":
        if not task.antigen_chains:
            raise TaskError("conditional mode needs at least one antigen chain")
        seqs, coords, pos = [], [], []
        offset = 0
        for cid in task.antigen_chains:
            if cid not in chains:
                raise TaskError(f"antigen chain {cid!r} not found")
            c = chains[cid]
            seqs.append(c.sequence)
            coords.append(c.coords)
            # separate chains get a gap so frames never bridge them
            pos.append(offset + np.array([r.resseq for r in c.residues]) - (c.residues[0].resseq if c.residues else 0))
            offset = (pos[-1][-1] + 1000) if len(pos[-1]) else offset
        ag_seq = "".join(seqs)
        ag_xyz = np.concatenate(coords) if coords else np.zeros((0, 3, 3))
        ag_pos = np.concatenate(pos).astype(np.intp) if pos else np.zeros(0, dtype=np.intp)
        if task.epitope_cutoff is not None and len(ag_seq):
            flanks = np.stack([left[2, 1], right[1]])
            d = np.linalg.norm(ag_xyz[:, None, 1] - flanks[None], axis=-1).min(axis=1)
            keep = d <= task.epitope_cutoff
            ag_seq = "".join(a for a, k in zip(ag_seq, keep) if k)
            ag_xyz, ag_pos = ag_xyz[keep], ag_pos[keep]
    return FeaturizedComplex(
        name=task.name or f"{Path(task.structure).stem}_{task.antibody_chain}{lo}-{hi}",
        cdr_sequence=seq[start : end + 1],
        cdr_coords=xyz[start : end + 1].copy(),
        cdr_positions=np.array([r.resseq for r in ab.residues[start : end + 1]], dtype=np.intp),
        left_anchor=left,
        right_flank=right.copy(),
        antigen_sequence=ag_seq,
        antigen_coords=ag_xyz,
        antigen_positions=ag_pos,
        chain_sequence=seq,
        chain_coords=xyz.copy(),
        cdr_start=start,
        mode=task.mode,
        provenance={
            "structure": str(task.structure),
            "antibody_chain": task.antibody_chain,
            "cdr_range": [lo, hi],
            "antigen_chains": list(task.antigen_chains),
            "epitope_cutoff": task.epitope_cutoff,
        },
    )


def _left_anchor(xyz: np.ndarray, start: int) -> np.ndarray:
    """Three residues preceding the CDR, nearest last.

    With fewer than three available, missing seeds are extended backwards along
    the first available residue's track so the reconstruction stays defined.
    """
    if start >= 3:
        return xyz[start - 3 : start].copy()
    if start == 0:
        base = xyz[0] - (xyz[1] - xyz[0]) if len(xyz) > 1 else xyz[0] - np.array([3.8, 0.0, 0.0])
        have = base[None]
    else:
        have = xyz[:start]
    out = list(have)
    bend = np.array([0.0, 1.0, 0.0])
    while len(out) < 3:
        step = out[1] - out[0] if len(out) > 1 else np.tile([3.8, 0.0, 0.0], (3, 1))
        out.insert(0, out[0] - step + bend * (len(out) + 1))
    return np.array(out[-3:])


# ----------------------------------------------------------------------------
# datasets


def write_dataset(path, complexes) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for cx in complexes:
            f.write(json.dumps(cx.to_json(), separators=(",", ":"), allow_nan=False))
            f.write("\n")


def append_dataset(path, complexes) -> None:
    with open(path, "a", encoding="utf-8") as f:
        for cx in complexes:
            f.write(json.dumps(cx.to_json(), separators=(",", ":"), allow_nan=False))
            f.write("\n")


def read_dataset(path) -> list[FeaturizedComplex]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(FeaturizedComplex.from_json(json.loads(line)))
            except (json.JSONDecodeError, DataError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    return out


# ----------------------------------------------------------------------------
# model container: MAGIC, u64 header length, UTF-8 JSON header, little-endian f64 payload


def save_model(path, params: ModelParams, extra: dict | None = None) -> None:
    names = list(params.arrays)
    header = {
        "format": MAGIC.decode(),
        "order": names,
        "shapes": {k: list(params.arrays[k].shape) for k in names},
        "config": params.config.to_dict(),
    }
    header.update(extra or {})
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for k in names:
            f.write(np.ascontiguousarray(params.arrays[k], dtype="<f8").tobytes())


def load_model(path) -> tuple[ModelParams, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFileError(f"cannot read model {path}: {exc}") from None
    if raw[: len(MAGIC)] != MAGIC:
        raise ModelFileError(f"{path}: not an {MAGIC.decode()} model file")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise ModelFileError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise ModelFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
        config = ModelConfig(**header["config"])
        order, shapes = header["order"], header["shapes"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"{path}: bad header: {exc}") from None
    pos += hlen
    expected = param_shapes(config)
    if set(order) != set(expected) or any(tuple(shapes[k]) != tuple(expected[k]) for k in order):
        raise ModelFileError(f"{path}: parameter shapes disagree with the declared config")
    arrays = {}
    for k in order:
        n = int(np.prod(shapes[k]))
        end = pos + 8 * n
        if end > len(raw):
            raise ModelFileError(f"{path}: truncated payload at {k}")
        arrays[k] = np.frombuffer(raw[pos:end], dtype="<f8").astype(np.float64).reshape(shapes[k])
        pos = end
    if pos != len(raw):
        raise ModelFileError(f"{path}: {len(raw) - pos} trailing bytes after payload")
    return ModelParams(config, arrays), header
