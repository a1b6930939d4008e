"""File formats: cohort manifests, CSV tables, JSON reports and checkpoints.

Every writer goes through :func:`atomic_write`, which writes a temporary file
in the target directory and renames it into place, so an interrupted run
leaves either the previous file or a complete new one.

Checkpoints are zip archives with stored (uncompressed) members, fixed
timestamps and a fixed member order, so identical states give identical
bytes. The layout is documented in ``docs/checkpoint.md``.
"""
import csv
import io
import json
import math
import os
import tempfile
import zipfile
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import List, Optional

import numpy as np

from .connectome import RawSubject, Subject, WindowSpec
from .dictionary import CoefficientTrack, ConstraintState, HyperParams
from .exceptions import ContractViolation
from .optimizer import TrainState
from .predictor import AdamState, PredictorParams

__all__ = [
    "atomic_write",
    "read_matrix_csv",
    "matrix_csv",
    "read_scores_csv",
    "scores_csv",
    "rows_csv",
    "Cohort",
    "load_manifest",
    "write_cohort",
    "checkpoint_bytes",
    "save_checkpoint",
    "load_checkpoint",
    "save_ground_truth",
    "load_ground_truth",
    "to_json",
    "load_schema",
    "CHECKPOINT_FORMAT",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_FORMAT = "srddl-checkpoint"
CHECKPOINT_VERSION = 1
TRUTH_FORMAT = "srddl-ground-truth"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _clean(value):
    """JSON-ready copy: arrays to lists, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def to_json(obj):
    """Deterministic JSON text (sorted keys, NaN as null, trailing newline)."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def load_schema(name):
    """One of the bundled JSON schemas: ``"metric_report"`` or ``"prediction"``."""
    text = resources.files("srddl").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


# ---------------------------------------------------------------- CSV tables

def read_matrix_csv(path, header=False):
    """Numeric CSV as a 2-D array; ``header=True`` skips the first row."""
    m = np.loadtxt(path, delimiter=",", skiprows=1 if header else 0, ndmin=2)
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{path}: non-finite entries")
    return m


def matrix_csv(m, fmt="%.17g"):
    buf = io.StringIO()
    np.savetxt(buf, np.asarray(m, dtype=float), delimiter=",", fmt=fmt)
    return buf.getvalue()


def read_scores_csv(path):
    """Score table with columns ``subject_id, score_1..score_M``.

    Empty cells become NaN (missing). Returns ``(subject_ids, scores)``.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["subject_id"] or len(rows[0]) < 2:
        raise ValueError(f"{path}: header must be subject_id, score_1, ...")
    m = len(rows[0]) - 1
    ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != m + 1:
            raise ValueError(f"{path}:{lineno}: expected {m + 1} fields, got {len(row)}")
        ids.append(row[0])
        try:
            values.append([float(v) if v.strip() else np.nan for v in row[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate subject ids")
    return ids, np.array(values, dtype=float).reshape(len(ids), m)


def scores_csv(subject_ids, scores, names=None):
    scores = np.asarray(scores, dtype=float)
    names = names or [f"score_{j + 1}" for j in range(scores.shape[1])]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subject_id", *names])
    for sid, row in zip(subject_ids, scores):
        writer.writerow([sid, *("" if not np.isfinite(v) else repr(float(v)) for v in row)])
    return buf.getvalue()


def rows_csv(rows):
    """CSV text for a list of flat dicts sharing their keys."""
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                             for k, v in row.items()})
    return buf.getvalue()


# ------------------------------------------------------------------ manifests

@dataclass
class Cohort:
    """Subjects and scores loaded from a manifest.

    ``raw`` is set when the manifest lists time series, so the cohort can be
    re-windowed; ``scores`` is None when the manifest names no score table.
    """

    subjects: List[Subject]
    scores: Optional[np.ndarray]
    window: Optional[WindowSpec]
    raw: Optional[List[RawSubject]] = None
    residualize: bool = True

    @property
    def subject_ids(self):
        return [s.subject_id for s in self.subjects]


def load_manifest(path, window=None):
    """Load a cohort manifest (JSON).

    Layout::

        {"window": {"window_length": 45, "stride": 5},
         "residualize": true,
         "timeseries_header": false,
         "scores": "scores.csv",
         "subjects": [{"subject_id": "s01", "timeseries": "ts/s01.csv",
                       "adjacency": "adj/s01.csv"},
                      {"subject_id": "s02", "correlations": "gamma/s02.npy"}]}

    Each subject gives either ``timeseries`` (CSV, regions by samples) or
    ``correlations`` (``.npy`` of shape (T, P, P)); ``adjacency`` is optional.
    Relative paths are resolved against the manifest directory. ``window``
    overrides the manifest's window.
    """
    path = Path(path)
    with open(path) as fh:
        spec = json.load(fh)
    base = path.parent
    entries = spec.get("subjects")
    if not entries:
        raise ValueError(f"{path}: manifest lists no subjects")
    if window is None and spec.get("window") is not None:
        window = WindowSpec(int(spec["window"]["window_length"]), int(spec["window"]["stride"]))
    residualize = bool(spec.get("residualize", True))
    header = bool(spec.get("timeseries_header", False))

    subjects, raw = [], []
    for entry in entries:
        sid = str(entry["subject_id"])
        adj = read_matrix_csv(base / entry["adjacency"]) if entry.get("adjacency") else None
        if "timeseries" in entry:
            if window is None:
                raise ValueError(f"{path}: time-series subjects need a window")
            r = RawSubject(sid, read_matrix_csv(base / entry["timeseries"], header), adj)
            raw.append(r)
            subjects.append(r.to_subject(window, residualize))
        elif "correlations" in entry:
            subjects.append(Subject(sid, np.load(base / entry["correlations"]), adjacency=adj))
        else:
            raise ValueError(f"{path}: subject {sid} has neither timeseries nor correlations")

    scores = None
    if spec.get("scores"):
        ids, table = read_scores_csv(base / spec["scores"])
        lookup = dict(zip(ids, table))
        missing = [s.subject_id for s in subjects if s.subject_id not in lookup]
        if missing:
            raise ValueError(f"{path}: no scores for subjects {missing[:5]}")
        scores = np.stack([lookup[s.subject_id] for s in subjects])
    return Cohort(subjects, scores, window, raw if len(raw) == len(subjects) else None,
                  residualize)


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def write_cohort(directory, subjects, scores=None, window=None):
    """Write subjects as ``.npy`` correlation stacks plus adjacency CSVs and a manifest."""
    directory = Path(directory)
    entries = []
    for s in subjects:
        entry = {"subject_id": s.subject_id, "correlations": f"correlations/{s.subject_id}.npy"}
        atomic_write(directory / entry["correlations"], _npy_bytes(s.gammas))
        if s.adjacency is not None:
            entry["adjacency"] = f"adjacency/{s.subject_id}.csv"
            atomic_write(directory / entry["adjacency"], matrix_csv(s.adjacency, fmt="%d"))
        entries.append(entry)
    manifest = {"subjects": entries, "residualize": False}
    if window is not None:
        manifest["window"] = {"window_length": window.window_length, "stride": window.stride}
    if scores is not None:
        manifest["scores"] = "scores.csv"
        atomic_write(directory / "scores.csv", scores_csv([s.subject_id for s in subjects],
                                                          scores))
    atomic_write(directory / "manifest.json", to_json(manifest))
    return directory / "manifest.json"


# ---------------------------------------------------------------- archives

def _zip_bytes(members):
    """Deterministic zip of ``(name, bytes)`` pairs in the given order."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in members:
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_STORED
            info.external_attr = 0o644 << 16
            info.create_system = 3
            zf.writestr(info, data)
    return buf.getvalue()


def _read_archive(path, fmt):
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise ContractViolation(f"{path}: not a valid archive ({exc})") from None
    with zf:
        names = zf.namelist()
        if not names or names[0] != "header.json":
            raise ContractViolation(f"{path}: archive must start with header.json")
        header = json.loads(zf.read("header.json"))
        if header.get("format") != fmt:
            raise ContractViolation(f"{path}: format {header.get('format')!r}, expected {fmt!r}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ContractViolation(f"{path}: unsupported version {header.get('version')!r}")
        arrays = {}
        for name in names[1:]:
            if name.endswith(".npy"):
                arrays[name] = np.lib.format.read_array(io.BytesIO(zf.read(name)),
                                                        allow_pickle=False)
    return header, arrays


def _archive(header, arrays):
    header = dict(header, arrays=[name for name, _ in arrays])
    members = [("header.json", to_json(header).encode())]
    members += [(name, _npy_bytes(arr)) for name, arr in arrays]
    return _zip_bytes(members)


def checkpoint_bytes(state):
    """Serialized checkpoint archive of a TrainState."""
    n = len(state.tracks)
    arrays = [("arrays/basis.npy", state.b)]
    arrays += [(f"arrays/c_hat/{i:05d}.npy", t.c_hat) for i, t in enumerate(state.tracks)]
    arrays += [(f"arrays/d/{i:05d}.npy", d) for i, d in enumerate(state.constraints.d)]
    arrays += [(f"arrays/lam/{i:05d}.npy", lam) for i, lam in enumerate(state.constraints.lam)]
    if state.params is not None:
        arrays.append(("arrays/theta.npy", state.params.vector))
    if state.net_adam is not None:
        arrays += [("arrays/adam_m.npy", state.net_adam.m), ("arrays/adam_v.npy", state.net_adam.v)]
    if state.consensus_adjacency is not None:
        arrays.append(("arrays/consensus_adjacency.npy", state.consensus_adjacency))
    adam = state.net_adam
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": state.variant,
        "seed": int(state.seed),
        "hyperparameters": state.hp.to_dict(),
        "iteration": state.iteration,
        "stopped_early": state.stopped_early,
        "subject_ids": [t.subject_id for t in state.tracks],
        "n_subjects": n,
        "n_constraints": len(state.constraints.d),
        "predictor": state.params.config() if state.params is not None else None,
        "adam": None if adam is None else {"step": adam.step, "beta1": adam.beta1,
                                           "beta2": adam.beta2, "eps": adam.eps},
        "history": state.history,
        "residuals": state.residuals,
        "net_losses": state.net_losses,
        "init_objective": state.init_objective,
    }
    return _archive(header, arrays)


def save_checkpoint(path, state):
    return atomic_write(path, checkpoint_bytes(state))


def load_checkpoint(path):
    """Rebuild the TrainState stored by :func:`save_checkpoint`."""
    header, arrays = _read_archive(path, CHECKPOINT_FORMAT)
    try:
        n = header["n_subjects"]
        n_con = header["n_constraints"]
        tracks = [CoefficientTrack(sid, arrays[f"arrays/c_hat/{i:05d}.npy"])
                  for i, sid in enumerate(header["subject_ids"])]
        cons = ConstraintState(d=[arrays[f"arrays/d/{i:05d}.npy"] for i in range(n_con)],
                               lam=[arrays[f"arrays/lam/{i:05d}.npy"] for i in range(n_con)])
        params = None
        if header["predictor"] is not None:
            params = PredictorParams(vector=arrays["arrays/theta.npy"], **header["predictor"])
        adam = None
        if header["adam"] is not None:
            adam = AdamState(arrays["arrays/adam_m.npy"], arrays["arrays/adam_v.npy"],
                             **header["adam"])
        state = TrainState(variant=header["variant"],
                           hp=HyperParams.from_dict(header["hyperparameters"]),
                           seed=header["seed"], b=arrays["arrays/basis.npy"], tracks=tracks,
                           constraints=cons, params=params, net_adam=adam,
                           iteration=header["iteration"], history=header["history"],
                           residuals=header["residuals"], net_losses=header["net_losses"],
                           init_objective=header["init_objective"],
                           stopped_early=header["stopped_early"],
                           consensus_adjacency=arrays.get("arrays/consensus_adjacency.npy"))
    except KeyError as exc:
        raise ContractViolation(f"{path}: checkpoint is missing {exc}") from None
    if len(tracks) != n:
        raise ContractViolation(f"{path}: {len(tracks)} tracks for {n} subjects")
    return state


def save_ground_truth(path, truth, config):
    """Archive of the generator's hidden variables (same container as checkpoints)."""
    arrays = [("arrays/basis.npy", truth.b), ("arrays/theta.npy", truth.theta.vector),
              ("arrays/scores.npy", truth.scores), ("arrays/clean_scores.npy", truth.clean_scores)]
    arrays += [(f"arrays/coeffs/{i:05d}.npy", c) for i, c in enumerate(truth.coeffs)]
    arrays += [(f"arrays/laplacian/{i:05d}.npy", g.laplacian) for i, g in enumerate(truth.graphs)]
    header = {"format": TRUTH_FORMAT, "version": CHECKPOINT_VERSION, "config": config,
              "predictor": truth.theta.config(), "n_subjects": len(truth.coeffs)}
    return atomic_write(path, _archive(header, arrays))


def load_ground_truth(path):
    """``(header, arrays)`` of a ground-truth archive."""
    return _read_archive(path, TRUTH_FORMAT)
