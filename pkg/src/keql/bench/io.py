"""Dataset and model files: JSON for structure, ``.npz`` for ground-truth
arrays, CSV for tables. Writes go through a temporary file and a rename."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from ..operators import SolutionModel
from ..twostep import ObservationSet

__all__ = ["atomic_write", "write_json", "write_csv", "save_dataset", "load_dataset", "fmt"]


def fmt(x) -> str:
    """Locale-independent round-trip formatting of a number."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def atomic_write(path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    atomic_write(path, buf.getvalue())


def _truth_arrays(truth: dict) -> dict:
    return {k: np.asarray(v) for k, v in truth.items() if not k.endswith("_functions")}


def save_dataset(ds, path) -> None:
    """Write ``dataset.json`` and ``truth.npz`` into directory ``path``."""
    path = Path(path)
    meta = {
        "experiment": ds.experiment,
        "seed": ds.seed,
        "config": ds.config,
        "Y": ds.Y.tolist(),
        "test_points": ds.test_points.tolist(),
        "observations": [
            {
                "points": o.points.tolist(),
                "values": o.values.tolist(),
                "n_boundary": o.n_boundary,
                "rhs_Y": o.rhs_on(ds.Y).tolist(),
            }
            for o in ds.observations
        ],
        "functions": {
            k[: -len("_functions")]: [fn.model.to_dict() for fn in v]
            for k, v in ds.truth.items()
            if k.endswith("_functions")
        },
    }
    write_json(path / "dataset.json", meta)
    buf = io.BytesIO()
    np.savez(buf, **_truth_arrays(ds.truth))
    atomic_write(path / "truth.npz", buf.getvalue())


def load_dataset(path):
    """Inverse of :func:`save_dataset`; right-hand sides are rebuilt as callables."""
    from .datasets import Dataset, DarcyFunction, duffing_forcing

    path = Path(path)
    meta = json.loads((path / "dataset.json").read_text())
    with np.load(path / "truth.npz") as z:
        truth = {k: z[k] for k in z.files}
    functions = {
        split: [DarcyFunction(SolutionModel.from_dict(d)) for d in fns] for split, fns in meta.get("functions", {}).items()
    }
    for split, fns in functions.items():
        truth[f"{split}_functions"] = fns
    exp = meta["experiment"]
    observations = []
    for m, o in enumerate(meta["observations"]):
        if exp == "duffing":
            rhs = lambda P: duffing_forcing(np.asarray(P)[:, 0])
        elif exp == "burgers":
            rhs = lambda P: np.zeros(len(P))
        else:
            rhs = functions["train"][m].rhs
        observations.append(ObservationSet(np.asarray(o["points"]), np.asarray(o["values"]), rhs, o["n_boundary"]))
    return Dataset(
        exp,
        meta["seed"],
        meta["config"],
        np.asarray(meta["Y"], dtype=float),
        observations,
        np.asarray(meta["test_points"], dtype=float),
        truth,
    )
