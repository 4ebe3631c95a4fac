"""File formats: dataset CSV, CUBE1 image cubes, label maps and model documents.

Numbers are written with ``repr`` so the decimal separator is always ``.``
and floats round-trip exactly. Model documents are JSON with sorted keys;
saving a loaded document reproduces the original bytes.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import polydens, spatial_gmm
from .data import Dataset
from .geometry import Hyperrectangle, Node, PartitionTree, Split

SCHEMA_VERSION = "1"
CUBE_MAGIC = "CUBE1"


class FormatError(ValueError):
    """Malformed input file."""


# ---------------------------------------------------------------------------
# Dataset CSV
# ---------------------------------------------------------------------------

def _num(v) -> str:
    return repr(float(v))


def dataset_to_csv(data: Dataset) -> str:
    """Header ``x1..xd,y1..yd`` (plus ``label`` when labels are known), one row per point."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = [f"x{j + 1}" for j in range(data.d_x)] + [f"y{j + 1}" for j in range(data.d_y)]
    if data.labels is not None:
        head.append("label")
    w.writerow(head)
    for i in range(data.n):
        row = [_num(v) for v in data.X[i]] + [_num(v) for v in data.Y[i]]
        if data.labels is not None:
            row.append(str(int(data.labels[i])))
        w.writerow(row)
    return buf.getvalue()


def dataset_from_csv(text: str) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError("empty dataset file")
    head = [h.strip() for h in rows[0]]
    xs = [i for i, h in enumerate(head) if h.startswith("x")]
    ys = [i for i, h in enumerate(head) if h.startswith("y")]
    lab = [i for i, h in enumerate(head) if h == "label"]
    if not xs or not ys or len(xs) + len(ys) + len(lab) != len(head):
        raise FormatError("header must read x1..xd,y1..yd[,label]")
    if [head[i] for i in xs] != [f"x{j + 1}" for j in range(len(xs))] or \
            [head[i] for i in ys] != [f"y{j + 1}" for j in range(len(ys))]:
        raise FormatError("covariate and response columns must be numbered from 1 in order")
    body = [r for r in rows[1:] if r]
    try:
        M = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(head))
    except ValueError as exc:
        raise FormatError(f"non-numeric or ragged row: {exc}") from None
    labels = M[:, lab[0]].astype(np.int64) if lab else None
    try:
        return Dataset(M[:, xs], M[:, ys], labels)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def read_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix.lower() == ".cube":
        return read_cube(path)
    return dataset_from_csv(path.read_text(encoding="utf-8"))


def write_dataset(path, data: Dataset):
    Path(path).write_text(dataset_to_csv(data), encoding="utf-8")


# ---------------------------------------------------------------------------
# CUBE1 image cubes
# ---------------------------------------------------------------------------

def cube_to_dataset(cube: np.ndarray) -> Dataset:
    """Pixels of a ``(height, width, bands)`` cube as (pixel-centre coordinate, spectrum) pairs.

    ``x1`` is the scaled row coordinate and ``x2`` the column coordinate;
    rows of the dataset follow row-major pixel order.
    """
    h, w, b = cube.shape
    rr, cc = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    X = np.column_stack([rr.ravel(), cc.ravel()])
    return Dataset(X, cube.reshape(h * w, b), grid_shape=(h, w))


def read_cube(path) -> Dataset:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise FormatError("CUBE1 header line missing")
    parts = raw[:end].decode("ascii", errors="replace").split()
    if len(parts) != 4 or parts[0] != CUBE_MAGIC:
        raise FormatError("header must read 'CUBE1 <height> <width> <bands>'")
    try:
        h, w, b = (int(v) for v in parts[1:])
    except ValueError:
        raise FormatError("cube sizes must be integers") from None
    if min(h, w, b) < 1:
        raise FormatError("cube sizes must be positive")
    payload = raw[end + 1:]
    if len(payload) != 8 * h * w * b:
        raise FormatError(f"expected {8 * h * w * b} bytes of samples, found {len(payload)}")
    cube = np.frombuffer(payload, dtype="<f8").reshape(h, w, b)
    try:
        return cube_to_dataset(cube.astype(float))
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def write_cube(path, cube: np.ndarray):
    cube = np.asarray(cube, dtype="<f8")
    h, w, b = cube.shape
    Path(path).write_bytes(f"{CUBE_MAGIC} {h} {w} {b}\n".encode("ascii") + cube.tobytes())


# ---------------------------------------------------------------------------
# Label maps
# ---------------------------------------------------------------------------

def labels_to_csv(labels: np.ndarray, grid_shape: tuple | None = None) -> str:
    """``row,col,label`` rows for image data, otherwise one ``label`` per point in input order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    labels = np.asarray(labels, dtype=np.int64)
    if grid_shape is not None:
        h, wd = grid_shape
        w.writerow(["row", "col", "label"])
        for i, lab in enumerate(labels):
            w.writerow([i // wd, i % wd, int(lab)])
    else:
        w.writerow(["label"])
        for lab in labels:
            w.writerow([int(lab)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Model documents
# ---------------------------------------------------------------------------

def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def node_to_dict(node: Node) -> dict:
    if node.is_leaf:
        return {}
    out = {"split": node.split.kind, "children": [node_to_dict(c) for c in node.children]}
    if node.split.kind == "axis":
        out["axis"] = int(node.split.axis)
        out["position"] = float(node.split.position)
    elif node.split.kind == "flat":
        out["cells"] = [[list(c.cell.lower), list(c.cell.upper)] for c in node.children]
    return out


def node_from_dict(doc: dict, cell: Hyperrectangle) -> Node:
    if not doc:
        return Node(cell)
    kind = doc["split"]
    if kind == "flat":
        cells = [Hyperrectangle(tuple(lo), tuple(hi)) for lo, hi in doc["cells"]]
        split = Split("flat")
    else:
        split = Split(kind, doc.get("axis"), doc.get("position"))
        cells = split.children(cell)
    if len(cells) != len(doc["children"]):
        raise FormatError("child count does not match the split")
    return Node(cell, split, tuple(node_from_dict(c, k) for c, k in zip(doc["children"], cells)))


def tree_to_dict(tree: PartitionTree) -> dict:
    return {"kind": tree.kind.value, "n": tree.n, "d": tree.dim, "root": node_to_dict(tree.root)}


def tree_from_dict(doc: dict) -> PartitionTree:
    return PartitionTree(doc["kind"], node_from_dict(doc["root"], Hyperrectangle.unit(int(doc["d"]))), int(doc["n"]))


def _mode_to_json(mode):
    if isinstance(mode, spatial_gmm.Known):
        v = mode.value
        return {"known": "neutral" if isinstance(v, spatial_gmm._Neutral) else _floats(v)}
    return mode


def _mode_from_json(doc, neutral):
    if isinstance(doc, dict):
        v = doc["known"]
        return spatial_gmm.Known(neutral if v == "neutral" else np.asarray(v, dtype=float))
    return doc


_NEUTRALS = {
    "mean_mode": spatial_gmm._NeutralMean(),
    "volume_mode": 1.0,
    "basis_mode": spatial_gmm._NeutralBasis(),
    "shape_mode": spatial_gmm._NeutralShape(),
}
_BOUNDS = ("a", "L_minus", "L_plus", "lambda_minus", "lambda_plus")


def spec_to_dict(spec: spatial_gmm.CovarianceSpec) -> dict:
    out = {k: _mode_to_json(getattr(spec, k)) for k in _NEUTRALS}
    out.update({k: float(getattr(spec, k)) for k in _BOUNDS})
    out["enforce_bounds"] = bool(spec.enforce_bounds)
    return out


def spec_from_dict(doc: dict) -> spatial_gmm.CovarianceSpec:
    kw = {k: _mode_from_json(doc[k], neutral) for k, neutral in _NEUTRALS.items()}
    if isinstance(kw["volume_mode"], spatial_gmm.Known) and isinstance(kw["volume_mode"].value, np.ndarray) \
            and kw["volume_mode"].value.ndim == 0:
        kw["volume_mode"] = spatial_gmm.Known(float(kw["volume_mode"].value))
    kw.update({k: float(doc[k]) for k in _BOUNDS})
    kw["enforce_bounds"] = bool(doc["enforce_bounds"])
    return spatial_gmm.CovarianceSpec(**kw)


def _comp_to_dict(c: spatial_gmm.GaussianComponent) -> dict:
    return {"mu": _floats(c.mu), "L": float(c.L), "D": _floats(c.D), "A": _floats(c.A)}


def _comp_from_dict(doc: dict) -> spatial_gmm.GaussianComponent:
    return spatial_gmm.GaussianComponent(np.asarray(doc["mu"], dtype=float), float(doc["L"]),
                                         np.asarray(doc["D"], dtype=float), np.asarray(doc["A"], dtype=float))


def model_to_dict(model, meta: dict | None = None) -> dict:
    """The model document of a fitted model; ``meta`` holds fit metadata (n, loglik, penalty, score, seed)."""
    if isinstance(model, polydens.PolyModel):
        payload = {
            "x_tree": tree_to_dict(model.x_tree),
            "y_trees": [tree_to_dict(t) for t in model.y_trees],
            "degree": list(model.degree),
            "cells": [[{"coeffs": _floats(c.coeffs), "weight": float(c.weight), "count": int(c.count),
                        "loglik": float(c.loglik)} for c in row] for row in model.cells],
            "loglik": float(model.loglik),
        }
        kind = "piecewise_poly"
    elif isinstance(model, spatial_gmm.SpatialGmm):
        payload = {
            "x_tree": tree_to_dict(model.x_tree),
            "components": [_comp_to_dict(c) for c in model.components],
            "proportions": _floats(model.proportions),
            "spec": spec_to_dict(model.spec),
            "E_indices": [int(j) for j in model.E_indices],
            "perp": None if model.perp is None else _comp_to_dict(model.perp),
            "perp_spec": spec_to_dict(model.perp_spec),
            "d_y": int(model.d_y),
            "loglik": float(model.loglik),
        }
        kind = "spatial_gmm"
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")
    clean = {}
    for k, v in (meta or {}).items():
        clean[k] = float(v) if isinstance(v, (float, np.floating)) else (int(v) if isinstance(v, (np.integer,)) else v)
    return {"schema_version": SCHEMA_VERSION, "kind": kind, "identifier": model.identifier, "model": payload,
            "meta": clean}


def model_from_dict(doc: dict) -> tuple:
    """``(model, meta)`` from a model document."""
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {doc.get('schema_version')!r}")
    p = doc["model"]
    try:
        if doc["kind"] == "piecewise_poly":
            cells = tuple(tuple(polydens.CellPoly(np.asarray(c["coeffs"], dtype=float), float(c["weight"]),
                                                  int(c["count"]), float(c["loglik"])) for c in row)
                          for row in p["cells"])
            model = polydens.PolyModel(tree_from_dict(p["x_tree"]), tuple(tree_from_dict(t) for t in p["y_trees"]),
                                       cells, tuple(int(v) for v in p["degree"]), float(p["loglik"]))
        elif doc["kind"] == "spatial_gmm":
            model = spatial_gmm.SpatialGmm(
                tree_from_dict(p["x_tree"]),
                tuple(_comp_from_dict(c) for c in p["components"]),
                np.asarray(p["proportions"], dtype=float),
                spec_from_dict(p["spec"]),
                tuple(int(j) for j in p["E_indices"]),
                None if p["perp"] is None else _comp_from_dict(p["perp"]),
                spec_from_dict(p["perp_spec"]),
                int(p["d_y"]),
                float(p["loglik"]),
            )
        else:
            raise FormatError(f"unknown model kind {doc['kind']!r}")
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed model document: {exc}") from None
    return model, dict(doc.get("meta", {}))


def dumps_model(model, meta: dict | None = None) -> str:
    return json.dumps(model_to_dict(model, meta), sort_keys=True, indent=1, allow_nan=True) + "\n"


def loads_model(text: str) -> tuple:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"model document is not valid JSON: {exc}") from None
    return model_from_dict(doc)


def save_model(path, model, meta: dict | None = None):
    Path(path).write_text(dumps_model(model, meta), encoding="utf-8")


def load_model(path) -> tuple:
    return loads_model(Path(path).read_text(encoding="utf-8"))
