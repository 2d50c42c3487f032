"""Serialization: model files, PLY point clouds, match-graph dumps.

Model file (line oriented, whitespace separated):

    MSFM-MODEL 1
    STAGE <tag>
    CAM <image_id> <f> <cx> <cy> <r11 .. r33 row-major> <t1 t2 t3>
    PT <x> <y> <z> <track_len> <image_id> <feature_id> ...

Floats are written with repr precision so a rewrite of an unchanged model is
byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError, MsfmError
from .matching import Edge, Match, MatchGraph
from .geometry import TwoViewGeometry
from .model import Camera, FeatureRef, Model, make_intrinsics

MODEL_MAGIC = "MSFM-MODEL 1"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_model(model: Model, path) -> None:
    lines = [MODEL_MAGIC]
    if model.stage_tag:
        lines.append(f"STAGE {model.stage_tag}")
    for image_id in model.image_ids():
        cam = model.cameras[image_id]
        parts = ["CAM", str(image_id), _fmt(cam.K[0, 0]), _fmt(cam.K[0, 2]), _fmt(cam.K[1, 2])]
        parts += [_fmt(v) for v in cam.R.reshape(-1)]
        parts += [_fmt(v) for v in cam.t]
        lines.append(" ".join(parts))
    for pid in model.point_ids():
        point = model.points[pid]
        parts = ["PT"] + [_fmt(v) for v in point.position] + [str(len(point.track))]
        for image_id in sorted(point.track):
            parts += [str(image_id), str(point.track[image_id])]
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def read_model(path) -> Model:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != MODEL_MAGIC:
        raise FormatError(f"{path}: missing '{MODEL_MAGIC}' header")
    model = Model()
    for lineno, line in enumerate(text[1:], start=2):
        fields = line.split()
        if not fields:
            continue
        kind = fields[0]
        try:
            if kind == "STAGE":
                model.stage_tag = fields[1] if len(fields) > 1 else ""
            elif kind == "CAM":
                image_id = int(fields[1])
                f, cx, cy = (float(v) for v in fields[2:5])
                R = np.array([float(v) for v in fields[5:14]]).reshape(3, 3)
                t = np.array([float(v) for v in fields[14:17]])
                model.attach_camera(Camera(K=make_intrinsics(f, cx, cy), R=R, t=t,
                                           image_id=image_id))
            elif kind == "PT":
                pos = np.array([float(v) for v in fields[1:4]])
                n = int(fields[4])
                refs = []
                for k in range(n):
                    refs.append(FeatureRef(int(fields[5 + 2 * k]), int(fields[6 + 2 * k])))
                model.add_point(pos, refs)
            else:
                raise FormatError(f"{path}:{lineno}: unknown record '{kind}'")
        except FormatError:
            raise
        except (ValueError, IndexError, MsfmError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return model


def write_ply(model: Model, path, color=(128, 128, 128)) -> None:
    """ASCII PLY point cloud of the model's points."""
    pids = model.point_ids()
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pids)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    r, g, b = color
    for pid in pids:
        x, y, z = model.points[pid].position
        lines.append(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_matchgraph(graph: MatchGraph, path) -> None:
    lines = ["MSFM-GRAPH 1"]
    for (a, b) in sorted(graph.edges):
        edge = graph.edges[(a, b)]
        mask = edge.inlier_mask
        n_inl = int(mask.sum()) if mask is not None else len(edge.matches)
        lines.append(f"EDGE {a} {b} {len(edge.matches)} {n_inl}")
        if edge.geometry is not None:
            lines.append("F " + " ".join(_fmt(v) for v in edge.geometry.F.reshape(-1)))
        for i, m in enumerate(edge.matches):
            flag = 1 if mask is None or mask[i] else 0
            lines.append(
                f"{m.query.feature_id} {m.target.feature_id} "
                f"{_fmt(m.distance)} {_fmt(m.ratio)} {flag}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


def read_matchgraph(path) -> MatchGraph:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "MSFM-GRAPH 1":
        raise FormatError(f"{path}: missing 'MSFM-GRAPH 1' header")
    graph = MatchGraph()
    i = 1
    while i < len(text):
        fields = text[i].split()
        i += 1
        if not fields:
            continue
        if fields[0] != "EDGE":
            raise FormatError(f"{path}:{i}: expected EDGE record")
        a, b, n_matches, _ = (int(v) for v in fields[1:5])
        geometry = None
        if i < len(text) and text[i].startswith("F "):
            F = np.array([float(v) for v in text[i].split()[1:]]).reshape(3, 3)
            geometry = TwoViewGeometry(F=F)
            i += 1
        matches = []
        mask = np.zeros(n_matches, dtype=bool)
        for k in range(n_matches):
            qf, tf, dist, ratio, flag = text[i].split()
            i += 1
            matches.append(Match(
                query=FeatureRef(a, int(qf)), target=FeatureRef(b, int(tf)),
                distance=float(dist), ratio=float(ratio),
            ))
            mask[k] = flag == "1"
        if geometry is not None:
            geometry.inlier_count = int(mask.sum())
        graph.edges[(a, b)] = Edge(matches=matches, geometry=geometry, inlier_mask=mask)
    return graph
