"""Reading and writing synthetic datasets.

Layout::

    <root>/dataset.json            list of sequence directories + generator config
    <root>/seq_000/manifest.json   calibration, modality, per-frame pose/file/descriptor
    <root>/seq_000/gt.json         hidden alignment h, scale lambda, gt poses, shape
    <root>/seq_000/frame_000.dmap  observed depth

All JSON is written with sorted keys and every float in its shortest exact
form, so equal inputs give byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Calibration, RigidPose
from .io import FormatError, atomic_write_json, read_dmap, write_dmap
from .synth import Frame, InstanceShape, Sequence

SCHEMA_VERSION = 1


def sequence_dirname(seq_id: int) -> str:
    return f"seq_{seq_id:03d}"


def write_sequence(root, seq: Sequence, sources: Optional[list] = None) -> str:
    """Write one sequence; ``sources`` optionally names the source frame of each frame."""
    root = Path(root)
    name = sequence_dirname(seq.id)
    d = root / name
    d.mkdir(parents=True, exist_ok=True)
    calib = seq.frames[0].calibration
    frames = []
    for j, f in enumerate(seq.frames):
        fname = f"frame_{j:03d}.dmap"
        write_dmap(d / fname, f.depth)
        frames.append({
            "index": int(f.index),
            "pose": f.observed_pose.to_json(),
            "depth": fname,
            "descriptor": [float(x) for x in f.descriptor],
        })
        if sources is not None:
            frames[-1]["source"] = int(sources[j])
    manifest = {
        "schema": SCHEMA_VERSION,
        "id": int(seq.id),
        "modality": seq.modality,
        "augmented": bool(seq.augmented),
        "calibration": calib.to_json(),
        "frames": frames,
    }
    gt = {
        "schema": SCHEMA_VERSION,
        "h": seq.gt_alignment.to_json(),
        "lambda": float(seq.gt_scale),
        "shape": seq.shape.to_json() if seq.shape is not None else None,
        "gt_poses": [f.gt_global_pose.to_json() for f in seq.frames],
    }
    atomic_write_json(d / "manifest.json", manifest)
    atomic_write_json(d / "gt.json", gt)
    return name


def write_dataset(root, sequences: list, meta: Optional[dict] = None, sources: Optional[list] = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sources = sources or [None] * len(sequences)
    names = [write_sequence(root, s, src) for s, src in zip(sequences, sources)]
    atomic_write_json(root / "dataset.json", {"schema": SCHEMA_VERSION, "sequences": names, "meta": meta or {}})
    return root


def _load_json(path: Path) -> dict:
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if obj.get("schema") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported schema {obj.get('schema')!r}")
    return obj


def read_sequence(d) -> Sequence:
    d = Path(d)
    man = _load_json(d / "manifest.json")
    gt_path = d / "gt.json"
    gt = _load_json(gt_path) if gt_path.exists() else None
    calib = Calibration.from_json(man["calibration"])
    frames = []
    for j, fr in enumerate(man["frames"]):
        g = RigidPose.from_json(fr["pose"])
        g_gt = RigidPose.from_json(gt["gt_poses"][j]) if gt else g
        dm = read_dmap(d / fr["depth"])
        if dm.width != calib.width or dm.height != calib.height:
            raise FormatError(f"{d / fr['depth']}: size does not match calibration")
        frames.append(Frame(int(fr["index"]), calib, g, g_gt, dm, np.asarray(fr["descriptor"], dtype=np.float64)))
    shape = InstanceShape.from_json(gt["shape"]) if gt and gt.get("shape") else None
    return Sequence(
        int(man["id"]),
        frames,
        RigidPose.from_json(gt["h"]) if gt else RigidPose.identity(),
        float(gt["lambda"]) if gt else 1.0,
        man["modality"],
        shape,
        bool(man.get("augmented", False)),
    )


def read_dataset(root):
    """Returns ``(sequences, meta)``."""
    root = Path(root)
    index = root / "dataset.json"
    if not index.exists():
        raise FileNotFoundError(f"no dataset.json under {root}")
    obj = _load_json(index)
    return [read_sequence(root / name) for name in obj["sequences"]], obj.get("meta", {})
