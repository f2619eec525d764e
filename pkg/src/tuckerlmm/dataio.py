"""Dataset manifests, region masks, and ground-truth directories.

Manifest format: UTF-8 CSV with header `subject_id,group,time,tensor_path`;
tensor_path is relative to the manifest's directory and points at an LTF1
file holding one (d1,d2,d3) observation.  Observation times greater than 1
anywhere trigger a rescale of all times by the maximum observed time.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import LongitudinalDataset, Subject
from .simulate import GroundTruth
from .config import SimulationSpec, _from_dict
from .tensor import read_ltf, write_ltf

MANIFEST_HEADER = ["subject_id", "group", "time", "tensor_path"]


def save_dataset(data: LongitudinalDataset, out_dir) -> Path:
    """Write one LTF1 file per observation plus manifest.csv; returns its path."""
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in data.subjects:
        for j, t in enumerate(s.times):
            rel = f"tensors/{s.subject_id}_v{j:02d}.ltf"
            write_ltf(out / rel, s.observations[j])
            rows.append([s.subject_id, str(s.group), repr(float(t)), rel])
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    meta = {"dims": list(data.dims), "n_groups": data.n_groups}
    with open(out / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh)
    if data.mask is not None:
        write_ltf(out / "mask.ltf", data.mask.astype(np.int64), integer=True)
    return manifest


def load_dataset(manifest_path) -> LongitudinalDataset:
    """Read a manifest back into a validated dataset."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    try:
        with open(manifest_path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if not rows or rows[0] != MANIFEST_HEADER:
        raise DataError(f"{manifest_path}: expected header {','.join(MANIFEST_HEADER)}")
    records = []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise DataError(f"{manifest_path} row {ln}: expected 4 columns")
        sid, group_s, time_s, rel = row
        try:
            group = int(group_s)
            t = float(time_s)
        except ValueError as exc:
            raise DataError(f"{manifest_path} row {ln}: bad group/time: {exc}") from exc
        path = base / rel
        if not path.exists():
            raise DataError(f"{manifest_path} row {ln}: missing tensor file {rel}")
        try:
            vol = read_ltf(path)
        except DataError as exc:
            raise DataError(f"{manifest_path} row {ln}: {exc}") from exc
        if not np.all(np.isfinite(vol)):
            raise DataError(f"{manifest_path} row {ln}: non-finite values in {rel}")
        records.append((sid, group, t, vol, ln))

    dims = None
    meta_path = base / "dataset.json"
    n_groups = None
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        dims = tuple(meta["dims"])
        n_groups = meta.get("n_groups")
    for sid, group, t, vol, ln in records:
        if dims is None:
            dims = vol.shape
        if vol.shape != dims:
            raise DataError(
                f"{manifest_path} row {ln}: tensor dims {vol.shape} != {dims}")
    times = np.array([t for _, _, t, _, _ in records])
    if times.size and times.max() > 1.0:
        times = times / times.max()
    by_subject = {}
    order = []
    for j, (sid, group, _, vol, ln) in enumerate(records):
        if sid not in by_subject:
            by_subject[sid] = {"group": group, "times": [], "vols": [], "lines": []}
            order.append(sid)
        rec = by_subject[sid]
        if rec["group"] != group:
            raise DataError(f"{manifest_path} row {ln}: subject {sid} changes group")
        rec["times"].append(times[j])
        rec["vols"].append(vol)
        rec["lines"].append(ln)
    subjects = []
    for sid in order:
        rec = by_subject[sid]
        t = np.asarray(rec["times"])
        srt = np.argsort(t)
        t = t[srt]
        if np.any(np.diff(t) <= 0.0):
            raise DataError(f"subject {sid}: duplicate observation times")
        vols = np.stack([rec["vols"][k] for k in srt])
        subjects.append(Subject(subject_id=sid, group=rec["group"],
                                times=t, observations=vols))
    if n_groups is None:
        n_groups = max(s.group for s in subjects)
    mask = None
    mask_path = base / "mask.ltf"
    if mask_path.exists():
        mask = read_ltf(mask_path, integer=True).astype(bool)
    return LongitudinalDataset(subjects=subjects, dims=dims,
                               n_groups=n_groups, mask=mask)


# ---------------------------------------------------------------------------
# Region masks: integer label volume (LTI1) plus an id -> name table.
# ---------------------------------------------------------------------------


@dataclass
class RegionMask:
    labels: np.ndarray    # integer volume (d1, d2, d3)
    table: dict           # id -> region name

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.table = {int(k): str(v) for k, v in self.table.items()}
        present = set(np.unique(self.labels).tolist()) - {0}
        unknown = present - set(self.table)
        if unknown:
            raise DataError(f"mask labels {sorted(unknown)} missing from table")

    def region_voxels(self, region_id: int) -> np.ndarray:
        return self.labels == region_id

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_ltf(out / "regions.ltf", self.labels, integer=True)
        with open(out / "regions.json", "w", encoding="utf-8") as fh:
            json.dump({str(k): v for k, v in self.table.items()}, fh)

    @classmethod
    def load(cls, in_dir) -> "RegionMask":
        base = Path(in_dir)
        labels = read_ltf(base / "regions.ltf", integer=True)
        table = json.loads((base / "regions.json").read_text())
        return cls(labels=labels, table={int(k): v for k, v in table.items()})


# ---------------------------------------------------------------------------
# Ground-truth directories written by `simulate`.
# ---------------------------------------------------------------------------


def save_truth(truth: GroundTruth, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ltf(out / "alpha.ltf", truth.alpha)
    write_ltf(out / "groups.ltf", truth.groups.astype(np.int64), integer=True)
    write_ltf(out / "subject_offsets.ltf", np.asarray(truth.subject_offsets,
                                                      dtype=np.float64))
    import dataclasses

    with open(out / "spec.json", "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(truth.spec), fh, indent=1)


def load_truth(in_dir) -> GroundTruth:
    base = Path(in_dir)
    spec = _from_dict(SimulationSpec, json.loads((base / "spec.json").read_text()))
    return GroundTruth(
        spec=spec,
        alpha=read_ltf(base / "alpha.ltf"),
        groups=read_ltf(base / "groups.ltf", integer=True),
        subject_offsets=read_ltf(base / "subject_offsets.ltf"),
    )
