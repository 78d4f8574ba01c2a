"""Canonical on-disk formats.

Epoched bundle (the ingestion boundary for training)::

    <dir>/manifest.json   {format_version: "1", dataset_id, sample_rate_hz, n_channels,
                           sensor_names, trials: [{subject_id, label, offset_bytes, n_samples}]}
    <dir>/trials.bin      little-endian float32, each trial channels x samples row-major,
                          trials concatenated in manifest order
    <dir>/layout.json     optional electrode layout (positions + neighbours)

Continuous recordings (input to ``preprocess``) use the same idea with
``recordings.json`` / ``signal.bin`` and per-recording event markers.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import FormatError, VersionError
from .montage import ElectrodeLayout, load_layout, save_layout
from .signal import DatasetBundle, RawRecording

FORMAT_VERSION = "1"
SUPPORTED_VERSIONS = ("1",)
_F32 = np.dtype("<f4")


def _bare_layout(dataset_id: str, names: Sequence[str]) -> ElectrodeLayout:
    return ElectrodeLayout(dataset_id, list(names), np.zeros((len(names), 2)), [set() for _ in names])


def write_canonical(bundle: DatasetBundle, path: str | Path, write_layout: bool = True) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    N, S, T = bundle.data.shape
    trials = []
    offset = 0
    nbytes = S * T * _F32.itemsize
    for i in range(N):
        trials.append({
            "subject_id": bundle.subject_ids[i],
            "label": int(bundle.labels[i]),
            "offset_bytes": offset,
            "n_samples": T,
        })
        offset += nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "dataset_id": bundle.dataset_id,
        "sample_rate_hz": float(bundle.sample_rate_hz),
        "n_channels": S,
        "sensor_names": list(bundle.sensor_names),
        "trials": trials,
    }
    with open(out / "trials.bin", "wb") as fh:
        fh.write(np.ascontiguousarray(bundle.data, dtype=_F32).tobytes())
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    if write_layout:
        save_layout(bundle.layout, out / "layout.json")
    return out


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise FormatError(msg)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _read_json(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(f"{path}: missing") from None
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not UTF-8 ({exc})") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    _require(isinstance(d, dict), f"{path}: top level must be an object")
    return d


def _check_header(m: dict, where: str) -> None:
    _require("format_version" in m, f"{where}: missing format_version")
    version = m["format_version"]
    if not isinstance(version, str) or version not in SUPPORTED_VERSIONS:
        raise VersionError(f"{where}: format_version {version!r} unsupported (reader supports {SUPPORTED_VERSIONS})")
    _require(isinstance(m.get("dataset_id"), str) and m["dataset_id"] != "", f"{where}: dataset_id must be a non-empty string")
    rate = m.get("sample_rate_hz")
    _require(
        isinstance(rate, (int, float)) and not isinstance(rate, bool) and math.isfinite(rate) and rate > 0,
        f"{where}: sample_rate_hz must be a positive number",
    )
    names = m.get("sensor_names")
    _require(isinstance(names, list) and all(isinstance(n, str) for n in names), f"{where}: sensor_names must be a list of strings")
    _require(len(set(names)) == len(names), f"{where}: duplicate sensor names")


def load_canonical(path: str | Path) -> DatasetBundle:
    root = Path(path)
    where = str(root / "manifest.json")
    m = _read_json(root / "manifest.json")
    _check_header(m, where)
    known = {"format_version", "dataset_id", "sample_rate_hz", "n_channels", "sensor_names", "trials"}
    extra = sorted(set(m) - known)
    _require(not extra, f"{where}: unknown keys {extra}")
    S = m.get("n_channels")
    _require(_is_int(S) and S > 0, f"{where}: n_channels must be a positive integer")
    _require(len(m["sensor_names"]) == S, f"{where}: {len(m['sensor_names'])} sensor names for n_channels={S}")
    trials = m.get("trials")
    _require(isinstance(trials, list) and len(trials) > 0, f"{where}: trials must be a non-empty list")

    try:
        payload = np.fromfile(root / "trials.bin", dtype=_F32)
    except FileNotFoundError:
        raise FormatError(f"{root / 'trials.bin'}: missing") from None
    size = payload.size * _F32.itemsize
    if os.path.getsize(root / "trials.bin") != size:
        raise FormatError(f"{root / 'trials.bin'}: size is not a multiple of 4 bytes")

    T = None
    offset = 0
    labels, subjects = [], []
    for k, t in enumerate(trials):
        tw = f"{where}: trial {k}"
        _require(isinstance(t, dict), f"{tw} must be an object")
        extra = sorted(set(t) - {"subject_id", "label", "offset_bytes", "n_samples"})
        _require(not extra, f"{tw}: unknown keys {extra}")
        _require(isinstance(t.get("subject_id"), str) and t["subject_id"] != "", f"{tw}: subject_id must be a non-empty string")
        _require(_is_int(t.get("label")) and t["label"] in (0, 1), f"{tw}: label must be 0 or 1")
        _require(_is_int(t.get("n_samples")) and t["n_samples"] > 0, f"{tw}: n_samples must be a positive integer")
        _require(_is_int(t.get("offset_bytes")), f"{tw}: offset_bytes must be an integer")
        if T is None:
            T = t["n_samples"]
        _require(t["n_samples"] == T, f"{tw}: n_samples {t['n_samples']} differs from {T}")
        _require(t["offset_bytes"] == offset, f"{tw}: offset_bytes {t['offset_bytes']} != expected {offset}")
        offset += S * T * _F32.itemsize
        labels.append(t["label"])
        subjects.append(t["subject_id"])
    _require(
        offset == size,
        f"{root / 'trials.bin'}: payload has {size} bytes, manifest implies {offset} "
        f"({len(trials)} trials x {S} channels x {T} samples)",
    )
    data = payload.reshape(len(trials), S, T)

    layout_path = root / "layout.json"
    if layout_path.exists():
        try:
            layout = load_layout(layout_path)
        except Exception as exc:  # any defect in the optional side file is a format problem
            raise FormatError(f"{layout_path}: {exc}") from exc
        _require(
            layout.sensor_names == m["sensor_names"],
            f"{layout_path}: sensor names disagree with the manifest",
        )
    else:
        layout = _bare_layout(m["dataset_id"], m["sensor_names"])
    return DatasetBundle(
        dataset_id=m["dataset_id"],
        layout=layout,
        data=data,
        labels=np.array(labels, dtype=np.int64),
        subject_ids=subjects,
        sample_rate_hz=float(m["sample_rate_hz"]),
    )


def write_recordings(recordings: Sequence[RawRecording], sensor_names: Sequence[str], path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if not recordings:
        raise FormatError("no recordings to write")
    rate = recordings[0].sample_rate
    entries, offset = [], 0
    with open(out / "signal.bin", "wb") as fh:
        for rec in recordings:
            if rec.sample_rate != rate or rec.signal.shape[0] != len(sensor_names):
                raise FormatError(f"recording of subject {rec.subject_id!r} disagrees on rate or channel count")
            buf = np.ascontiguousarray(rec.signal, dtype=_F32).tobytes()
            fh.write(buf)
            entries.append({
                "subject_id": rec.subject_id,
                "offset_bytes": offset,
                "n_samples": int(rec.signal.shape[1]),
                "events": [[int(i), int(lab)] for i, lab in rec.event_markers],
            })
            offset += len(buf)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dataset_id": recordings[0].dataset_id,
        "sample_rate_hz": float(rate),
        "n_channels": len(sensor_names),
        "sensor_names": list(sensor_names),
        "recordings": entries,
    }
    (out / "recordings.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return out


def load_recordings(path: str | Path) -> tuple[list[RawRecording], list[str]]:
    root = Path(path)
    where = str(root / "recordings.json")
    m = _read_json(root / "recordings.json")
    _check_header(m, where)
    S = m.get("n_channels")
    _require(_is_int(S) and S == len(m["sensor_names"]), f"{where}: n_channels inconsistent with sensor_names")
    recs = m.get("recordings")
    _require(isinstance(recs, list) and recs, f"{where}: recordings must be a non-empty list")
    try:
        payload = np.fromfile(root / "signal.bin", dtype=_F32)
    except FileNotFoundError:
        raise FormatError(f"{root / 'signal.bin'}: missing") from None
    out, offset = [], 0
    for k, r in enumerate(recs):
        rw = f"{where}: recording {k}"
        _require(isinstance(r, dict), f"{rw} must be an object")
        n = r.get("n_samples")
        _require(_is_int(n) and n > 0, f"{rw}: n_samples must be a positive integer")
        _require(r.get("offset_bytes") == offset, f"{rw}: offset_bytes must be {offset}")
        _require(isinstance(r.get("subject_id"), str), f"{rw}: subject_id must be a string")
        events = r.get("events", [])
        _require(
            isinstance(events, list) and all(
                isinstance(e, list) and len(e) == 2 and all(_is_int(v) for v in e) for e in events
            ),
            f"{rw}: events must be [[sample_index, label], ...]",
        )
        start = offset // 4
        _require(start + S * n <= payload.size, f"{rw}: payload too short")
        sig = payload[start:start + S * n].reshape(S, n).astype(float)
        try:
            out.append(RawRecording(m["dataset_id"], r["subject_id"], float(m["sample_rate_hz"]), sig,
                                    [(int(i), int(lab)) for i, lab in events]))
        except ValueError as exc:
            raise FormatError(f"{rw}: {exc}") from exc
        offset += S * n * 4
    _require(offset == payload.size * 4, f"{root / 'signal.bin'}: trailing bytes after last recording")
    return out, list(m["sensor_names"])
