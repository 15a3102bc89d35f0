"""File formats: trajectory/scanpath JSONL, grade-map text files, configs.

Every writer embeds a metadata record (tool version plus the resolved
configuration) so outputs are self-describing.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from .errors import FormatError, InvalidInputError
from .synth import GradeMap
from .trajectory import Fixation, MagLevel, RawTrajectory, Scanpath, ViewportSample

VERSION = "0.1.0"

EXPERTISE_LEVELS = ("resident", "general", "specialist")


def _meta_record(config: dict | None) -> dict:
    return {"_meta": {"version": VERSION, "config": config or {}}}


def write_trajectories(path, trajectories: list[RawTrajectory], config: dict | None = None):
    with open(path, "w") as fh:
        fh.write(json.dumps(_meta_record(config)) + "\n")
        for traj in trajectories:
            for s in traj.samples:
                fh.write(
                    json.dumps(
                        {
                            "wsi": traj.wsi_id,
                            "reader": traj.reader_id,
                            "expertise": traj.expertise,
                            "x": s.x,
                            "y": s.y,
                            "mag": s.mag.factor,
                            "t_ms": s.t,
                        }
                    )
                    + "\n"
                )


def read_trajectories(path) -> list[RawTrajectory]:
    """Parse sample records, grouping consecutive rows by (wsi, reader)."""
    groups: list[RawTrajectory] = []
    key = None
    samples: list[ViewportSample] = []
    meta_fields: tuple[str, str, str] | None = None

    def flush():
        nonlocal samples
        if samples and meta_fields:
            groups.append(RawTrajectory(*meta_fields, samples))
        samples = []

    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise InvalidInputError(f"{path}:{lineno}: malformed JSON: {e}") from None
            if "_meta" in rec:
                continue
            try:
                mag = MagLevel.from_factor(int(rec["mag"]))
                sample = ViewportSample(
                    float(rec["x"]), float(rec["y"]), mag, float(rec["t_ms"])
                )
                rec_key = (rec["wsi"], rec["reader"])
                fields = (rec["wsi"], rec["reader"], rec.get("expertise", "general"))
            except (KeyError, ValueError, TypeError, InvalidInputError) as e:
                raise InvalidInputError(f"{path}:{lineno}: {e}") from None
            if rec_key != key:
                flush()
                key = rec_key
                meta_fields = fields
            samples.append(sample)
    flush()
    return groups


def write_scanpaths(path, scanpaths: list[Scanpath], config: dict | None = None,
                    generator: dict | None = None):
    with open(path, "w") as fh:
        fh.write(json.dumps(_meta_record(config)) + "\n")
        for sp in scanpaths:
            rec = {
                "wsi": sp.wsi_id,
                "reader": sp.reader_id,
                "fixations": [
                    {"x": f.x, "y": f.y, "mag": f.mag.factor, "dur_ms": f.dur}
                    for f in sp.fixations
                ],
            }
            if generator:
                rec["generator"] = generator
            fh.write(json.dumps(rec) + "\n")


def read_scanpaths(path) -> list[Scanpath]:
    out: list[Scanpath] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise InvalidInputError(f"{path}:{lineno}: malformed JSON: {e}") from None
            if "_meta" in rec:
                continue
            try:
                fixations = [
                    Fixation(
                        float(f["x"]), float(f["y"]),
                        MagLevel.from_factor(int(f["mag"])), float(f["dur_ms"])
                    )
                    for f in rec["fixations"]
                ]
                out.append(Scanpath(rec["wsi"], rec["reader"], fixations))
            except (KeyError, ValueError, TypeError, InvalidInputError) as e:
                raise InvalidInputError(f"{path}:{lineno}: {e}") from None
    return out


def save_grade_map(base_path, gm: GradeMap):
    """Text grid plus JSON sidecar {cell_size}."""
    base = Path(base_path)
    base.with_suffix(".grid").write_text(gm.to_text() + "\n")
    base.with_suffix(".json").write_text(json.dumps({"cell_size": gm.cell_size}))


def load_grade_map(base_path) -> GradeMap:
    base = Path(base_path)
    grid_file = base.with_suffix(".grid")
    sidecar = base.with_suffix(".json")
    if not grid_file.exists() or not sidecar.exists():
        raise FormatError(f"grade map files missing for {base}")
    meta = json.loads(sidecar.read_text())
    return GradeMap.from_text(grid_file.read_text(), float(meta["cell_size"]))


def parse_config(path) -> dict:
    """Flat key = value config; values are parsed as int/float/bool/str."""
    out: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            out[key.strip()] = _parse_value(value.strip())
    return out


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip("\"'")


def resolve_seed(config: dict) -> int:
    env = os.environ.get("PATHSCAN_SEED")
    if env is not None:
        return int(env)
    return int(config.get("seed", 0))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, files: list[str], config: dict):
    root = Path(path).parent
    entries = [
        {"file": str(Path(f).relative_to(root)), "sha256": file_sha256(f)}
        for f in sorted(files)
    ]
    Path(path).write_text(
        json.dumps(
            {"version": VERSION, "config": config, "files": entries}, indent=2
        )
    )
