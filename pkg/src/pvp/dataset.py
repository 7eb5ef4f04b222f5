"""Durable episode storage: an append-only binary record file plus a JSON
manifest, with bit-exact round trips and per-record checksums.

Record layout (all little-endian):

    magic   4 bytes  b"EPRC"
    header  9 x u32  version, n_frames, n_actions, raster h, w, c,
                     proprio dim, stack depth, metadata byte length
    meta    JSON-encoded episode metadata (utf-8)
    frames  n_frames x (h*w*c f32 raster + proprio f32)
    actions n_actions x (6 f64 relative pose + 1 u8 gripper)
    crc     u32 crc32 over everything above

Floats round-trip bit for bit; the manifest carries offsets, collection flags
and lengths so summary statistics never touch the binary file.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from pvp.collect import Action, Episode
from pvp.scene import ConfigError
from pvp.se3 import RelPose
from pvp.sim import ObservationFrame

RECORD_MAGIC = b"EPRC"
SCHEMA_VERSION = 1
_RECORD_HEADER = struct.Struct("<4s9I")

RECORDS_NAME = "episodes.bin"
MANIFEST_NAME = "manifest.json"


class StorageError(RuntimeError):
    """I/O or format failure in the dataset layer."""


class IntegrityError(StorageError):
    """A record failed its checksum or structural validation."""


def _episode_flags(ep: Episode) -> dict:
    md = ep.metadata
    return {
        "seed": int(md.get("seed", -1)),
        "source": md.get("source", "pvp"),
        "ccg": bool(md.get("ccg", True)),
        "tr": bool(md.get("tr", True)),
        "noise_aug": bool(md.get("noise_augmented", False)),
        "outcome": bool(md.get("outcome", False)),
        "length": len(ep.actions),
    }


def encode_episode(ep: Episode) -> bytes:
    """Serialize one episode to a self-checking record."""
    if len(ep.actions) == 0:
        raise ConfigError("refusing to store an episode with no tuples")
    meta = json.dumps(ep.metadata, separators=(",", ":")).encode()
    f0 = ep.frames[0]
    h, w, c = f0.raster.shape
    pd = f0.proprio.shape[0]
    parts = [_RECORD_HEADER.pack(RECORD_MAGIC, SCHEMA_VERSION, len(ep.frames),
                                 len(ep.actions), h, w, c, pd, ep.stack_depth,
                                 len(meta)), meta]
    for fr in ep.frames:
        if fr.raster.shape != (h, w, c) or fr.proprio.shape != (pd,):
            raise ConfigError("inconsistent frame shapes in episode")
        parts.append(np.ascontiguousarray(fr.raster, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(fr.proprio, dtype="<f4").tobytes())
    for a in ep.actions:
        parts.append(np.ascontiguousarray(a.delta.as_vector(), dtype="<f8").tobytes())
        parts.append(bytes([a.gripper]))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_episode(blob: bytes, offset: int = 0, where: str = "record") -> Episode:
    """Parse one record starting at offset; verifies structure and checksum."""
    view = memoryview(blob)[offset:]
    if len(view) < _RECORD_HEADER.size:
        raise IntegrityError(f"{where}: truncated before header")
    magic, version, n_frames, n_actions, h, w, c, pd, stack_depth, meta_len = \
        _RECORD_HEADER.unpack_from(view)
    if magic != RECORD_MAGIC:
        raise IntegrityError(f"{where}: bad magic bytes")
    if version != SCHEMA_VERSION:
        raise IntegrityError(f"{where}: unsupported schema version {version}")
    frame_bytes = 4 * (h * w * c + pd)
    action_bytes = 6 * 8 + 1
    total = _RECORD_HEADER.size + meta_len + n_frames * frame_bytes \
        + n_actions * action_bytes + 4
    if len(view) < total:
        raise IntegrityError(f"{where}: truncated body")
    body = view[: total - 4]
    (crc,) = struct.unpack_from("<I", view, total - 4)
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"{where}: checksum mismatch")

    pos = _RECORD_HEADER.size
    meta = json.loads(bytes(view[pos:pos + meta_len]).decode())
    pos += meta_len
    frames = []
    for i in range(n_frames):
        start = pos + i * frame_bytes
        raster = np.frombuffer(body, dtype="<f4", count=h * w * c,
                               offset=start).reshape(h, w, c).copy()
        proprio = np.frombuffer(body, dtype="<f4", count=pd,
                                offset=start + 4 * h * w * c).copy()
        frames.append(ObservationFrame(raster=raster, proprio=proprio))
    pos += n_frames * frame_bytes
    actions = []
    for i in range(n_actions):
        start = pos + i * action_bytes
        vec = np.frombuffer(body, dtype="<f8", count=6, offset=start)
        gripper = body[start + 48]
        actions.append(Action(RelPose(t=vec[:3].copy(), w=vec[3:].copy()),
                              int(gripper)))
    return Episode(frames=frames, actions=actions, metadata=meta,
                   stack_depth=stack_depth)


@dataclass
class DatasetWriter:
    """Append-only writer; one open writer per directory."""

    root: Path
    scene_hash: str = ""
    _entries: list = field(default_factory=list)
    _offset: int = 0
    _file: object = None

    def __post_init__(self):
        self.root = Path(self.root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            self._file = open(self.root / RECORDS_NAME, "wb")
        except OSError as e:
            raise StorageError(f"cannot open dataset for writing: {e}") from e

    def write_episode(self, ep: Episode) -> int:
        """Append one record; returns its byte offset in the records file."""
        record = encode_episode(ep)
        offset = self._offset
        try:
            self._file.write(record)
        except OSError as e:
            raise StorageError(f"write failed at offset {offset}: {e}") from e
        entry = dict(_episode_flags(ep), offset=offset, size=len(record))
        self._entries.append(entry)
        self._offset += len(record)
        return offset

    def close(self) -> dict:
        """Flush records and write the manifest; returns the manifest dict."""
        self._file.close()
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "scene_hash": self.scene_hash,
            "count": len(self._entries),
            "episodes": self._entries,
        }
        text = json.dumps(manifest, indent=1, sort_keys=True)
        (self.root / MANIFEST_NAME).write_text(text)
        return manifest

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def load_manifest(root) -> dict:
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST_NAME).read_text())
    except OSError as e:
        raise StorageError(f"cannot read manifest: {e}") from e
    except json.JSONDecodeError as e:
        raise IntegrityError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise IntegrityError(
            f"unsupported manifest schema {manifest.get('schema_version')}")
    eps = manifest.get("episodes", [])
    if manifest.get("count") != len(eps):
        raise IntegrityError("manifest count does not match its episode list")
    offsets = [e["offset"] for e in eps]
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise IntegrityError("manifest offsets are not strictly increasing")
    return manifest


def read_episode(root, offset: int, index: Optional[int] = None) -> Episode:
    """Random-access read of the record at a manifest offset."""
    root = Path(root)
    try:
        blob = (root / RECORDS_NAME).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read records: {e}") from e
    if not 0 <= offset < len(blob):
        raise StorageError(f"offset {offset} outside records file")
    where = f"record {index}" if index is not None else f"record@{offset}"
    return decode_episode(blob, offset, where=where)


def read_all(root) -> list:
    """Sequential read of every episode listed in the manifest."""
    manifest = load_manifest(root)
    root = Path(root)
    try:
        blob = (root / RECORDS_NAME).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read records: {e}") from e
    out = []
    for i, entry in enumerate(manifest["episodes"]):
        out.append(decode_episode(blob, entry["offset"], where=f"record {i}"))
    return out


def verify_dataset(root) -> int:
    """Full integrity scan; returns the number of valid records."""
    return len(read_all(root))


def dataset_stats(root) -> dict:
    """Length statistics and per-flag breakdown from the manifest."""
    manifest = load_manifest(root)
    eps = manifest["episodes"]
    if not eps:
        raise StorageError("dataset is empty")
    lengths = np.array([e["length"] for e in eps], dtype=float)
    stats = {
        "count": len(eps),
        "length_mean": float(np.mean(lengths)),
        "length_std": float(np.std(lengths)),
        "length_min": int(np.min(lengths)),
        "length_max": int(np.max(lengths)),
        "success_rate": float(np.mean([e["outcome"] for e in eps])),
        "scene_hash": manifest["scene_hash"],
        "by_flag": {},
    }
    for flag in ("source", "ccg", "tr", "noise_aug"):
        groups = {}
        for e in eps:
            key = str(e[flag])
            g = groups.setdefault(key, [])
            g.append(e["length"])
        stats["by_flag"][flag] = {
            k: {"count": len(v), "length_mean": float(np.mean(v))}
            for k, v in sorted(groups.items())
        }
    return stats


def stats_text(stats: dict) -> str:
    lines = [
        f"episodes: {stats['count']}",
        f"scene: {stats['scene_hash']}",
        (f"length: mean {stats['length_mean']:.2f} std {stats['length_std']:.2f}"
         f" min {stats['length_min']} max {stats['length_max']}"),
        f"success rate: {stats['success_rate']:.3f}",
    ]
    for flag, groups in stats["by_flag"].items():
        for key, g in groups.items():
            lines.append(f"  {flag}={key}: n={g['count']}"
                         f" mean_len={g['length_mean']:.2f}")
    return "\n".join(lines) + "\n"
