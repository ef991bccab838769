"""On-disk formats: XYZ clouds, PGM views, binary PLY, checkpoints, configs.

All writes are whole-file atomic (temp file then rename). Checkpoints use the
"LMN1" container: named float32 little-endian parameter blocks, a training
stage tag, a config echo and a SHA-256 content checksum. Every artifact is a
pure function of (config, seed), so reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, fields

import numpy as np

from .geometry import VIEW_RESOLUTION, PointCloud, RenderedView

CHECKPOINT_MAGIC = b"LMN1"
CHECKPOINT_VERSION = 1
PGM_MAXVAL = 65535


class CheckpointError(Exception):
    """Base for checkpoint load failures."""


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class StageError(CheckpointError):
    pass


class FormatError(CheckpointError):
    pass


def _atomic_write(path: str, payload: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# XYZ text clouds

def write_xyz(cloud: PointCloud, path: str):
    lines = [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in cloud.points]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_xyz(path: str) -> PointCloud:
    pts = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 coordinates, got {len(tokens)}")
            try:
                pts.append([float(t) for t in tokens])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric token in {line!r}") from None
    if not pts:
        raise ValueError(f"{path}: no points")
    return PointCloud(np.array(pts))


# ---------------------------------------------------------------------------
# PGM views (binary P5, 16-bit big-endian per the format spec)

def write_pgm(view: RenderedView, path: str):
    q = np.round(np.clip(view.pixels, 0.0, 1.0) * PGM_MAXVAL).astype(">u2")
    header = (f"P5\n# azimuth_deg={view.azimuth_deg:.6f} "
              f"elevation_deg={view.elevation_deg:.6f}\n"
              f"{VIEW_RESOLUTION} {VIEW_RESOLUTION}\n{PGM_MAXVAL}\n")
    _atomic_write(path, header.encode("ascii") + q.tobytes())


def read_pgm(path: str) -> RenderedView:
    with open(path, "rb") as f:
        blob = f.read()
    try:
        head, rest = blob.split(b"\n", 1)
        if head != b"P5":
            raise ValueError("not a P5 PGM")
        comment, rest = rest.split(b"\n", 1)
        meta = dict(kv.split(b"=") for kv in comment[1:].split())
        dims, rest = rest.split(b"\n", 1)
        w, h = (int(t) for t in dims.split())
        maxval, payload = rest.split(b"\n", 1)
        if int(maxval) != PGM_MAXVAL:
            raise ValueError(f"unsupported maxval {int(maxval)}")
        pixels = np.frombuffer(payload, dtype=">u2", count=w * h).reshape(h, w)
    except Exception as exc:
        raise ValueError(f"{path}: malformed PGM view ({exc})") from exc
    return RenderedView(pixels.astype(np.float64) / PGM_MAXVAL,
                        float(meta[b"azimuth_deg"]), float(meta[b"elevation_deg"]))


# ---------------------------------------------------------------------------
# binary PLY export

def write_ply(cloud: PointCloud, path: str, colors: np.ndarray | None = None):
    """Binary little-endian PLY: float32 x/y/z, optional uchar red/green/blue."""
    n = len(cloud)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (n, 3):
            raise ValueError(f"write_ply: colors must be ({n},3), got {colors.shape}")
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    xyz = cloud.points.astype("<f4")
    if colors is None:
        payload = xyz.tobytes()
    else:
        rgb = colors.astype(np.uint8)
        rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
        rec["xyz"] = xyz
        rec["rgb"] = rgb
        payload = rec.tobytes()
    _atomic_write(path, ("\n".join(header) + "\n").encode("ascii") + payload)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    stage: str                     # AE | LM | PROB
    blocks: dict                   # name -> float32-precision ndarray
    config_echo: str = ""
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path: str, stage: str, blocks, config_echo: str = ""):
    """Serialize named parameter blocks (cast to float32 LE) with a checksum."""
    if stage not in ("AE", "LM", "PROB"):
        raise ValueError(f"save_checkpoint: bad stage tag {stage!r}")
    items = list(blocks.items()) if isinstance(blocks, dict) else list(blocks)
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    stage_b = stage.encode("ascii")
    out += struct.pack("<H", len(stage_b)) + stage_b
    echo_b = config_echo.encode("utf-8")
    out += struct.pack("<I", len(echo_b)) + echo_b
    out += struct.pack("<I", len(items))
    for name, arr in items:
        arr = np.asarray(arr)
        name_b = name.encode("ascii")
        out += struct.pack("<H", len(name_b)) + name_b
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += hashlib.sha256(bytes(out)).digest()
    _atomic_write(path, bytes(out))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 40 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a {CHECKPOINT_MAGIC.decode()} checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupted)")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    (slen,) = struct.unpack_from("<H", body, off)
    off += 2
    stage = body[off:off + slen].decode("ascii")
    off += slen
    (elen,) = struct.unpack_from("<I", body, off)
    off += 4
    echo = body[off:off + elen].decode("utf-8")
    off += elen
    (nblocks,) = struct.unpack_from("<I", body, off)
    off += 4
    blocks = {}
    try:
        for _ in range(nblocks):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("ascii")
            off += nlen
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=off)
            off += 4 * count
            blocks[name] = arr.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: malformed block table ({exc})") from exc
    if off != len(body):
        raise FormatError(f"{path}: {len(body) - off} trailing bytes after blocks")
    return Checkpoint(stage, blocks, echo, version)


def require_stage(ckpt: Checkpoint, *allowed: str):
    """Reject checkpoints from a stage this consumer cannot use."""
    if ckpt.stage not in allowed:
        raise StageError(f"checkpoint stage {ckpt.stage!r} not usable here; "
                         f"expected one of {allowed}")


def require_blocks(ckpt: Checkpoint, *prefixes: str):
    """Enforce pipeline order via block presence (e.g. Stage II needs pe./dec.)."""
    for prefix in prefixes:
        if not any(name.startswith(prefix) for name in ckpt.blocks):
            raise StageError(f"checkpoint (stage {ckpt.stage}) is missing {prefix}* "
                             f"parameter blocks required here")


# ---------------------------------------------------------------------------
# run configuration (plain-text key = value)

def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass
class RunConfig:
    """Every run option, with documented defaults; unknown keys are rejected.

    Path-like keys default to empty and are required by the subcommands that
    need them.
    """
    seed: int = 0
    out_dir: str = "out"
    data_dir: str = ""
    checkpoint: str = ""
    ae_checkpoint: str = ""
    image: str = ""
    categories: str = "box,cylinder,chairlike,tablelike"
    shapes_per_category: int = 25
    category: str = ""             # restrict training/eval to one category
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 5e-5
    lm_variant: str = "l1"
    lambda_div: float = 1.0
    eta: float = 1.0
    phi_o_deg: float = 180.0
    delta_deg: float = 20.0
    wrap_azimuth: bool = True
    shared_epsilon: bool = False
    views_per_shape: int = 6       # training views per shape (of the 24 renders)
    eval_views_per_shape: int = 4
    icp: bool = True
    samples: int = 8               # epsilon draws for the diversity sweep

    def echo(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self))


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}
_PARSERS = {"int": int, "float": float, "str": str, "bool": _parse_bool}


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, _PARSERS[_CONFIG_TYPES[key]](value))
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: bad value for {key}: {exc}") from exc
    return cfg


def read_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), base)


# ---------------------------------------------------------------------------
# TSV reports

def write_tsv(path: str, header, rows):
    """Tab-separated report table; floats rendered with 6 decimal places."""
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6f}"
        return str(v)
    lines = ["\t".join(header)]
    lines += ["\t".join(fmt(v) for v in row) for row in rows]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_tsv(path: str):
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty table")
    header = lines[0].split("\t")
    return header, [line.split("\t") for line in lines[1:]]
