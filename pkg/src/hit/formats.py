"""On-disk formats: checkpoints, PGM saliency images and CSV tables.

All writers go through :func:`atomic_write` (temp file in the target
directory, then rename).
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .model import HiT, HiTConfig

MAGIC = b"HITCKPT1"


class FormatError(ValueError):
    """A file does not follow the expected layout."""


@contextmanager
def atomic_write(path, mode: str = "w"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": "\n"})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class CheckpointBundle:
    cfg: HiTConfig
    params: "OrderedDict[str, np.ndarray]"
    seed: int = 0
    epoch: int = 0

    def model(self) -> HiT:
        return HiT(self.cfg, self.params)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_text(cfg: HiTConfig, seed: int, epoch: int) -> str:
    lines = [f"{k}={_format_value(v)}" for k, v in cfg.to_dict().items()]
    lines += [f"seed={seed}", f"epoch={epoch}"]
    return "\n".join(lines) + "\n"


def _parse_field(name: str, raw: str):
    types = {f.name: f.type for f in fields(HiTConfig)}
    t = types[name]
    if name == "pool_layers":
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if t in ("int", int):
        return int(raw)
    if t in ("float", float):
        return float(raw)
    if t in ("bool", bool):
        if raw not in ("true", "false"):
            raise FormatError(f"bad boolean {raw!r} for {name}")
        return raw == "true"
    return raw


def config_from_text(text: str) -> tuple[HiTConfig, int, int]:
    values, seed, epoch = {}, 0, 0
    known = {f.name for f in fields(HiTConfig)}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise FormatError(f"bad config line {line!r}")
        if key == "seed":
            seed = int(raw)
        elif key == "epoch":
            epoch = int(raw)
        elif key in known:
            values[key] = _parse_field(key, raw)
        else:
            raise FormatError(f"unknown config key {key!r} in checkpoint")
    return HiTConfig(**values), seed, epoch


def save_checkpoint(path, model: HiT, seed: int = 0, epoch: int = 0) -> None:
    cfg_bytes = config_to_text(model.cfg, seed, epoch).encode("utf-8")
    with atomic_write(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> CheckpointBundle:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = bytes(view[pos : pos + n])
        pos += n
        return chunk

    if take(8) != MAGIC:
        raise FormatError(f"{path}: not a HiT checkpoint (bad magic)")
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg, seed, epoch = config_from_text(take(cfg_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        params[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return CheckpointBundle(cfg, params, seed, epoch)


# ---------------------------------------------------------------------------
# saliency outputs
# ---------------------------------------------------------------------------

def render_gray(grid_map: np.ndarray, upscale: int = 1) -> np.ndarray:
    """Min-max scale a map to uint8 (constant maps become 0), optional nearest upscale."""
    m = np.asarray(grid_map, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi - lo > 0:
        img = np.rint((m - lo) / (hi - lo) * 255.0)
    else:
        img = np.zeros_like(m)
    img = img.astype(np.uint8)
    if upscale > 1:
        img = np.repeat(np.repeat(img, upscale, axis=0), upscale, axis=1)
    return img


def write_pgm(path, grid_map: np.ndarray, upscale: int = 1) -> None:
    img = render_gray(grid_map, upscale)
    h, w = img.shape
    with atomic_write(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported")
    pos += 1
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)


def write_map_csv(path, grid_map: np.ndarray, meta: dict | None = None) -> None:
    m = np.asarray(grid_map, dtype=np.float64)
    with atomic_write(path) as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}={v}\n")
        fh.write("row,col,value\n")
        for r in range(m.shape[0]):
            for c in range(m.shape[1]):
                fh.write(f"{r},{c},{float(m[r, c])!r}\n")


def read_map_csv(path) -> tuple[np.ndarray, dict]:
    meta, cells = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif line == "row,col,value" or not line:
                continue
            else:
                r, c, v = line.split(",")
                cells.append((int(r), int(c), float(v)))
    side_r = max(r for r, _, _ in cells) + 1
    side_c = max(c for _, c, _ in cells) + 1
    out = np.zeros((side_r, side_c))
    for r, c, v in cells:
        out[r, c] = v
    return out, meta


def write_table(path, header: list[str], rows, meta: dict | None = None) -> None:
    """Plain CSV with optional ``# key=value`` lines on top."""
    with atomic_write(path) as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}={v}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(x) for x in row) + "\n")


def _cell(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def read_table(path) -> tuple[list[str], list[list[str]], dict]:
    meta, header, rows = {}, None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif header is None:
                header = line.split(",")
            elif line:
                rows.append(line.split(","))
    return header or [], rows, meta
