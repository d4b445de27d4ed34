from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import orjson

from dosediff.core.errors import FormatError
from dosediff.models.domain import Volume3D

HEADER_SUFFIX = ".vol.json"
PAYLOAD_SUFFIX = ".vol.raw"
PAYLOAD_DTYPE = np.dtype("<f4")
HEADER_KEYS = ("width", "height", "slices", "voxel_size_mm", "dose_bq", "count_fraction")


def volume_paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    """Header and payload paths for a volume stem (either suffix is accepted)."""
    name = str(path)
    for suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return Path(name + HEADER_SUFFIX), Path(name + PAYLOAD_SUFFIX)


def write_volume(vol: Volume3D, path: Union[str, Path]) -> Tuple[Path, Path]:
    header_path, payload_path = volume_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    # voxel_size_mm is held (z, y, x) in memory and stored [x, y, z]
    header = {
        "width": vol.width,
        "height": vol.height,
        "slices": vol.slices,
        "voxel_size_mm": list(reversed(vol.voxel_size_mm)),
        "dose_bq": vol.dose_bq,
        "count_fraction": vol.count_fraction,
    }
    header_path.write_bytes(orjson.dumps(header, option=orjson.OPT_INDENT_2))
    payload_path.write_bytes(np.ascontiguousarray(vol.data, dtype=PAYLOAD_DTYPE).tobytes())
    return header_path, payload_path


def _read_header(header_path: Path) -> dict:
    try:
        header = orjson.loads(header_path.read_bytes())
    except FileNotFoundError:
        raise
    except orjson.JSONDecodeError as e:
        raise FormatError(f"header is not valid JSON: {e}", path=str(header_path), offset=e.pos) from e
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise FormatError(f"header missing keys {missing}", path=str(header_path))
    for key in ("width", "height", "slices"):
        if not isinstance(header[key], int) or header[key] < 1:
            raise FormatError(f"header {key} must be a positive integer, got {header[key]!r}", path=str(header_path))
    if header["width"] != header["height"]:
        raise FormatError("only square slices are supported", path=str(header_path))
    return header


def read_volume(path: Union[str, Path]) -> Volume3D:
    header_path, payload_path = volume_paths(path)
    header = _read_header(header_path)
    S, H, W = header["slices"], header["height"], header["width"]

    raw = payload_path.read_bytes()
    expected = S * H * W * PAYLOAD_DTYPE.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"payload holds {len(raw)} bytes, header implies {expected}",
            path=str(payload_path),
            offset=min(len(raw), expected),
            expected=expected,
            actual=len(raw),
        )
    data = np.frombuffer(raw, dtype=PAYLOAD_DTYPE).reshape(S, H, W)

    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise FormatError(
            "payload contains non-finite values", path=str(payload_path), offset=int(bad[0]) * PAYLOAD_DTYPE.itemsize
        )
    negative = np.flatnonzero(data < 0)
    if negative.size:
        raise FormatError(
            "payload contains negative activity", path=str(payload_path), offset=int(negative[0]) * PAYLOAD_DTYPE.itemsize
        )
    try:
        return Volume3D(
            data=data.astype(np.float64),
            voxel_size_mm=tuple(reversed(header["voxel_size_mm"])),
            dose_bq=float(header["dose_bq"]),
            count_fraction=float(header["count_fraction"]),
        )
    except Exception as e:
        raise FormatError(f"header metadata rejected: {e}", path=str(header_path)) from e


def export_pgm(
    vol: Volume3D,
    out_dir: Union[str, Path],
    window: Optional[Tuple[float, float]] = None,
    prefix: str = "slice",
) -> List[Path]:
    """One 8-bit binary graymap per slice, linearly windowed to [lo, hi]."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = window if window is not None else (float(vol.data.min()), float(vol.data.max()))
    span = hi - lo if hi > lo else 1.0
    pixels = np.clip(np.rint((vol.data - lo) / span * 255.0), 0, 255).astype(np.uint8)

    paths = []
    digits = len(str(vol.slices - 1))
    for s in range(vol.slices):
        path = out_dir / f"{prefix}_{s:0{digits}d}.pgm"
        header = f"P5\n{vol.width} {vol.height}\n255\n".encode("ascii")
        path.write_bytes(header + pixels[s].tobytes())
        paths.append(path)
    return paths
