"""Binary checkpoints: magic, version byte, JSON header, float32 parameter payload."""
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import orjson
import torch

from dosediff.core.errors import FormatError
from dosediff.models.schemas.configs import EmbeddingMode
from dosediff.services.predictor_service import ConditionalDenoiser, TinyNetPredictor
from dosediff.services.prior_service import PriorBackend, PriorKind

MAGIC = b"DDCK"
VERSION = 1
KINDS = ("predictor", "prior")
PAYLOAD_DTYPE = np.dtype("<f4")
_PREFIX = struct.Struct("<4sBI")


def save_checkpoint(
    model: ConditionalDenoiser,
    path: Union[str, Path],
    kind: str = "predictor",
    intensity_scale: float = 1.0,
    extra: Dict[str, Any] = None,
) -> Path:
    if kind not in KINDS:
        raise FormatError(f"unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    header = {
        "kind": kind,
        "hyperparameters": model.hyperparameters(),
        "intensity_scale": float(intensity_scale),
        "parameters": [[name, list(tensor.shape)] for name, tensor in state.items()],
        "extra": extra or {},
    }
    header_bytes = orjson.dumps(header)
    payload = b"".join(
        tensor.detach().cpu().numpy().astype(PAYLOAD_DTYPE).tobytes() for tensor in state.values()
    )
    path.write_bytes(_PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + payload)
    return path


def load_checkpoint(path: Union[str, Path], kind: str = None) -> Tuple[ConditionalDenoiser, Dict[str, Any]]:
    """Rebuild the network; returns (model, header)."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _PREFIX.size:
        raise FormatError("checkpoint shorter than its fixed prefix", path=str(path), expected=_PREFIX.size, actual=len(blob))
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", path=str(path), offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path=str(path), offset=4)
    start = _PREFIX.size
    try:
        header = orjson.loads(blob[start : start + header_len])
    except orjson.JSONDecodeError as e:
        raise FormatError(f"checkpoint header is not valid JSON: {e}", path=str(path), offset=start) from e
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"expected a {kind} checkpoint, found {header.get('kind')!r}", path=str(path))

    offset = start + header_len
    shapes = [(name, tuple(shape)) for name, shape in header["parameters"]]
    expected = offset + sum(int(np.prod(shape, dtype=np.int64)) for _, shape in shapes) * PAYLOAD_DTYPE.itemsize
    if len(blob) != expected:
        raise FormatError(
            f"checkpoint holds {len(blob)} bytes, header implies {expected}",
            path=str(path),
            offset=min(len(blob), expected),
            expected=expected,
            actual=len(blob),
        )

    state = {}
    for name, shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(blob, dtype=PAYLOAD_DTYPE, count=count, offset=offset)
        state[name] = torch.from_numpy(values.reshape(shape).copy())
        offset += count * PAYLOAD_DTYPE.itemsize

    model = ConditionalDenoiser(**header["hyperparameters"])
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise FormatError(f"parameters do not fit the declared architecture: {e}", path=str(path)) from e
    return model.eval(), header


def load_predictor(path: Union[str, Path], embedding_override: Optional[EmbeddingMode] = None) -> TinyNetPredictor:
    model, header = load_checkpoint(path, kind="predictor")
    return TinyNetPredictor(model, header["intensity_scale"], embedding_override)


def save_prior(backend: PriorBackend, path: Union[str, Path]) -> Path:
    if backend.kind is not PriorKind.TRAINED:
        raise FormatError("only trained prior backends have a checkpoint")
    return save_checkpoint(backend.model, path, kind="prior", intensity_scale=backend.intensity_scale)


def load_prior(path: Union[str, Path]) -> PriorBackend:
    model, header = load_checkpoint(path, kind="prior")
    return PriorBackend(kind=PriorKind.TRAINED, model=model, intensity_scale=header["intensity_scale"])
