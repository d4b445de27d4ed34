import hashlib
from pathlib import Path
from typing import Dict, Iterable, Union

import numpy as np

DIGEST_CHUNK = 1 << 20


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator per (seed, keys...) tuple."""
    return np.random.default_rng([seed, *keys] if keys else seed)


def file_digest(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(DIGEST_CHUNK), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_outputs(paths: Iterable[Union[str, Path]]) -> Dict[str, str]:
    return {Path(p).name: file_digest(p) for p in paths}
