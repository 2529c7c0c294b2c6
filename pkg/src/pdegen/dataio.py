"""Dataset file persistence.

One JSON header line (pde kind, grid extents, channel count, sample
count, seed, format version) followed by little-endian raw float32,
samples contiguous and channels-major within a sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

_VERSION = 1


class FormatError(ValueError):
    """Malformed, truncated, or inconsistent dataset file."""


@dataclass
class Dataset:
    kind: str
    data: np.ndarray  # (N, C, H, W) float64 in memory
    seed: int

    @property
    def grid(self):
        return self.data.shape[2:]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.data.shape[0]


def write_dataset(ds: Dataset, path) -> None:
    n, c, h, w = ds.data.shape
    header = {"format": "pdegen-data", "version": _VERSION, "kind": ds.kind,
              "grid": [h, w], "channels": c, "count": n, "seed": ds.seed}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(np.ascontiguousarray(ds.data, dtype="<f4").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise FormatError(f"corrupt dataset header: {e}") from e
        payload = f.read()
    if header.get("format") != "pdegen-data" or header.get("version") != _VERSION:
        raise FormatError(f"unsupported dataset header: {header.get('format')!r} "
                          f"v{header.get('version')!r}")
    try:
        n, c = header["count"], header["channels"]
        h, w = header["grid"]
        kind, seed = header["kind"], header["seed"]
    except (KeyError, ValueError) as e:
        raise FormatError(f"incomplete dataset header: {e}") from e
    expected = n * c * h * w * 4
    if len(payload) != expected:
        raise FormatError(f"payload length {len(payload)} != header count {expected}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, c, h, w)
    return Dataset(kind=kind, data=data, seed=seed)
