"""Volumetric data model: raw-file ingestion, seeded synthetic generation,
block sampling, and min-max normalization.

Conventions used everywhere in this package:

* arrays are indexed ``[z, y, x]`` in C order, so consecutive memory samples
  advance along x first (matching the headerless raw-file layout);
* ``dims`` tuples are always ``(nx, ny, nz)``;
* raw volume files are little-endian float32 with no header, dims supplied
  externally;
* randomness flows through numpy's PCG64 (``np.random.default_rng``) seeded
  via ``SeedSequence`` chains, which makes every seeded operation
  bit-reproducible on a given platform.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataError, DimensionError, FormatError

RAW_DTYPE = np.dtype("<f4")

Dims = tuple[int, int, int]


def _check_dims(dims) -> Dims:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise DimensionError(f"dims must be three positive integers, got {dims}")
    return dims


@dataclass
class VolumeField:
    """A 3D scalar volume with cached value range and provenance."""

    data: np.ndarray  # shape (nz, ny, nx), float32
    field_name: str
    timestep: int
    vmin: float = field(init=False)
    vmax: float = field(init=False)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DimensionError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)
        if self.timestep < 0:
            raise ArgumentError(f"timestep must be non-negative, got {self.timestep}")
        self.vmin = float(self.data.min())
        self.vmax = float(self.data.max())

    @property
    def dims(self) -> Dims:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def value_range(self) -> float:
        return self.vmax - self.vmin


@dataclass
class Block:
    """A contiguous sub-volume sampled from a VolumeField."""

    data: np.ndarray  # shape (bz, by, bx), float32
    origin: Dims  # (ox, oy, oz) within the source field
    source: tuple[str, int]  # (field_name, timestep)
    block_id: int

    @property
    def dims(self) -> Dims:
        bz, by, bx = self.data.shape
        return (bx, by, bz)


@dataclass
class BlockStats:
    """Min-max statistics recorded when a block is normalized."""

    bmin: float
    bmax: float
    degenerate: bool = False


@dataclass
class SyntheticSpec:
    """Parameters for the seeded synthetic volume generator.

    Fields are superpositions of ``n_modes`` sinusoidal plane waves with
    amplitudes, frequencies, and phases drawn once from the seeded generator.
    ``drift`` perturbs frequencies and phases linearly per timestep, modelling
    time evolution; ``noise_amplitude`` adds uniform noise as a fraction of
    the total mode amplitude.
    """

    dims: Dims
    seed: int
    n_modes: int = 8
    max_frequency: float = 4.0
    noise_amplitude: float = 0.01
    drift: float = 0.03

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        if self.n_modes < 1:
            raise ArgumentError(f"n_modes must be >= 1, got {self.n_modes}")
        if self.noise_amplitude < 0:
            raise ArgumentError(f"noise_amplitude must be >= 0, got {self.noise_amplitude}")
        if self.drift < 0:
            raise ArgumentError(f"drift must be >= 0, got {self.drift}")


def load_raw(path, dims, field_name: str | None = None, timestep: int = 0) -> VolumeField:
    """Read a headerless little-endian float32 volume of the given dims.

    The file size must equal ``4 * nx * ny * nz`` bytes; any NaN/Inf sample is
    rejected with the flat index of the first offender.
    """
    nx, ny, nz = _check_dims(dims)
    path = Path(path)
    expected = 4 * nx * ny * nz
    actual = os.path.getsize(path)
    if actual != expected:
        raise DimensionError(
            f"{path}: expected {expected} bytes for dims ({nx},{ny},{nz}), file has {actual}"
        )
    flat = np.fromfile(path, dtype=RAW_DTYPE)
    finite = np.isfinite(flat)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise DataError(f"{path}: non-finite sample at flat index {bad}")
    data = flat.astype(np.float32).reshape(nz, ny, nx)
    name = field_name if field_name is not None else path.stem
    return VolumeField(data=data, field_name=name, timestep=timestep)


def save_raw(volume: VolumeField, path) -> None:
    """Write a volume in the raw little-endian float32 layout."""
    volume.data.astype(RAW_DTYPE).tofile(path)


def generate_synthetic(spec: SyntheticSpec, timestep: int, field_name: str = "synthetic") -> VolumeField:
    """Generate one timestep of a seeded synthetic volume.

    Mode parameters come from ``SeedSequence([seed])`` in a fixed draw order
    (amplitudes, frequencies, phases, drift directions); the per-timestep
    noise stream is seeded by ``SeedSequence([seed, 0x6e736e, timestep])`` so
    identical ``(spec, timestep)`` inputs are bit-identical.
    """
    if timestep < 0:
        raise ArgumentError(f"timestep must be non-negative, got {timestep}")
    nx, ny, nz = spec.dims
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed]))
    amps = rng.uniform(0.5, 1.5, spec.n_modes)
    freqs = rng.uniform(0.5, spec.max_frequency, (spec.n_modes, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, spec.n_modes)
    dfreqs = rng.uniform(-1.0, 1.0, (spec.n_modes, 3))
    dphases = rng.uniform(-np.pi, np.pi, spec.n_modes)

    f_t = freqs + spec.drift * timestep * dfreqs
    p_t = phases + spec.drift * timestep * dphases

    xs = np.arange(nx, dtype=np.float64) / nx
    ys = np.arange(ny, dtype=np.float64) / ny
    zs = np.arange(nz, dtype=np.float64) / nz

    vals = np.zeros((nz, ny, nx), dtype=np.float64)
    for m in range(spec.n_modes):
        fx, fy, fz = f_t[m]
        arg = (
            2.0 * np.pi * (fx * xs)[None, None, :]
            + 2.0 * np.pi * (fy * ys)[None, :, None]
            + 2.0 * np.pi * (fz * zs)[:, None, None]
            + p_t[m]
        )
        vals += amps[m] * np.sin(arg)

    if spec.noise_amplitude > 0:
        noise_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x6E736E, timestep]))
        vals += spec.noise_amplitude * amps.sum() * noise_rng.uniform(-1.0, 1.0, vals.shape)

    return VolumeField(data=vals.astype(np.float32), field_name=field_name, timestep=timestep)


def sample_blocks(volume: VolumeField, block_dims, count: int, seed: int) -> list[Block]:
    """Sample ``count`` blocks with origins drawn uniformly (with replacement).

    Deterministic for fixed inputs; block ids enumerate the sampling order.
    """
    bx, by, bz = _check_dims(block_dims)
    nx, ny, nz = volume.dims
    if bx > nx or by > ny or bz > nz:
        raise DimensionError(f"block dims ({bx},{by},{bz}) exceed field dims ({nx},{ny},{nz})")
    if count < 1:
        raise ArgumentError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    ox = rng.integers(0, nx - bx, size=count, endpoint=True)
    oy = rng.integers(0, ny - by, size=count, endpoint=True)
    oz = rng.integers(0, nz - bz, size=count, endpoint=True)
    blocks = []
    for i in range(count):
        x0, y0, z0 = int(ox[i]), int(oy[i]), int(oz[i])
        data = np.ascontiguousarray(volume.data[z0 : z0 + bz, y0 : y0 + by, x0 : x0 + bx])
        blocks.append(
            Block(
                data=data,
                origin=(x0, y0, z0),
                source=(volume.field_name, volume.timestep),
                block_id=i,
            )
        )
    return blocks


def minmax_normalize(block: Block) -> tuple[Block, BlockStats]:
    """Map block values to [0, 1]; a constant block maps to zeros.

    Returns the normalized block plus the (bmin, bmax) stats needed to invert
    the mapping; ``stats.degenerate`` flags the constant case.
    """
    if block.data.size == 0:
        raise ArgumentError("cannot normalize an empty block")
    bmin = np.float32(block.data.min())
    bmax = np.float32(block.data.max())
    if bmax == bmin:
        norm = np.zeros_like(block.data)
        stats = BlockStats(bmin=float(bmin), bmax=float(bmax), degenerate=True)
    else:
        norm = (block.data - bmin) / (bmax - bmin)
        stats = BlockStats(bmin=float(bmin), bmax=float(bmax), degenerate=False)
    out = Block(data=norm, origin=block.origin, source=block.source, block_id=block.block_id)
    return out, stats


# --- dataset manifest -------------------------------------------------------

MANIFEST_DTYPE = "f32le"


@dataclass
class ManifestField:
    name: str
    timesteps: list[tuple[int, str]]  # (index, relative path)


@dataclass
class Manifest:
    name: str
    dims: Dims
    fields: list[ManifestField]
    base_dir: Path
    dtype: str = MANIFEST_DTYPE

    def field_names(self) -> list[str]:
        return [f.name for f in self.fields]

    def timesteps(self, field_name: str) -> list[int]:
        for f in self.fields:
            if f.name == field_name:
                return [t for t, _ in f.timesteps]
        raise ArgumentError(f"unknown field {field_name!r} in manifest {self.name!r}")

    def volume_path(self, field_name: str, timestep: int) -> Path:
        for f in self.fields:
            if f.name == field_name:
                for t, rel in f.timesteps:
                    if t == timestep:
                        return self.base_dir / rel
        raise ArgumentError(f"manifest {self.name!r} has no ({field_name!r}, t={timestep})")

    def load_volume(self, field_name: str, timestep: int) -> VolumeField:
        return load_raw(self.volume_path(field_name, timestep), self.dims, field_name, timestep)


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid manifest JSON: {e}") from e
    if doc.get("dtype", MANIFEST_DTYPE) != MANIFEST_DTYPE:
        raise FormatError(f"{path}: unsupported dtype {doc.get('dtype')!r}, expected {MANIFEST_DTYPE!r}")
    try:
        fields = [
            ManifestField(
                name=f["name"],
                timesteps=[(int(t["index"]), t["path"]) for t in f["timesteps"]],
            )
            for f in doc["fields"]
        ]
        return Manifest(
            name=doc["name"],
            dims=_check_dims(doc["dims"]),
            fields=fields,
            base_dir=path.parent,
        )
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed manifest: {e}") from e


def save_manifest(manifest: Manifest, path) -> None:
    doc = {
        "name": manifest.name,
        "dims": list(manifest.dims),
        "dtype": manifest.dtype,
        "fields": [
            {
                "name": f.name,
                "timesteps": [{"index": t, "path": rel} for t, rel in f.timesteps],
            }
            for f in manifest.fields
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
