"""Synthetic downlink CSI, angular-delay transform, normalization, and the CSID file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ConfigError, DimensionError

CSID_MAGIC = b"CSID"
CSID_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, n_subcarriers, n_delay, n_antennas, count

# (min paths, max paths, first-arrival tap, delay spread in taps)
SCENARIOS = {
    "indoor": (2, 6, 3.0, 10.0),
    "outdoor": (6, 16, 3.0, 20.0),
}
_GUARD_TAPS = 4  # keeps fractional-delay leakage inside the retained rows


class DegenerateSampleError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ChannelConfig:
    n_subcarriers: int = 1024
    n_delay: int = 32
    n_antennas: int = 32
    scenario: str = "indoor"
    min_paths: int | None = None
    max_paths: int | None = None
    first_tap: float | None = None
    delay_spread: float | None = None
    subcarrier_spacing: float = 1.0 / 1024  # only the product spacing*n_subcarriers matters
    seed: int = 0

    def __post_init__(self):
        for key in ("n_subcarriers", "n_delay", "n_antennas"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.n_delay > self.n_subcarriers:
            raise ConfigError(f"n_delay (Nc={self.n_delay}) exceeds n_subcarriers ({self.n_subcarriers})")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {sorted(SCENARIOS)}, got {self.scenario!r}")
        lo, hi, tap, spread = SCENARIOS[self.scenario]
        object.__setattr__(self, "min_paths", lo if self.min_paths is None else self.min_paths)
        object.__setattr__(self, "max_paths", hi if self.max_paths is None else self.max_paths)
        object.__setattr__(self, "first_tap", tap if self.first_tap is None else self.first_tap)
        object.__setattr__(self, "delay_spread", spread if self.delay_spread is None else self.delay_spread)
        if not 1 <= self.min_paths <= self.max_paths:
            raise ConfigError("paths: need 1 <= min_paths <= max_paths")
        if self.first_tap < 0 or self.delay_spread < 0:
            raise ConfigError("delays must be non-negative")
        if self.first_tap + self.delay_spread > max(self.n_delay - _GUARD_TAPS, 0):
            raise ConfigError(
                f"delay_spread: taps up to {self.first_tap + self.delay_spread:g} do not fit "
                f"the Nc={self.n_delay} retained rows (guard {_GUARD_TAPS})")

    @property
    def tap_duration(self) -> float:
        return 1.0 / (self.n_subcarriers * self.subcarrier_spacing)


@dataclass
class CsiSample:
    matrix: np.ndarray  # (2, Nc, Nt) in [0, 1]
    shift: float = 0.5
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("norm scale must be positive")


@dataclass
class Dataset:
    x: np.ndarray  # (n, 2, Nc, Nt) float32
    scales: np.ndarray  # (n,) float32
    config: ChannelConfig = field(default_factory=ChannelConfig)
    split: str = "train"

    def __post_init__(self):
        if len(self.x) == 0:
            raise ValueError("a dataset needs at least one sample")
        if self.x.ndim != 4 or self.x.shape[1] != 2:
            raise DimensionError(f"dataset array must be (n, 2, Nc, Nt), got {self.x.shape}")
        if len(self.scales) != len(self.x):
            raise DimensionError("one norm scale per sample required")

    def __len__(self):
        return len(self.x)

    def __getitem__(self, i) -> CsiSample:
        return CsiSample(self.x[i], 0.5, float(self.scales[i]))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])


# ---------------------------------------------------------------- channel model

def steering_vector(theta: float, n: int) -> np.ndarray:
    """Half-wavelength ULA response e^{-j pi k sin(theta)}, k = 0..n-1."""
    return np.exp(-1j * np.pi * np.arange(n) * np.sin(theta))


def spatial_frequency_channel(gains, delays, angles, cfg: ChannelConfig) -> np.ndarray:
    """Row i = sum_l g_l exp(-j 2 pi f_i tau_l) a(theta_l)^H, shape (N̄c, Nt)."""
    f = np.arange(cfg.n_subcarriers) * cfg.subcarrier_spacing
    phase = np.exp(-2j * np.pi * np.outer(f, np.asarray(delays, dtype=float)))  # (N̄c, L)
    steer = np.stack([steering_vector(t, cfg.n_antennas) for t in angles])  # (L, Nt)
    return (phase * np.asarray(gains)) @ steer.conj()


def generate_spatial_frequency_channel(cfg: ChannelConfig, rng: np.random.Generator) -> np.ndarray:
    n_paths = int(rng.integers(cfg.min_paths, cfg.max_paths + 1))
    taps = cfg.first_tap + np.sort(rng.uniform(0.0, cfg.delay_spread, n_paths))
    taps[0] = cfg.first_tap
    delays = taps * cfg.tap_duration
    # exponential power-delay profile, unit total power
    power = np.exp(-(taps - cfg.first_tap) / max(cfg.delay_spread / 2, 1e-9))
    power /= power.sum()
    gains = np.sqrt(power / 2) * (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths))
    angles = rng.uniform(-np.pi / 2, np.pi / 2, n_paths)
    return spatial_frequency_channel(gains, delays, angles, cfg)


def dft_matrix(n: int, inverse: bool = False) -> np.ndarray:
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def delay_transform_matrix(n: int) -> np.ndarray:
    # +j kernel so that a delay of k taps lands in row k
    return dft_matrix(n, inverse=True)


def to_angular_delay(h_sf: np.ndarray, n_subcarriers: int | None = None,
                     n_antennas: int | None = None) -> np.ndarray:
    """H = A H̄ B^H with unitary DFT matrices, evaluated by FFT.

    A is the +j-kernel DFT over subcarriers (delay taps map to row indices),
    B the standard DFT over antennas.
    """
    h_sf = np.asarray(h_sf)
    if h_sf.ndim != 2:
        raise DimensionError(f"expected a 2-d channel matrix, got shape {h_sf.shape}")
    if (n_subcarriers is not None and h_sf.shape[0] != n_subcarriers) or \
            (n_antennas is not None and h_sf.shape[1] != n_antennas):
        raise DimensionError(
            f"channel matrix {h_sf.shape} does not match ({n_subcarriers}, {n_antennas})")
    # A x = ifft(x, ortho); X B^H = ifft along antennas as well
    return np.fft.ifft(np.fft.ifft(h_sf, axis=0, norm="ortho"), axis=1, norm="ortho")


def from_angular_delay(h_ad: np.ndarray) -> np.ndarray:
    return np.fft.fft(np.fft.fft(h_ad, axis=0, norm="ortho"), axis=1, norm="ortho")


def truncate_and_normalize(h_ad: np.ndarray, n_delay: int = 32) -> CsiSample:
    hc = np.asarray(h_ad)[:n_delay]
    scale = float(max(np.abs(hc.real).max(initial=0.0), np.abs(hc.imag).max(initial=0.0)))
    if scale == 0.0:
        raise DegenerateSampleError("truncated CSI is all zeros")
    scale = float(np.float32(scale))
    parts = np.stack([hc.real, hc.imag]) / (2 * scale) + 0.5
    return CsiSample(np.clip(parts, 0.0, 1.0).astype(np.float32), 0.5, scale)


def denormalize(matrix: np.ndarray, scale: float, shift: float = 0.5) -> np.ndarray:
    """Inverse of the normalization, returning the complex (Nc, Nt) block."""
    m = (np.asarray(matrix, dtype=np.float64) - shift) * 2 * scale
    return m[0] + 1j * m[1]


def energy_in_first_rows(h_ad: np.ndarray, n_rows: int) -> float:
    e = np.abs(h_ad) ** 2
    return float(e[:n_rows].sum() / e.sum())


def generate_sample(cfg: ChannelConfig, rng: np.random.Generator, max_tries: int = 8) -> CsiSample:
    for _ in range(max_tries):
        h_ad = to_angular_delay(generate_spatial_frequency_channel(cfg, rng))
        try:
            return truncate_and_normalize(h_ad, cfg.n_delay)
        except DegenerateSampleError:
            continue
    raise DegenerateSampleError("could not draw a non-degenerate sample")


def _split_stream(seed: int, split: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 0 if split == "train" else 1])


def generate_split(cfg: ChannelConfig, n: int, split: str) -> Dataset:
    if n < 1:
        raise ValueError(f"{split} split needs at least one sample, got {n}")
    # one child stream per sample index: order-independent, parallelizable
    children = _split_stream(cfg.seed, split).spawn(n)
    x = np.empty((n, 2, cfg.n_delay, cfg.n_antennas), dtype=np.float32)
    scales = np.empty(n, dtype=np.float32)
    for i, child in enumerate(children):
        s = generate_sample(cfg, np.random.default_rng(child))
        x[i], scales[i] = s.matrix, s.scale
    return Dataset(x, scales, cfg, split)


def build_dataset(cfg: ChannelConfig, n_train: int, n_test: int) -> tuple[Dataset, Dataset]:
    return generate_split(cfg, n_train, "train"), generate_split(cfg, n_test, "test")


def sparsity_diagnostic(cfg: ChannelConfig, n: int = 100, seed: int | None = None) -> float:
    """Mean fraction of angular-delay energy inside the first Nc rows."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    fracs = [energy_in_first_rows(to_angular_delay(generate_spatial_frequency_channel(cfg, rng)),
                                  cfg.n_delay) for _ in range(n)]
    return float(np.mean(fracs))


# ---------------------------------------------------------------- CSID files

def csid_file_size(n: int, n_delay: int, n_antennas: int) -> int:
    return _HEADER.size + n * (4 + 4 * 2 * n_delay * n_antennas)


def save_dataset(path, ds: Dataset) -> None:
    n, _, nc, nt = ds.x.shape
    header = _HEADER.pack(CSID_MAGIC, CSID_VERSION, ds.config.n_subcarriers, nc, nt, n)
    body = np.empty((n, 1 + 2 * nc * nt), dtype="<f4")
    body[:, 0] = ds.scales
    body[:, 1:] = ds.x.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def load_dataset(path, split: str | None = None) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"file is {len(raw)} bytes, shorter than the CSID header", len(raw))
    magic, version, n_sub, nc, nt, n = _HEADER.unpack_from(raw, 0)
    if magic != CSID_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != CSID_VERSION:
        raise FormatError(f"unsupported CSID version {version}", 4)
    if n == 0 or nc == 0 or nt == 0:
        raise FormatError("empty dataset header", 12)
    expected = csid_file_size(n, nc, nt)
    if len(raw) != expected:
        record = 4 + 8 * nc * nt
        complete = (len(raw) - _HEADER.size) // record
        offset = _HEADER.size + complete * record
        raise FormatError(f"expected {expected} bytes for {n} samples, found {len(raw)}", offset)
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, 1 + 2 * nc * nt)
    scales = body[:, 0].astype(np.float32)
    bad = np.flatnonzero(~(scales > 0))
    if bad.size:
        raise FormatError(f"sample {bad[0]} has a non-positive norm scale",
                          _HEADER.size + int(bad[0]) * body.shape[1] * 4)
    x = body[:, 1:].reshape(n, 2, nc, nt).astype(np.float32)
    cfg = ChannelConfig(n_subcarriers=max(n_sub, nc), n_delay=nc, n_antennas=nt,
                        delay_spread=0.0, first_tap=0.0)
    return Dataset(x, scales, cfg, split or "unknown")
