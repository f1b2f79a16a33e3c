"""Hyperspectral cubes: container format, preprocessing, splits, patches, synthetic scenes."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, SplitError

CANONICAL_BANDS = 64
HSC_MAGIC = b"HSC1"


@dataclass
class HsiCube:
    radiance: np.ndarray  # [H, W, L] float32
    wavelengths: list[float] | None = None
    sensor_tag: str = ""

    def __post_init__(self):
        self.radiance = np.ascontiguousarray(self.radiance, dtype=np.float32)
        if self.radiance.ndim != 3:
            raise DataError(f"cube must be H x W x L, got shape {self.radiance.shape}")
        if not np.isfinite(self.radiance).all():
            raise DataError("cube contains non-finite radiance values")
        if self.wavelengths is not None:
            wl = [float(v) for v in self.wavelengths]
            if len(wl) != self.L:
                raise DataError(f"{len(wl)} wavelengths for {self.L} bands")
            if any(b <= a for a, b in zip(wl, wl[1:])):
                raise DataError("wavelengths must be strictly increasing")
            self.wavelengths = wl

    @property
    def H(self) -> int:
        return self.radiance.shape[0]

    @property
    def W(self) -> int:
        return self.radiance.shape[1]

    @property
    def L(self) -> int:
        return self.radiance.shape[2]


@dataclass
class LabelMap:
    labels: np.ndarray  # [H, W] int32, 0 = unlabeled
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 2:
            raise DataError(f"label map must be H x W, got shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise DataError(f"labels must lie in 0..{self.num_classes}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> dict[int, int]:
        return {c: int((self.labels == c).sum()) for c in range(1, self.num_classes + 1)}


# -- HSC container ---------------------------------------------------------------


def save_hsc(cube: HsiCube, labels: LabelMap, path) -> None:
    """Write ``magic | u32 header length | JSON header | f32le cube | i32le labels``."""
    if labels.labels.shape != (cube.H, cube.W):
        raise DataError(f"label map {labels.labels.shape} does not match cube {(cube.H, cube.W)}")
    header = {
        "H": cube.H, "W": cube.W, "L": cube.L, "C": labels.num_classes,
        "class_names": list(labels.class_names),
        "wavelengths": cube.wavelengths,
        "sensor_tag": cube.sensor_tag,
        "dtype": "f32le",
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(HSC_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(cube.radiance.astype("<f4").tobytes())
        f.write(labels.labels.astype("<i4").tobytes())


def load_hsc(path) -> tuple[HsiCube, LabelMap]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror or e}") from None
    if raw[:4] != HSC_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {HSC_MAGIC!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        H, W, L = int(header["H"]), int(header["W"]), int(header["L"])
        names = list(header["class_names"])
        C = int(header["C"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: malformed header ({e})") from None
    if header.get("dtype") != "f32le":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    if C != len(names):
        raise FormatError(f"{path}: header C={C} but {len(names)} class names")
    body = raw[8 + hlen:]
    ncube, nlab = 4 * H * W * L, 4 * H * W
    if len(body) != ncube + nlab:
        raise FormatError(f"{path}: body has {len(body)} bytes, header implies {ncube + nlab}")
    rad = np.frombuffer(body[:ncube], dtype="<f4").reshape(H, W, L).astype(np.float32)
    lab = np.frombuffer(body[ncube:], dtype="<i4").reshape(H, W).astype(np.int32)
    try:
        return (HsiCube(rad, header.get("wavelengths"), header.get("sensor_tag", "")),
                LabelMap(lab, names))
    except DataError as e:
        raise FormatError(f"{path}: {e}") from None


# -- preprocessing ---------------------------------------------------------------


def spectral_resample(cube: HsiCube, target_L: int) -> HsiCube:
    """Linear interpolation onto ``target_L`` evenly spaced points of the band index range."""
    if target_L < 2:
        raise ConfigError(f"target_L must be >= 2, got {target_L}")
    L = cube.L
    if target_L == L:
        return HsiCube(cube.radiance.copy(), cube.wavelengths, cube.sensor_tag)
    pos = np.linspace(0.0, L - 1, target_L)
    lo = np.clip(np.floor(pos).astype(int), 0, L - 1)
    hi = np.minimum(lo + 1, L - 1)
    frac = pos - lo
    r = cube.radiance.astype(np.float64)
    out = r[..., lo] * (1.0 - frac) + r[..., hi] * frac
    wl = None
    if cube.wavelengths is not None:
        w = np.asarray(cube.wavelengths)
        wl = (w[lo] * (1.0 - frac) + w[hi] * frac).tolist()
    return HsiCube(out.astype(np.float32), wl, cube.sensor_tag)


def normalize(cube: HsiCube, std_floor: float = 1e-6) -> HsiCube:
    """Per-band standardisation with statistics over the whole cube."""
    r = cube.radiance.astype(np.float64)
    mu = r.mean(axis=(0, 1))
    sd = np.maximum(r.std(axis=(0, 1)), std_floor)
    return HsiCube(((r - mu) / sd).astype(np.float32), cube.wavelengths, cube.sensor_tag)


def prepare_cube(cube: HsiCube, bands: int = CANONICAL_BANDS) -> HsiCube:
    """Resample to the canonical band count, then standardise."""
    return normalize(spectral_resample(cube, bands))


# -- splits ----------------------------------------------------------------------


@dataclass
class SplitSpec:
    n_per_class: int = 150
    seed: int = 0
    overrides: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.overrides = {int(k): int(v) for k, v in self.overrides.items()}
        if self.n_per_class < 1 or any(v < 1 for v in self.overrides.values()):
            raise ConfigError("per-class train counts must be >= 1")

    @classmethod
    def indian_pines(cls, n_per_class: int = 150, seed: int = 0) -> "SplitSpec":
        """Scarce classes 1, 5, 7, 9, 15, 16 get 10 samples each."""
        return cls(n_per_class, seed, {c: 10 for c in (1, 5, 7, 9, 15, 16)})

    def count_for(self, c: int) -> int:
        return self.overrides.get(c, self.n_per_class)


def split_per_class(labels: LabelMap, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class sampling of train pixels; every other labeled pixel is test.

    Returns sorted flat pixel indices (row-major over H x W).
    """
    flat = labels.labels.reshape(-1)
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for c in range(1, labels.num_classes + 1):
        pix = np.flatnonzero(flat == c)
        n = spec.count_for(c)
        if len(pix) <= n:
            name = labels.class_names[c - 1]
            raise SplitError(f"class {c} ({name!r}) has {len(pix)} labeled pixels; "
                             f"{n} train samples requested and at least 1 must remain for test")
        perm = rng.permutation(len(pix))
        train.append(pix[perm[:n]])
        test.append(pix[perm[n:]])
    if not train:
        return np.zeros(0, int), np.zeros(0, int)
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


# -- patches ---------------------------------------------------------------------


def _padded(cube: HsiCube, half: int) -> np.ndarray:
    return np.pad(cube.radiance, ((half, half), (half, half), (0, 0)), mode="reflect")


def extract_patch(cube: HsiCube, pixel: tuple[int, int], size: int) -> np.ndarray:
    """``[size, size, L, 1]`` window centred on ``pixel``; borders mirror without edge repeat."""
    return extract_patches(cube, np.array([pixel]), size)[0]


def extract_patches(cube: HsiCube, pixels, size: int, padded: np.ndarray | None = None) -> np.ndarray:
    """Batched :func:`extract_patch` for an ``[N, 2]`` array of (row, col)."""
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"patch size must be odd, got {size}")
    half = size // 2
    src = _padded(cube, half) if padded is None else padded
    pixels = np.asarray(pixels, dtype=int).reshape(-1, 2)
    out = np.empty((len(pixels), size, size, cube.L, 1), dtype=np.float32)
    for i, (r, c) in enumerate(pixels):
        out[i, ..., 0] = src[r:r + size, c:c + size]
    return out


class PatchSource:
    """Patch extraction over one cube with cached mirror-padded copies per size."""

    def __init__(self, cube: HsiCube, labels: LabelMap):
        if labels.labels.shape != (cube.H, cube.W):
            raise DataError("label map and cube extents differ")
        self.cube = cube
        self.labels = labels
        self._pads: dict[int, np.ndarray] = {}

    @property
    def num_classes(self) -> int:
        return self.labels.num_classes

    def pixels(self, flat_idx) -> np.ndarray:
        flat_idx = np.asarray(flat_idx, dtype=int)
        return np.stack(np.divmod(flat_idx, self.cube.W), axis=1)

    def patches(self, flat_idx, size: int) -> np.ndarray:
        if size not in self._pads:
            self._pads[size] = _padded(self.cube, size // 2)
        return extract_patches(self.cube, self.pixels(flat_idx), size, self._pads[size])

    def targets(self, flat_idx) -> np.ndarray:
        """Zero-based class targets (label - 1)."""
        return self.labels.labels.reshape(-1)[np.asarray(flat_idx, dtype=int)].astype(np.int64) - 1


# -- synthetic scenes ------------------------------------------------------------


@dataclass
class SensorTransform:
    """How the second sensor observes the latent spectra.

    ``band_start``/``band_stop`` are fractions of the latent band axis;
    ``warp`` bends the sampling positions (``u + warp*sin(pi*u)``);
    ``gain``/``offset`` are amplitudes of smooth per-band gain and offset curves.
    """

    bands: int = 48
    band_start: float = 0.1
    band_stop: float = 0.9
    warp: float = 0.15
    gain: float = 0.2
    offset: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.band_start < self.band_stop <= 1.0:
            raise ConfigError("need 0 <= band_start < band_stop <= 1")
        if abs(self.warp) >= 1.0 / np.pi:
            raise ConfigError("|warp| must be < 1/pi to keep sampling monotone")
        if self.bands < 2:
            raise ConfigError("sensor needs at least 2 bands")

    def positions(self, latent_bands: int) -> np.ndarray:
        """Fractional latent-band indices sampled by each sensor band."""
        u = np.linspace(0.0, 1.0, self.bands)
        u = u + self.warp * np.sin(np.pi * u)
        return (self.band_start + (self.band_stop - self.band_start) * u) * (latent_bands - 1)

    def gains(self) -> np.ndarray:
        u = np.linspace(0.0, 1.0, self.bands)
        return 1.0 + self.gain * np.cos(2 * np.pi * u)

    def offsets(self) -> np.ndarray:
        u = np.linspace(0.0, 1.0, self.bands)
        return self.offset * np.sin(np.pi * u)

    def apply(self, spectra: np.ndarray) -> np.ndarray:
        """Map latent spectra ``[..., latent_L]`` to this sensor's ``[..., bands]``."""
        latent_L = spectra.shape[-1]
        pos = self.positions(latent_L)
        lo = np.clip(np.floor(pos).astype(int), 0, latent_L - 1)
        hi = np.minimum(lo + 1, latent_L - 1)
        frac = pos - lo
        s = spectra[..., lo] * (1.0 - frac) + spectra[..., hi] * frac
        return s * self.gains() + self.offsets()


@dataclass
class SyntheticSpec:
    classes: int = 6
    height: int = 48
    width: int = 48
    bands: int = 64
    smoothness: int = 9
    noise_sigma: float = 0.04
    regions: int = 36
    wavelength_range: tuple[float, float] = (0.4, 2.5)
    sensor_b: SensorTransform = field(default_factory=SensorTransform)

    def __post_init__(self):
        if isinstance(self.sensor_b, dict):
            self.sensor_b = SensorTransform(**self.sensor_b)
        self.wavelength_range = tuple(self.wavelength_range)
        if self.classes < 2:
            raise ConfigError("synthetic scene needs at least 2 classes")
        if self.regions < self.classes:
            raise ConfigError("need at least one region per class")
        if min(self.height, self.width) < 1 or self.bands < 2 or self.smoothness < 1:
            raise ConfigError("invalid synthetic extents")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wavelength_range"] = list(self.wavelength_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        if "sensor_b" in d:
            sb = d["sensor_b"]
            bad = set(sb) - set(SensorTransform.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown sensor_b keys: {sorted(bad)}")
        return cls(**d)


def endmembers(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """``[C, L]`` class spectra: cumulative sums of box-smoothed Gaussian noise, scaled into [0.1, 0.9]."""
    k = np.ones(spec.smoothness) / spec.smoothness
    out = np.empty((spec.classes, spec.bands))
    for c in range(spec.classes):
        noise = rng.normal(size=spec.bands + spec.smoothness - 1)
        walk = np.cumsum(np.convolve(noise, k, mode="valid"))
        span = np.ptp(walk)
        out[c] = 0.1 + 0.8 * (walk - walk.min()) / (span if span > 0 else 1.0)
    return out


def region_map(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Nearest-seed-point regions; every class owns at least one region."""
    seeds = np.column_stack([rng.uniform(0, spec.height, spec.regions), rng.uniform(0, spec.width, spec.regions)])
    cls = rng.permutation(np.arange(spec.regions) % spec.classes) + 1
    rr, cc = np.mgrid[0:spec.height, 0:spec.width]
    pts = np.stack([rr.ravel() + 0.5, cc.ravel() + 0.5], axis=1)
    d2 = ((pts[:, None, :] - seeds[None, :, :]) ** 2).sum(-1)
    return cls[d2.argmin(axis=1)].reshape(spec.height, spec.width).astype(np.int32)


def gen_synthetic(spec: SyntheticSpec, seed: int, sensor: str = "A", scene: int = 0) -> tuple[HsiCube, LabelMap]:
    """Seeded synthetic scene as seen by sensor ``"A"`` (latent bands) or ``"B"`` (transformed).

    Endmembers depend on ``seed`` only; layout and noise on ``(seed, scene)``.
    Both sensors see the same draw, so pixel class identities agree across
    views, while another ``scene`` gives a new layout of the same materials.
    """
    if sensor not in ("A", "B"):
        raise ConfigError(f"sensor must be 'A' or 'B', got {sensor!r}")
    em = endmembers(spec, np.random.default_rng(seed))
    rng = np.random.default_rng([seed, scene])
    labels = region_map(spec, rng)
    noise = rng.normal(0.0, 1.0, (spec.height, spec.width, spec.bands)) * spec.noise_sigma
    latent = em[labels - 1] + noise
    lo, hi = spec.wavelength_range
    wl = np.linspace(lo, hi, spec.bands)
    if sensor == "B":
        tf = spec.sensor_b
        latent = tf.apply(latent)
        wl = lo + (hi - lo) * tf.positions(spec.bands) / (spec.bands - 1)
    names = [f"class_{c}" for c in range(1, spec.classes + 1)]
    return HsiCube(latent.astype(np.float32), wl.tolist(), f"synthetic-{sensor}"), LabelMap(labels, names)


# -- RGB -> pseudo-HSI -----------------------------------------------------------

PSEUDO_BANDS = 32
PSEUDO_WAVELENGTHS = np.linspace(0.4, 0.7, PSEUDO_BANDS)
# approximate dominant wavelengths (um) and response width of sRGB primaries
_RGB_CENTERS = np.array([0.61, 0.55, 0.465])
_RGB_WIDTH = 0.05


def _pseudo_weights() -> np.ndarray:
    w = np.exp(-0.5 * ((PSEUDO_WAVELENGTHS[:, None] - _RGB_CENTERS[None, :]) / _RGB_WIDTH) ** 2)
    return w / w.sum(axis=1, keepdims=True)


PSEUDO_WEIGHTS = _pseudo_weights()  # [32, 3], rows sum to 1


def rgb_to_pseudo_hsi(rgb: np.ndarray) -> HsiCube:
    """Fixed Gaussian-weighted lift of an ``[H, W, 3]`` image in [0, 1] to 32 bands."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"expected [H, W, 3] image, got {rgb.shape}")
    if not np.isfinite(rgb).all() or rgb.min() < 0.0 or rgb.max() > 1.0:
        raise DataError("RGB values must lie in [0, 1]")
    return HsiCube((rgb @ PSEUDO_WEIGHTS.T).astype(np.float32), PSEUDO_WAVELENGTHS.tolist(), "pseudo-hsi")


def read_rgb(path) -> np.ndarray:
    """8-bit PNG (or anything Pillow opens) scaled to [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot read image {path}: {e}") from None
    return arr
