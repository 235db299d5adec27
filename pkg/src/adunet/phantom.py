"""Synthetic bpMRI-like prostate phantoms.

Each case holds three modality volumes (T2W, ADC, DWI analogues), an anatomical
zone mask (outer ellipsoid = prostate, inner ellipsoid = transition zone, shell
= peripheral zone) and a lesion mask.  Diseased cases receive 1..k spherical
lesions that are darker on ADC, brighter on DWI and mildly darker on T2W.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .volume import Volume

MODALITIES: Tuple[str, ...] = ("T2W", "ADC", "DWI")

BACKGROUND, PZ, TZ = 0, 1, 2

# tissue intensities per modality: (body, PZ, TZ)
TISSUE_PROFILES: Dict[str, Tuple[float, float, float]] = {
    "T2W": (0.35, 0.75, 0.50),
    "ADC": (0.40, 0.55, 0.55),
    "DWI": (0.20, 0.25, 0.25),
}


@dataclass
class PhantomConfig:
    dims: Tuple[int, int, int] = (24, 96, 96)
    spacing: Tuple[float, float, float] = (3.0, 0.5, 0.5)
    noise_sigma: Dict[str, float] = field(
        default_factory=lambda: {"T2W": 0.05, "ADC": 0.05, "DWI": 0.05}
    )
    lesion_count: Tuple[int, int] = (1, 2)
    lesion_radius: Tuple[int, int] = (3, 5)
    lesion_contrast: Dict[str, float] = field(
        default_factory=lambda: {"T2W": -0.20, "ADC": -0.40, "DWI": 0.60}
    )
    bias_amplitude: float = 0.10
    bias_scale: float = 48.0
    # prostate outer ellipsoid semi-axes in voxels, sampled per case
    prostate_axial: Tuple[float, float] = (7.0, 8.0)
    prostate_inplane: Tuple[float, float] = (16.0, 20.0)
    center_jitter: Tuple[float, float, float] = (1.0, 3.0, 3.0)
    tz_fraction: float = 0.55

    def validate(self) -> None:
        d, h, w = self.dims
        if min(self.dims) < 1:
            raise ConfigError(f"dims must be positive, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError(f"spacing must be positive, got {self.spacing}")
        if set(self.noise_sigma) != set(MODALITIES) or set(self.lesion_contrast) != set(MODALITIES):
            raise ConfigError(f"noise_sigma and lesion_contrast need exactly {MODALITIES}")
        if any(s < 0 for s in self.noise_sigma.values()):
            raise ConfigError("noise sigma must be non-negative")
        if any(not -1.0 < c < 1.0 for c in self.lesion_contrast.values()):
            raise ConfigError("lesion contrast offsets must lie in (-1, 1)")
        lo, hi = self.lesion_count
        if not 1 <= lo <= hi:
            raise ConfigError(f"lesion_count range invalid: {self.lesion_count}")
        rlo, rhi = self.lesion_radius
        if not 1 <= rlo <= rhi:
            raise ConfigError(f"lesion_radius range invalid: {self.lesion_radius}")
        if not (0 < self.prostate_axial[0] <= self.prostate_axial[1]
                and 0 < self.prostate_inplane[0] <= self.prostate_inplane[1]):
            raise ConfigError("prostate semi-axis ranges invalid")
        # the largest lesion must fit inside the smallest prostate
        if rhi >= min(self.prostate_axial[0], self.prostate_inplane[0]):
            raise ConfigError("lesion radius range exceeds prostate extent")
        if (self.prostate_axial[1] + self.center_jitter[0] + 1 > d / 2
                or self.prostate_inplane[1] + max(self.center_jitter[1:]) + 1 > min(h, w) / 2):
            raise ConfigError("prostate does not fit inside the volume grid")
        if not 0 < self.tz_fraction < 1:
            raise ConfigError("tz_fraction must lie in (0, 1)")
        if not 0 <= self.bias_amplitude < 1 or self.bias_scale <= 0:
            raise ConfigError("bias field parameters invalid")

    def shifted(self, noise_factor: float = 1.5, bias_factor: float = 2.0) -> "PhantomConfig":
        """Distribution-shifted copy used for the external-style test split."""
        return replace(
            self,
            noise_sigma={m: s * noise_factor for m, s in self.noise_sigma.items()},
            bias_amplitude=self.bias_amplitude * bias_factor,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        for key in ("dims", "spacing", "lesion_count", "lesion_radius",
                    "prostate_axial", "prostate_inplane", "center_jitter"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(eq=False)
class Case:
    case_id: str
    modalities: Dict[str, Volume]
    zone_mask: Volume
    lesion_mask: Volume
    healthy: bool
    seed: int

    @property
    def prostate_mask(self) -> Volume:
        return self.zone_mask.like((self.zone_mask.data > 0).astype(np.float32))

    def volumes(self) -> List[Volume]:
        return [self.modalities[m] for m in MODALITIES] + [self.zone_mask, self.lesion_mask]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Case):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.healthy == other.healthy
            and self.seed == other.seed
            and set(self.modalities) == set(other.modalities)
            and all(self.modalities[m] == other.modalities[m] for m in self.modalities)
            and self.zone_mask == other.zone_mask
            and self.lesion_mask == other.lesion_mask
        )


def _ellipsoid(grid: np.ndarray, center: np.ndarray, semi_axes: np.ndarray) -> np.ndarray:
    r = ((grid - center) / semi_axes) ** 2
    return r.sum(axis=-1) <= 1.0


def _bias_field(rng: np.random.Generator, dims, amplitude: float, scale: float) -> np.ndarray:
    """Smooth multiplicative field in ``[1 - amplitude, 1 + amplitude]``."""
    idx = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"), -1)
    f = np.zeros(dims)
    for _ in range(3):
        # in-plane wave vectors only slightly tilted axially; wavelength >= scale voxels
        k = rng.normal(size=3) * np.array([0.3, 1.0, 1.0])
        k *= 2 * np.pi / (scale * (1.0 + rng.random())) / max(np.linalg.norm(k), 1e-12)
        f += np.cos(idx @ k + rng.uniform(0, 2 * np.pi))
    peak = np.abs(f).max()
    if peak > 0:
        f /= peak
    return 1.0 + amplitude * f


def _place_lesions(rng, grid, prostate, config: PhantomConfig, center, semi_axes):
    count = int(rng.integers(config.lesion_count[0], config.lesion_count[1] + 1))
    lesions = np.zeros(prostate.shape, dtype=bool)
    for _ in range(count):
        radius = int(rng.integers(config.lesion_radius[0], config.lesion_radius[1] + 1))
        for _attempt in range(200):
            # centres sampled in the ellipsoid shrunk by the lesion radius
            u = rng.normal(size=3)
            u *= rng.random() ** (1 / 3) / np.linalg.norm(u)
            c = center + u * np.maximum(semi_axes - radius, 0.0)
            c = np.round(c)
            sphere = ((grid - c) ** 2).sum(-1) <= radius**2
            if np.all(prostate[sphere]):
                lesions |= sphere
                break
        else:
            raise ConfigError("could not place a lesion fully inside the prostate")
    return lesions


def generate_case(seed: int, config: PhantomConfig, diseased: bool, case_id: str | None = None) -> Case:
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    config.validate()
    # healthy and diseased draws come from distinct streams
    rng = np.random.default_rng([seed, int(diseased)])
    dims = tuple(config.dims)
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"), -1)

    mid = (np.asarray(dims, dtype=np.float64) - 1) / 2
    center = mid + rng.uniform(-1, 1, 3) * np.asarray(config.center_jitter)
    semi = np.array([
        rng.uniform(*config.prostate_axial),
        rng.uniform(*config.prostate_inplane),
        rng.uniform(*config.prostate_inplane),
    ])
    prostate = _ellipsoid(grid, center, semi)
    # transition zone sits slightly anterior (lower row index) of the gland centre
    tz_center = center + np.array([0.0, -0.15 * semi[1], 0.0])
    tz = _ellipsoid(grid, tz_center, semi * config.tz_fraction) & prostate
    body = _ellipsoid(grid[..., 1:], mid[1:], np.array(dims[1:], dtype=np.float64) * 0.45)

    zones = np.zeros(dims, dtype=np.float32)
    zones[prostate] = PZ
    zones[tz] = TZ

    lesions = (
        _place_lesions(rng, grid, prostate, config, center, semi)
        if diseased else np.zeros(dims, dtype=bool)
    )

    bias = _bias_field(rng, dims, config.bias_amplitude, config.bias_scale)
    spacing = np.asarray(config.spacing, dtype=np.float64)
    origin = -spacing * mid
    modalities = {}
    for name in MODALITIES:
        body_v, pz_v, tz_v = TISSUE_PROFILES[name]
        img = np.where(body, body_v, 0.0)
        img[prostate] = pz_v
        img[tz] = tz_v
        img[lesions] *= 1.0 + config.lesion_contrast[name]
        img = img * bias + rng.normal(0.0, config.noise_sigma[name], dims)
        modalities[name] = Volume(np.clip(img, 0.0, 1.0), spacing, origin)

    return Case(
        case_id=case_id if case_id is not None else f"case_{seed:05d}",
        modalities=modalities,
        zone_mask=Volume(zones, spacing, origin),
        lesion_mask=Volume(lesions.astype(np.float32), spacing, origin),
        healthy=not diseased,
        seed=seed,
    )


def generate_dataset(n_healthy: int, n_diseased: int, base_seed: int, config: PhantomConfig,
                     prefix: str = "case") -> List[Case]:
    """Healthy cases first, then diseased; case ``i`` uses seed ``base_seed + i``."""
    if n_healthy < 0 or n_diseased < 0 or n_healthy + n_diseased < 1:
        raise ConfigError("need at least one case and non-negative counts")
    flags = [False] * n_healthy + [True] * n_diseased
    return [
        generate_case(base_seed + i, config, diseased, case_id=f"{prefix}_{base_seed + i:05d}")
        for i, diseased in enumerate(flags)
    ]


def _largest_remainder(total: int, fractions: Sequence[float]) -> List[int]:
    raw = [total * f for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: total - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(cases: Sequence[Case], fractions: Sequence[float], seed: int):
    """Stratified deterministic (train, val, test) split."""
    if len(cases) == 0:
        raise ConfigError("cannot split an empty dataset")
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be 3 positive numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    sizes = _largest_remainder(len(cases), fractions)
    diseased = [c for c in cases if not c.healthy]
    healthy = [c for c in cases if c.healthy]
    diseased = [diseased[i] for i in rng.permutation(len(diseased))]
    healthy = [healthy[i] for i in rng.permutation(len(healthy))]

    n_dis = _largest_remainder(len(diseased), fractions)
    # keep each split's diseased share within its size; move overflow elsewhere
    for i in range(3):
        while n_dis[i] > sizes[i]:
            n_dis[i] -= 1
            j = max(range(3), key=lambda k: sizes[k] - n_dis[k])
            n_dis[j] += 1
    splits = []
    d0 = h0 = 0
    for size, nd in zip(sizes, n_dis):
        nh = size - nd
        part = diseased[d0:d0 + nd] + healthy[h0:h0 + nh]
        d0 += nd
        h0 += nh
        splits.append([part[i] for i in rng.permutation(len(part))])
    return tuple(splits)
