"""The augmentation family: rescaling, energy-band renormalization, intensity
transforms, and random cropping, composed hierarchically into multi-crop views.

All operations are pure functions of (image, spec, reference); randomness
enters only through explicitly passed generators, so any sampled view is
reproducible from its spec alone. The fixed application order is
rescale -> energy renormalization -> gamma -> linear -> crop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError

# Sampling intervals for the augmentation family.
SCALE_RANGE = (0.1, 0.7)
GAMMA_RANGE = (1.8, 2.6)
GAIN_RANGE = (0.9, 1.1)
OFFSET_FRACTION = 0.2  # |b| <= 0.2 * intensity range of the input image

DEGENERATE_BAND_ENERGY = 1e-8  # below this, the band weight is forced to 1


@dataclass(frozen=True)
class Image:
    """A grayscale image with intensities normalized to [0,1]."""

    pixels: np.ndarray
    modality_id: int = 0

    def __post_init__(self):
        pix = np.asarray(self.pixels)
        if pix.ndim != 2 or pix.shape[0] < 1 or pix.shape[1] < 1:
            raise ConfigError(f"image pixels must be 2-D and non-empty, got shape {pix.shape}")
        if not np.isfinite(pix).all():
            raise ConfigError("image contains non-finite pixels")
        if pix.min() < 0.0 or pix.max() > 1.0:
            raise ConfigError(f"image intensities outside [0,1]: [{pix.min()}, {pix.max()}]")
        object.__setattr__(self, "pixels", np.ascontiguousarray(pix, dtype=np.float32))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class EnergyReference:
    """Per-band reference energy statistics estimated from a reference corpus."""

    band_count: int
    mean_energy: np.ndarray  # (B,)
    sigma: np.ndarray        # (B,) population standard deviation
    region: str = "full"
    corpus_size: int = 0
    modality_id: int = 0


@dataclass(frozen=True)
class AugmentationSpec:
    """The sampled parameters of one draw from the augmentation family.

    ``band_refs=None`` disables the energy stage; ``scale=1.0``, ``gamma=1.0``,
    ``gain=1.0``, ``offset=0.0`` with a full-image crop is the identity.
    """

    scale: float
    gamma: float
    gain: float
    offset: float
    band_refs: tuple[float, ...] | None
    crop_y: int
    crop_x: int
    crop_h: int
    crop_w: int
    seed: int | None = None

    def to_text(self) -> str:
        lines = [
            f"scale={self.scale!r}",
            f"gamma={self.gamma!r}",
            f"gain={self.gain!r}",
            f"offset={self.offset!r}",
            "band_refs=" + ("-" if self.band_refs is None else ",".join(repr(v) for v in self.band_refs)),
            f"crop_y={self.crop_y}",
            f"crop_x={self.crop_x}",
            f"crop_h={self.crop_h}",
            f"crop_w={self.crop_w}",
            f"seed={'-' if self.seed is None else self.seed}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AugmentationSpec":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        try:
            refs = kv["band_refs"]
            return cls(
                scale=float(kv["scale"]),
                gamma=float(kv["gamma"]),
                gain=float(kv["gain"]),
                offset=float(kv["offset"]),
                band_refs=None if refs == "-" else tuple(float(v) for v in refs.split(",")),
                crop_y=int(kv["crop_y"]),
                crop_x=int(kv["crop_x"]),
                crop_h=int(kv["crop_h"]),
                crop_w=int(kv["crop_w"]),
                seed=None if kv.get("seed", "-") == "-" else int(kv["seed"]),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"malformed augmentation spec text: {exc}") from exc


@dataclass(frozen=True)
class MultiCropConfig:
    """Crop counts and sizes for multi-crop view sampling."""

    global_count: int = 2
    global_size: int = 32
    local_count: int = 6
    local_size: int = 16
    assigned: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        if self.global_count < 1 or self.local_count < 0:
            raise ConfigError("need at least one global crop and a nonnegative local count")
        bad = [i for i in self.assigned if not 0 <= i < self.global_count]
        if bad or not self.assigned:
            raise ConfigError(f"assigned indices {self.assigned} must name global crops 0..{self.global_count - 1}")


@dataclass(frozen=True)
class MultiCropViews:
    views: list[Image]
    assigned: tuple[int, ...]
    specs: list[AugmentationSpec] = field(default_factory=list)


# -- Gaussian band decomposition ----------------------------------------------


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(round(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur_axis(pix: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    xp = np.pad(pix, pad, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(xp, len(kernel), axis=axis)
    return np.tensordot(win, kernel, axes=([2], [0]))


def gaussian_blur(pix: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; kernel truncated at 3 sigma."""
    kernel = _gaussian_kernel(sigma)
    out = _blur_axis(pix.astype(np.float64, copy=False), kernel, axis=0)
    out = _blur_axis(out, kernel, axis=1)
    return out.astype(pix.dtype, copy=False)


def band_sigmas(band_count: int) -> list[float]:
    """Blur scales for the band decomposition: 1, 2, 4, ... doubling."""
    return [float(2 ** i) for i in range(band_count)]


def decompose_bands(img, band_count: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Split an image into difference-of-Gaussian bands plus a residual.

    Band i is blur(img, sigma_{i-1}) - blur(img, sigma_i) with sigma_0 = 0
    (the image itself); the residual is the final blur, so the unweighted sum
    of all bands plus the residual telescopes back to the input exactly.
    Bands may be negative, so they are returned as raw arrays, not Images.
    """
    pix = img.pixels if isinstance(img, Image) else np.asarray(img)
    if band_count < 1:
        raise ConfigError(f"band_count must be >= 1, got {band_count}")
    h, w = pix.shape
    if min(h, w) < 4:
        raise ConfigError(f"image {h}x{w} too small to decompose (need at least 4x4)")
    sigmas = band_sigmas(band_count)
    if sigmas[-1] > min(h, w):
        raise ConfigError(
            f"image {h}x{w} too small for {band_count} bands (coarsest scale {sigmas[-1]:g})")
    bands: list[np.ndarray] = []
    prev = pix
    for sigma in sigmas:
        cur = gaussian_blur(pix, sigma)
        bands.append(prev - cur)
        prev = cur
    return bands, prev


def band_energy(band: np.ndarray, region: np.ndarray | None = None) -> float:
    """Brightness dispersion (population standard deviation) over the region."""
    values = np.asarray(band, dtype=np.float64)
    if region is not None:
        values = values[np.asarray(region, dtype=bool)]
    if values.size == 0:
        raise ConfigError("band energy requested over an empty region")
    return float(values.std())


def build_energy_reference(corpus: list[Image], band_count: int) -> EnergyReference:
    """Estimate per-band mean and sigma of energies across a reference corpus."""
    if not corpus:
        raise ConfigError("energy reference needs a non-empty corpus")
    modalities = {img.modality_id for img in corpus}
    if len(modalities) > 1:
        raise ConfigError(f"energy reference corpus mixes modalities {sorted(modalities)}")
    energies = np.empty((len(corpus), band_count), dtype=np.float64)
    for k, img in enumerate(corpus):
        bands, _ = decompose_bands(img, band_count)
        energies[k] = [band_energy(b) for b in bands]
    return EnergyReference(
        band_count=band_count,
        mean_energy=energies.mean(axis=0),
        sigma=energies.std(axis=0),
        corpus_size=len(corpus),
        modality_id=modalities.pop(),
    )


def energy_normalize(img, ref: EnergyReference, sampled_refs) -> Image:
    """Reweight each band by sampled_ref / own energy and recompose.

    Bands with energy below DEGENERATE_BAND_ENERGY keep weight 1 (the ratio is
    undefined at zero dispersion). The recomposed image is clamped to [0,1].
    """
    image = img if isinstance(img, Image) else Image(np.asarray(img))
    refs = np.asarray(sampled_refs, dtype=np.float64)
    if refs.shape != (ref.band_count,):
        raise ConfigError(
            f"sampled_refs has {refs.shape} entries, reference expects {ref.band_count} bands")
    bands, residual = decompose_bands(image, ref.band_count)
    out = residual.astype(np.float64, copy=True)
    for i, band in enumerate(bands):
        e = band_energy(band)
        lam = 1.0 if e < DEGENERATE_BAND_ENERGY else refs[i] / e
        out += lam * band.astype(np.float64)
    return Image(np.clip(out, 0.0, 1.0).astype(np.float32), modality_id=image.modality_id)


# -- geometric and intensity stages -------------------------------------------


def _scaled_dim(size: int, s: float) -> int:
    return max(1, int(math.floor(size * s + 0.5)))


def rescale_bilinear(pix: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; identity when sizes match."""
    h, w = pix.shape
    if (out_h, out_w) == (h, w):
        return pix.copy()
    ys = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    p = pix.astype(np.float64, copy=False)
    top = p[np.ix_(y0, x0)] * (1 - wx) + p[np.ix_(y0, x1)] * wx
    bot = p[np.ix_(y1, x0)] * (1 - wx) + p[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bot * wy).astype(pix.dtype, copy=False)


def sample_spec(img: Image, ref: EnergyReference, crop_size: int,
                rng: np.random.Generator, seed: int | None = None) -> AugmentationSpec:
    """Draw one augmentation spec whose crop is guaranteed to fit.

    The rescale factor is drawn from the sub-interval of SCALE_RANGE whose
    lower end keeps the rescaled image at least crop_size on its short side;
    all other parameters come from their full intervals. Draw order is fixed:
    scale, gamma, gain, offset, band references, crop origin.
    """
    h, w = img.height, img.width
    s_lo = max(SCALE_RANGE[0], crop_size / min(h, w))
    if s_lo > SCALE_RANGE[1]:
        raise GeometryError(
            f"crop {crop_size} cannot fit: {h}x{w} image rescaled by at most {SCALE_RANGE[1]}")
    s = float(rng.uniform(s_lo, SCALE_RANGE[1]))
    gamma = float(rng.uniform(*GAMMA_RANGE))
    gain = float(rng.uniform(*GAIN_RANGE))
    intensity_range = float(img.pixels.max() - img.pixels.min())
    offset = float(rng.uniform(-OFFSET_FRACTION, OFFSET_FRACTION)) * intensity_range
    band_refs = tuple(
        float(ref.mean_energy[i] + ref.sigma[i] * rng.uniform(-1.0, 1.0))
        for i in range(ref.band_count)
    )
    rh, rw = _scaled_dim(h, s), _scaled_dim(w, s)
    crop_y = int(rng.integers(0, rh - crop_size + 1))
    crop_x = int(rng.integers(0, rw - crop_size + 1))
    return AugmentationSpec(scale=s, gamma=gamma, gain=gain, offset=offset,
                            band_refs=band_refs, crop_y=crop_y, crop_x=crop_x,
                            crop_h=crop_size, crop_w=crop_size, seed=seed)


def apply_spec(img: Image, spec: AugmentationSpec, ref: EnergyReference | None = None) -> Image:
    """Apply one spec: rescale, energy renormalization, gamma, linear, crop."""
    pix = img.pixels
    rh, rw = _scaled_dim(img.height, spec.scale), _scaled_dim(img.width, spec.scale)
    pix = rescale_bilinear(pix, rh, rw)
    if spec.band_refs is not None:
        if ref is None:
            raise ConfigError("spec has band references but no energy reference was given")
        pix = energy_normalize(Image(pix, img.modality_id), ref, np.asarray(spec.band_refs)).pixels
    pix = np.power(pix, np.float32(spec.gamma))
    pix = np.clip(np.float32(spec.gain) * pix + np.float32(spec.offset), 0.0, 1.0)
    y2, x2 = spec.crop_y + spec.crop_h, spec.crop_x + spec.crop_w
    if spec.crop_y < 0 or spec.crop_x < 0 or y2 > rh or x2 > rw:
        raise GeometryError(
            f"crop [{spec.crop_y}:{y2}, {spec.crop_x}:{x2}] outside rescaled image {rh}x{rw}")
    return Image(np.ascontiguousarray(pix[spec.crop_y:y2, spec.crop_x:x2]),
                 modality_id=img.modality_id)


def sample_multicrop(img: Image, cfg: MultiCropConfig, ref: EnergyReference,
                     rng: np.random.Generator) -> MultiCropViews:
    """Sample global then local views, each from an independent spec draw."""
    views: list[Image] = []
    specs: list[AugmentationSpec] = []
    for _ in range(cfg.global_count):
        spec = sample_spec(img, ref, cfg.global_size, rng)
        specs.append(spec)
        views.append(apply_spec(img, spec, ref))
    for _ in range(cfg.local_count):
        spec = sample_spec(img, ref, cfg.local_size, rng)
        specs.append(spec)
        views.append(apply_spec(img, spec, ref))
    return MultiCropViews(views=views, assigned=cfg.assigned, specs=specs)
