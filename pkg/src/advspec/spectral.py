"""2D discrete Fourier transform and magnitude/phase feature extraction.

Features come in two flavours: per-channel spectra of the input image, or
spectra of network feature maps tapped at chosen activation layers. Both are
flattened into one float64 vector per sample. A frequency-band mask can
restrict input-level features to a square ring around the DC coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import model as model_mod
from .nn import as_f64

MFS = "mfs"  # magnitude spectrum
PFS = "pfs"  # phase spectrum


def _check_mode(mode: str) -> str:
    m = mode.lower()
    if m not in (MFS, PFS):
        raise ValueError(f"mode must be 'mfs' or 'pfs', got {mode!r}")
    return m


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def dft2(channel: np.ndarray) -> np.ndarray:
    """2D DFT of one square channel: F(l,k) = sum_mn exp(-2*pi*i(lm+kn)/N) X(m,n).

    Returns the complex coefficient grid (row index l pairs with image rows).
    """
    channel = as_f64(channel)
    if channel.ndim != 2 or channel.shape[0] != channel.shape[1]:
        raise ValueError(f"channel must be square 2D, got shape {channel.shape}")
    return np.fft.fft2(channel)


def spectrum(image: np.ndarray) -> np.ndarray:
    """Per-channel dft2 of a [C,N,N] image -> complex [C,N,N]."""
    image = as_f64(image)
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise ValueError(f"image must be [C,N,N], got shape {image.shape}")
    return np.fft.fft2(image, axes=(-2, -1))


def magnitude(spec: np.ndarray) -> np.ndarray:
    """Elementwise sqrt(Re^2 + Im^2)."""
    return np.abs(spec)


def phase(spec: np.ndarray) -> np.ndarray:
    """Quadrant-aware angle in (-pi, pi]; a zero coefficient has phase 0."""
    return np.angle(spec)


def _spectral_values(spec: np.ndarray, mode: str) -> np.ndarray:
    return magnitude(spec) if mode == MFS else phase(spec)


# ---------------------------------------------------------------------------
# feature vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrequencyBand:
    """Half-open ring [lo, hi) of centered Chebyshev distance to DC.

    The per-axis distance is twice the wrap-around bin distance, so the index
    scale runs 0 (DC) .. N (Nyquist); bands taken from a {0, 8, .., N} grid
    partition the coefficients exactly.
    """
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo < 0 or self.hi <= self.lo:
            raise ValueError(f"need 0 <= lo < hi, got ({self.lo}, {self.hi})")


@dataclass(frozen=True)
class FeatureDescriptor:
    mode: str                       # "mfs" | "pfs"
    source: str                     # "input" | "layers"
    layer_ordinals: tuple[int, ...] = ()
    layer_shapes: tuple[tuple[int, int], ...] = ()  # (channels, side) per ordinal
    channels: int = 0               # input mode
    side: int = 0                   # input mode: N
    band: tuple[int, int] | None = None


@dataclass
class FeatureVector:
    values: np.ndarray
    descriptor: FeatureDescriptor


def extract_input_features(image: np.ndarray, mode: str) -> FeatureVector:
    """Flattened per-channel magnitude or phase spectrum of one [C,N,N] image."""
    mode = _check_mode(mode)
    spec = spectrum(image)
    desc = FeatureDescriptor(mode=mode, source="input",
                             channels=spec.shape[0], side=spec.shape[1])
    return FeatureVector(values=_spectral_values(spec, mode).ravel(), descriptor=desc)


def extract_input_features_batch(images: np.ndarray, mode: str) -> np.ndarray:
    """[B,C,N,N] -> [B, C*N*N] feature matrix."""
    mode = _check_mode(mode)
    images = as_f64(images)
    spec = np.fft.fft2(images, axes=(-2, -1))
    return _spectral_values(spec, mode).reshape(len(images), -1)


def input_descriptor(channels: int, side: int, mode: str) -> FeatureDescriptor:
    return FeatureDescriptor(mode=_check_mode(mode), source="input",
                             channels=channels, side=side)


def _as_square_maps(activation: np.ndarray, batched: bool) -> np.ndarray:
    """Canonicalize an activation to [(B,)C,side,side].

    Vector activations (hidden dense layer) become channels of 1x1 maps whose
    spectrum is the value itself.
    """
    spatial = activation.ndim - (1 if batched else 0)
    if spatial == 1:
        return activation[..., None, None]
    if spatial == 3:
        if activation.shape[-2] != activation.shape[-1]:
            raise ValueError(f"feature map {activation.shape} is not square")
        return activation
    raise ValueError(f"cannot take a 2D spectrum of activation shape {activation.shape}")


def extract_layer_features(params, image: np.ndarray, activation_ordinals, mode: str) -> FeatureVector:
    """Concatenated spectra of the tapped feature maps, in ordinal order."""
    mode = _check_mode(mode)
    ordinals = tuple(activation_ordinals)
    maps = model_mod.feature_maps(params, image, ordinals)
    parts = []
    shapes = []
    for fmap in maps:
        fmap = _as_square_maps(fmap, batched=False)
        shapes.append((fmap.shape[0], fmap.shape[1]))
        spec = np.fft.fft2(fmap, axes=(-2, -1))
        parts.append(_spectral_values(spec, mode).ravel())
    desc = FeatureDescriptor(mode=mode, source="layers", layer_ordinals=ordinals,
                             layer_shapes=tuple(shapes))
    return FeatureVector(values=np.concatenate(parts), descriptor=desc)


def extract_layer_features_batch(params, images: np.ndarray, activation_ordinals,
                                 mode: str, chunk: int = 256) -> np.ndarray:
    """[B,C,N,N] images -> [B, sum_l C_l*side_l^2] layer-spectrum matrix."""
    mode = _check_mode(mode)
    ordinals = tuple(activation_ordinals)
    rows = []
    for lo in range(0, len(images), chunk):
        batch = images[lo:lo + chunk]
        maps = model_mod.feature_maps_batch(params, batch, ordinals)
        parts = []
        for fmap in maps:
            fmap = _as_square_maps(fmap, batched=True)
            spec = np.fft.fft2(fmap, axes=(-2, -1))
            parts.append(_spectral_values(spec, mode).reshape(len(batch), -1))
        rows.append(np.concatenate(parts, axis=1))
    return np.concatenate(rows, axis=0)


def layers_descriptor(params, activation_ordinals, mode: str) -> FeatureDescriptor:
    ordinals = tuple(activation_ordinals)
    c, h, w = params.config.input_shape
    shapes = []
    # derive (channels, side) per ordinal from the architecture
    per_ordinal = {0: (c, h)}
    ordinal = 1
    side = h
    for c_out, n_layers in params.config.conv_blocks:
        for _ in range(n_layers):
            per_ordinal[ordinal] = (c_out, side)
            ordinal += 1
        side //= 2
    per_ordinal[ordinal] = (params.config.hidden_units, 1)
    for o in ordinals:
        if o not in per_ordinal:
            raise ValueError(f"activation ordinal {o} unknown")
        shapes.append(per_ordinal[o])
    return FeatureDescriptor(mode=_check_mode(mode), source="layers",
                             layer_ordinals=ordinals, layer_shapes=tuple(shapes))


# ---------------------------------------------------------------------------
# frequency-band masking
# ---------------------------------------------------------------------------

def band_distances(side: int) -> np.ndarray:
    """Ring index of every raw-order DFT coefficient of an N x N grid.

    Per axis the distance to DC is the wrap-around bin distance doubled
    (DC -> 0, Nyquist -> N); the ring index is the max over both axes,
    clipped to N-1 so that hi = N keeps the Nyquist ring selectable.
    """
    idx = np.arange(side)
    wrap = np.minimum(idx, side - idx)
    d = 2 * np.maximum(wrap[:, None], wrap[None, :])
    return np.minimum(d, side - 1)


def band_mask(side: int, band: FrequencyBand) -> np.ndarray:
    if band.hi > side:
        raise ValueError(f"band {band.lo, band.hi} outside [0, {side}]")
    d = band_distances(side)
    return (d >= band.lo) & (d < band.hi)


def apply_band(features: FeatureVector, band: FrequencyBand) -> FeatureVector:
    """Keep only input-level coefficients whose ring index is in [lo, hi)."""
    desc = features.descriptor
    if desc.source != "input":
        raise ValueError("band masking applies to input-level features only")
    mask = band_mask(desc.side, band)
    keep = np.tile(mask.ravel(), desc.channels)
    return FeatureVector(values=features.values[keep],
                         descriptor=replace(desc, band=(band.lo, band.hi)))


def apply_band_matrix(features: np.ndarray, channels: int, side: int,
                      band: FrequencyBand) -> np.ndarray:
    """Band-mask a [B, C*N*N] input-feature matrix."""
    mask = band_mask(side, band)
    return features[:, np.tile(mask.ravel(), channels)]
