"""Procedural equirectangular frames so the pipeline runs without external data."""

from __future__ import annotations

import numpy as np

from fimesh.resample import EquirectImage, pixel_directions

PATTERNS = ("noise", "checker", "gradient", "mixed")


def band_limited_noise(rng: np.random.Generator, width: int, n_waves: int = 24,
                       max_freq: float = 12.0) -> np.ndarray:
    """Sum of random 3-D plane waves evaluated on the sphere, rescaled to [0, 1].

    Being a function of xyz, the field is seamless across the date line and
    the poles.
    """
    d = pixel_directions(width, width // 2)
    dirs = rng.normal(size=(n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    freqs = rng.uniform(1.0, max_freq, n_waves)
    amps = 1.0 / freqs
    phases = rng.uniform(0.0, 2.0 * np.pi, n_waves)
    field = np.einsum("hwc,kc->hwk", d, dirs * freqs[:, None]) + phases
    v = (np.sin(field) * amps).sum(axis=2)
    v -= v.min()
    return v / max(v.max(), 1e-12)


def checkerboard(width: int, cells_lon: int = 16, cells_lat: int = 8, phase: float = 0.0) -> np.ndarray:
    h = width // 2
    x = (np.arange(width) + 0.5) / width * cells_lon + phase
    y = (np.arange(h) + 0.5) / h * cells_lat
    return ((np.floor(x)[None, :] + np.floor(y)[:, None]) % 2).astype(np.float64)


def gradient(width: int, angle: float = 0.0) -> np.ndarray:
    h = width // 2
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(h) + 0.5) / h
    g = np.cos(angle) * u[None, :] + np.sin(angle) * v[:, None]
    g -= g.min()
    return g / max(g.max(), 1e-12)


def synth_frame(rng: np.random.Generator, width: int, pattern: str = "mixed",
                channels: int = 3) -> EquirectImage:
    if pattern not in PATTERNS:
        raise ValueError(f"pattern must be one of {PATTERNS}")
    planes = []
    for _ in range(channels):
        if pattern == "noise":
            p = band_limited_noise(rng, width)
        elif pattern == "checker":
            p = checkerboard(width, int(rng.integers(4, 24)) * 2, int(rng.integers(2, 12)),
                             rng.uniform())
        elif pattern == "gradient":
            p = gradient(width, rng.uniform(0, 2 * np.pi))
        else:
            w = rng.dirichlet([2.0, 1.0, 1.0])
            p = (w[0] * band_limited_noise(rng, width)
                 + w[1] * checkerboard(width, int(rng.integers(4, 24)) * 2,
                                       int(rng.integers(2, 12)), rng.uniform())
                 + w[2] * gradient(width, rng.uniform(0, 2 * np.pi)))
        planes.append(p)
    return EquirectImage(np.clip(np.stack(planes, axis=2), 0.0, 1.0))
