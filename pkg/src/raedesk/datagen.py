"""Synthetic data with analytic ground truth.

Token-space Gaussian mixtures drive the generation experiments (their
log-densities double as oracles); three procedural 32x32 image domains
drive the decoder experiments. All generators are pure functions of
(spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

IMAGE_SIZE = 32

# 16 fixed 8x8 binary glyphs, one row per byte (MSB = leftmost pixel).
GLYPH_ATLAS_HEX = [
    "ff818181818181ff",  # box
    "183c7effff7e3c18",  # diamond
    "1818187e7e181818",  # cross
    "c0c0c0c0c0c0c0ff",  # L
    "ff00ff00ff00ff00",  # stripes horizontal
    "aaaaaaaaaaaaaaaa",  # stripes vertical
    "8040201008040201",  # diagonal
    "0102040810204080",  # anti-diagonal
    "3c4299a1a199423c",  # ring with dots
    "0000183c3c180000",  # dot
    "ffff00000000ffff",  # bands
    "8142241818244281",  # X
    "f0f0f0f00f0f0f0f",  # checker coarse
    "55aa55aa55aa55aa",  # checker fine
    "fe8282fe101010fe",  # figure-8-ish
    "070f1f3f7fffff7f",  # wedge
]


def glyph_atlas() -> np.ndarray:
    """(16, 8, 8) binary glyph masks decoded from the fixed atlas."""
    atlas = np.zeros((16, 8, 8))
    for gi, hx in enumerate(GLYPH_ATLAS_HEX):
        rows = bytes.fromhex(hx)
        for r, byte in enumerate(rows):
            for c in range(8):
                atlas[gi, r, c] = (byte >> (7 - c)) & 1
    return atlas


_ATLAS = glyph_atlas()


# ----------------------------------------------------------------------
# token-space mixtures


@dataclass
class MixtureSpec:
    """Per-condition Gaussian mixture over (num_tokens x token_dim) latents."""

    num_tokens: int
    token_dim: int
    # means[c] has shape (components, N, d); weights[c] sums to 1
    means: list[np.ndarray] = field(default_factory=list)
    stds: list[np.ndarray] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)

    @property
    def num_conditions(self) -> int:
        return len(self.means)

    def validate(self):
        for c in range(self.num_conditions):
            w = self.weights[c]
            if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"condition {c}: weights must be positive, sum 1")
            if np.any(self.stds[c] <= 0):
                raise ValueError(f"condition {c}: stds must be positive")


def default_mixture_spec(num_conditions: int = 4, components: int = 2,
                         num_tokens: int = 8, token_dim: int = 16,
                         std: float = 0.3, prior_seed: int = 7001) -> MixtureSpec:
    """The shipped generation task: means drawn once from a seeded prior."""
    spec = MixtureSpec(num_tokens=num_tokens, token_dim=token_dim)
    for c in range(num_conditions):
        mseed = T.derive_seed(prior_seed, "mixture-mean", c)
        means = T.seeded_normal((components, num_tokens, token_dim), mseed).data
        spec.means.append(means)
        spec.stds.append(np.full(components, std))
        spec.weights.append(np.full(components, 1.0 / components))
    spec.validate()
    return spec


def sample_latents(spec: MixtureSpec, cond_id: int, batch: int, seed: int) -> np.ndarray:
    """IID draws from one condition's mixture; (B, N, d), seed-deterministic."""
    if not 0 <= cond_id < spec.num_conditions:
        raise ValueError(f"condition id {cond_id} out of range")
    g = T.rng(T.derive_seed(seed, "mixture-component", cond_id))
    comps = g.choice(len(spec.weights[cond_id]), size=batch, p=spec.weights[cond_id])
    eps = T.seeded_normal((batch, spec.num_tokens, spec.token_dim),
                          T.derive_seed(seed, "mixture-noise", cond_id)).data
    means = spec.means[cond_id][comps]
    stds = spec.stds[cond_id][comps][:, None, None]
    return means + stds * eps


def mixture_log_density(spec: MixtureSpec, cond_id: int, latents: np.ndarray) -> np.ndarray:
    """Exact per-sample log-density under the condition's mixture."""
    z = latents.reshape(latents.shape[0], -1)
    dim = z.shape[1]
    parts = []
    for w, mu, s in zip(spec.weights[cond_id], spec.means[cond_id], spec.stds[cond_id]):
        d2 = ((z - mu.reshape(-1)) ** 2).sum(axis=1)
        parts.append(np.log(w) - 0.5 * d2 / s ** 2 - dim * np.log(s)
                     - 0.5 * dim * np.log(2 * np.pi))
    stacked = np.stack(parts, axis=0)
    m = stacked.max(axis=0)
    return m + np.log(np.exp(stacked - m).sum(axis=0))


# ----------------------------------------------------------------------
# procedural image domains

DOMAINS = ("smooth", "texture", "glyph")


def render_domain_image(domain: str, seed: int) -> np.ndarray:
    """One (1, 32, 32) image in [0, 1] from the named procedural domain."""
    if domain == "smooth":
        img = _render_smooth(seed)
    elif domain == "texture":
        img = _render_texture(seed)
    elif domain == "glyph":
        img = _render_glyph(seed)
    else:
        raise ValueError(f"unknown domain {domain!r}")
    return img[None, :, :]


def _render_smooth(seed: int) -> np.ndarray:
    # Sum of low-frequency cosine modes, rescaled so the discrete gradient
    # stays below 0.18 and values stay inside [0.1, 0.9].
    g = T.rng(T.derive_seed(seed, "smooth"))
    yy, xx = np.meshgrid(np.arange(IMAGE_SIZE), np.arange(IMAGE_SIZE), indexing="ij")
    raw = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for ky in range(3):
        for kx in range(3):
            if ky == 0 and kx == 0:
                continue
            a, b = g.normal(size=2)
            phase = 2 * np.pi * (ky * yy + kx * xx) / IMAGE_SIZE
            raw += a * np.cos(phase) + b * np.sin(phase)
    raw -= raw.mean()
    grad = max(np.abs(np.diff(raw, axis=0)).max(),
               np.abs(np.diff(raw, axis=1)).max(), 1e-12)
    span = max(np.abs(raw).max(), 1e-12)
    scale = min(0.4 / span, 0.18 / grad)
    return 0.5 + scale * raw


def _render_texture(seed: int) -> np.ndarray:
    # Band-pass filtered white noise: keep an annulus of spatial frequencies.
    g = T.rng(T.derive_seed(seed, "texture"))
    noise = g.normal(size=(IMAGE_SIZE, IMAGE_SIZE))
    f = np.fft.fft2(noise)
    fy = np.fft.fftfreq(IMAGE_SIZE)[:, None]
    fx = np.fft.fftfreq(IMAGE_SIZE)[None, :]
    r = np.sqrt(fy ** 2 + fx ** 2)
    mask = (r >= 0.12) & (r <= 0.30)
    band = np.real(np.fft.ifft2(f * mask))
    band -= band.mean()
    span = max(np.abs(band).max(), 1e-12)
    return 0.5 + 0.45 * band / span


def _render_glyph(seed: int) -> np.ndarray:
    # 4x4 grid of binary glyphs from the fixed atlas; kept binary so the
    # histogram stays bimodal with full contrast.
    g = T.rng(T.derive_seed(seed, "glyph"))
    picks = g.integers(0, 16, size=(4, 4))
    invert = g.integers(0, 2, size=(4, 4))
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for gy in range(4):
        for gx in range(4):
            tile = _ATLAS[picks[gy, gx]]
            if invert[gy, gx]:
                tile = 1.0 - tile
            img[gy * 8:(gy + 1) * 8, gx * 8:(gx + 1) * 8] = tile
    return img


def render_domain_batch(domain: str, count: int, seed: int) -> np.ndarray:
    return np.stack([render_domain_image(domain, T.derive_seed(seed, domain, i))
                     for i in range(count)])


@dataclass(frozen=True)
class DomainMix:
    """Sampling ratios over the three image domains."""

    smooth: float = 1 / 3
    texture: float = 1 / 3
    glyph: float = 1 / 3

    def __post_init__(self):
        vals = (self.smooth, self.texture, self.glyph)
        if any(v < 0 for v in vals):
            raise ValueError("mix ratios must be nonnegative")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError("mix ratios must sum to 1")
        if sum(vals) == 0:
            raise ValueError("mix is empty")

    def as_dict(self):
        return {"smooth": self.smooth, "texture": self.texture, "glyph": self.glyph}


def render_mixture_batch(mix: DomainMix, count: int, seed: int) -> np.ndarray:
    """Images drawn from the domain mixture; (B, 1, 32, 32)."""
    g = T.rng(T.derive_seed(seed, "domain-mix"))
    ratios = mix.as_dict()
    names = list(ratios)
    probs = np.array([ratios[n] for n in names])
    picks = g.choice(len(names), size=count, p=probs)
    return np.stack([
        render_domain_image(names[picks[i]], T.derive_seed(seed, "mix-img", i))
        for i in range(count)])


# ----------------------------------------------------------------------
# sliced Wasserstein


def sliced_wasserstein(set_a: np.ndarray, set_b: np.ndarray,
                       projections: int = 128, seed: int = 0) -> float:
    """Mean 1-D 2-Wasserstein distance over seeded random unit directions.

    Samples are flattened per element; unequal sample counts are compared
    on a common quantile grid.
    """
    if projections < 1:
        raise ValueError("need at least one projection")
    a = np.asarray(set_a, dtype=np.float64).reshape(len(set_a), -1)
    b = np.asarray(set_b, dtype=np.float64).reshape(len(set_b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sample set")
    dim = a.shape[1]
    g = T.rng(T.derive_seed(seed, "sw-projections"))
    dirs = g.normal(size=(projections, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = a @ dirs.T  # (Na, P)
    pb = b @ dirs.T
    if len(a) == len(b):
        qa = np.sort(pa, axis=0)
        qb = np.sort(pb, axis=0)
    else:
        qs = (np.arange(max(len(a), len(b))) + 0.5) / max(len(a), len(b))
        qa = np.quantile(pa, qs, axis=0)
        qb = np.quantile(pb, qs, axis=0)
    w2 = np.sqrt(np.mean((qa - qb) ** 2, axis=0))
    return float(w2.mean())
