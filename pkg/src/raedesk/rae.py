"""Frozen representation encoder, trainable token decoder, the composite
reconstruction loss (l1 + perceptual + Gram + pluggable adversarial), the
noise-augmented decoder training trick, and the Frechet feature distance
used as the reconstruction metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import datagen
from .report import ExperimentReport

# Incremented on every decode; lets callers assert a code path stayed
# purely in latent space.
DECODE_CALLS = 0


@dataclass(frozen=True)
class LatentShape:
    num_tokens: int = 16
    token_dim: int = 64

    def __post_init__(self):
        if self.num_tokens < 1 or self.token_dim < 1:
            raise ValueError("latent shape extents must be positive")

    @property
    def effective_dim(self) -> int:
        return self.num_tokens * self.token_dim


@dataclass(frozen=True)
class LossWeights:
    omega_l: float = 1.0    # perceptual
    omega_g: float = 100.0  # Gram
    omega_a: float = 10.0   # adversarial

    def __post_init__(self):
        if min(self.omega_l, self.omega_g, self.omega_a) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class NoiseAugConfig:
    tau: float = 0.2
    enabled: bool = True

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")


# ----------------------------------------------------------------------
# patch plumbing (images are (B, 1, S, S) with S divisible by the patch)


def _grid(size: int, patch: int) -> int:
    if size % patch != 0:
        raise ValueError(f"image size {size} not divisible by patch {patch}")
    return size // patch


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    b, c, h, w = images.shape
    gy, gx = _grid(h, patch), _grid(w, patch)
    x = images.reshape(b, gy, patch, gx, patch)
    return x.transpose(0, 1, 3, 2, 4).reshape(b, gy * gx, patch * patch)


def unpatchify(tokens: np.ndarray, patch: int, size: int) -> np.ndarray:
    b, n, pd = tokens.shape
    g = _grid(size, patch)
    x = tokens.reshape(b, g, g, patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, 1, size, size)


def patchify_t(images: Tensor, patch: int, size: int) -> Tensor:
    b = images.shape[0]
    g = _grid(size, patch)
    x = T.reshape(images, (b, g, patch, g, patch))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (b, g * g, patch * patch))


def unpatchify_t(tokens: Tensor, patch: int, size: int) -> Tensor:
    b = tokens.shape[0]
    g = _grid(size, patch)
    x = T.reshape(tokens, (b, g, g, patch, patch))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (b, 1, size, size))


# ----------------------------------------------------------------------
# frozen encoder


class FrozenEncoder:
    """Deterministic seed-frozen map: patches -> orthogonal projection ->
    tanh. Never receives gradients; doubles as the default perceptual
    feature extractor."""

    def __init__(self, patch: int = 8, token_dim: int = 64,
                 image_size: int = datagen.IMAGE_SIZE, seed: int = 4242,
                 squash: bool = True):
        self.patch = patch
        self.image_size = image_size
        self.squash = squash
        patch_dim = patch * patch
        raw = T.seeded_normal((max(patch_dim, token_dim), max(patch_dim, token_dim)),
                              T.derive_seed(seed, "encoder-projection")).data
        q, _ = np.linalg.qr(raw)
        self.projection = q[:patch_dim, :token_dim].copy()
        self.shape = LatentShape(_grid(image_size, patch) ** 2, token_dim)

    def param_hash(self) -> str:
        import hashlib
        return hashlib.sha256(self.projection.tobytes()).hexdigest()

    def __call__(self, images: np.ndarray) -> np.ndarray:
        z = patchify(np.asarray(images, dtype=np.float64), self.patch) @ self.projection
        return np.tanh(z) if self.squash else z

    def features(self, images: Tensor) -> Tensor:
        """Tape-compatible forward for use inside reconstruction losses."""
        tok = patchify_t(images, self.patch, self.image_size)
        z = T.matmul(tok, Tensor(self.projection))
        return T.tanh(z) if self.squash else z


# ----------------------------------------------------------------------
# decoders


class Decoder:
    """Per-token MLP from latent tokens back to image patches.

    depth counts hidden layers; depth 0 is a single linear map, which can
    exactly invert a linearized encoder.
    """

    def __init__(self, shape: LatentShape, patch: int = 8,
                 image_size: int = datagen.IMAGE_SIZE, hidden: int = 128,
                 depth: int = 1, seed: int = 0):
        self.shape = shape
        self.patch = patch
        self.image_size = image_size
        self.depth = depth
        patch_dim = patch * patch
        dims = [shape.token_dim] + [hidden] * depth + [patch_dim]
        self.params: dict[str, Tensor] = {}
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            wseed = T.derive_seed(seed, "decoder-init", i)
            scale = 1.0 / np.sqrt(din)
            self.params[f"decoder/l{i}/w"] = Tensor(
                scale * T.seeded_normal((din, dout), wseed).data, requires_grad=True)
            self.params[f"decoder/l{i}/b"] = Tensor(
                np.zeros(dout), requires_grad=True)

    def __call__(self, latents) -> Tensor:
        global DECODE_CALLS
        DECODE_CALLS += 1
        x = latents if isinstance(latents, Tensor) else Tensor(latents)
        if x.shape[1:] != (self.shape.num_tokens, self.shape.token_dim):
            raise ValueError(f"latent shape {x.shape[1:]} does not match "
                             f"({self.shape.num_tokens},{self.shape.token_dim})")
        n_layers = self.depth + 1
        for i in range(n_layers):
            x = T.matmul(x, self.params[f"decoder/l{i}/w"]) + self.params[f"decoder/l{i}/b"]
            if i < n_layers - 1:
                x = T.gelu(x)
        return unpatchify_t(x, self.patch, self.image_size)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        for k, p in self.params.items():
            p.data = np.asarray(arrays[k], dtype=np.float64).copy()


class CompressedAutoencoder:
    """Trainable linear autoencoder to a low token dimension; the
    compressed-latent baseline used against the frozen high-dimensional
    encoder."""

    def __init__(self, patch: int = 8, token_dim: int = 4,
                 image_size: int = datagen.IMAGE_SIZE, seed: int = 0):
        self.patch = patch
        self.image_size = image_size
        patch_dim = patch * patch
        self.shape = LatentShape(_grid(image_size, patch) ** 2, token_dim)
        scale = 1.0 / np.sqrt(patch_dim)
        self.enc_w = Tensor(scale * T.seeded_normal(
            (patch_dim, token_dim), T.derive_seed(seed, "cae-enc")).data,
            requires_grad=True)
        self.dec_w = Tensor(scale * T.seeded_normal(
            (token_dim, patch_dim), T.derive_seed(seed, "cae-dec")).data,
            requires_grad=True)
        self.dec_b = Tensor(np.zeros(patch_dim), requires_grad=True)

    def encode(self, images: np.ndarray) -> np.ndarray:
        return patchify(np.asarray(images, dtype=np.float64), self.patch) @ self.enc_w.data

    def decode(self, latents) -> Tensor:
        global DECODE_CALLS
        DECODE_CALLS += 1
        x = latents if isinstance(latents, Tensor) else Tensor(latents)
        x = T.matmul(x, self.dec_w) + self.dec_b
        return unpatchify_t(x, self.patch, self.image_size)

    def parameters(self) -> list[Tensor]:
        return [self.enc_w, self.dec_w, self.dec_b]

    def fit(self, images: np.ndarray, steps: int = 400, lr: float = 1e-2,
            batch: int = 32, seed: int = 0):
        """l1 reconstruction pretraining before any diffusion training."""
        state = T.OptimizerState(self.parameters(), lr=lr)
        g = T.rng(T.derive_seed(seed, "cae-fit"))
        for _ in range(steps):
            idx = g.integers(0, len(images), size=min(batch, len(images)))
            x = images[idx]
            tok = patchify_t(Tensor(x), self.patch, self.image_size)
            z = T.matmul(tok, self.enc_w)
            rec = unpatchify_t(T.matmul(z, self.dec_w) + self.dec_b,
                               self.patch, self.image_size)
            loss = T.tabs(rec - Tensor(x)).mean()
            T.zero_grads(self.parameters())
            loss.backward()
            T.adamw_step(state)
        return self


# ----------------------------------------------------------------------
# losses


def gram_loss(feat_a: Tensor, feat_b: Tensor) -> Tensor:
    """Mean squared Frobenius distance of token Gram matrices F'F/(N*d)."""
    if feat_a.shape != feat_b.shape:
        raise ValueError(f"shape mismatch: {feat_a.shape} vs {feat_b.shape}")
    _, n, d = feat_a.shape
    norm = Tensor(1.0 / (n * d))

    def gram(f):
        return T.matmul(T.transpose(f, (0, 2, 1)), f) * norm

    diff = gram(feat_a) - gram(feat_b)
    return T.square(diff).sum(axis=(-1, -2)).mean()


def zero_adversary(x_hat: Tensor) -> Tensor:
    """Shipped stub for the adversarial term; plug a real critic here."""
    return Tensor(0.0)


def recon_loss(x, x_hat: Tensor, weights: LossWeights,
               feature_extractor, adversary=None):
    """Composite reconstruction loss.

    Returns (total Tensor, breakdown dict of raw per-term floats). The
    weighted sum of the breakdown equals the total exactly.
    """
    x_t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x_t.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x_t.shape} vs {x_hat.shape}")
    adversary = adversary or zero_adversary
    l1 = T.tabs(x_hat - x_t).mean()
    fa = feature_extractor(x_t)
    fb = feature_extractor(x_hat)
    perceptual = T.square(fa - fb).mean()
    gram = gram_loss(fa, fb)
    adv = adversary(x_hat)
    total = (l1 + Tensor(weights.omega_l) * perceptual
             + Tensor(weights.omega_g) * gram + Tensor(weights.omega_a) * adv)
    breakdown = {"l1": l1.item(), "perceptual": perceptual.item(),
                 "gram": gram.item(), "adv": adv.item(), "total": total.item()}
    return total, breakdown


def noise_augment(latents: np.ndarray, cfg: NoiseAugConfig, seed: int) -> np.ndarray:
    """z' = z + sigma * eps with one half-normal sigma per batch element."""
    if not cfg.enabled or cfg.tau == 0.0:
        return np.array(latents, copy=True)
    b = latents.shape[0]
    sigma = half_normal_sigmas(cfg.tau, b, seed)
    eps = T.seeded_normal(latents.shape, T.derive_seed(seed, "noiseaug-eps")).data
    return latents + sigma.reshape((b,) + (1,) * (latents.ndim - 1)) * eps


def half_normal_sigmas(tau: float, count: int, seed: int) -> np.ndarray:
    """|N(0, tau^2)| draws through the shared inverse-CDF normal sampler."""
    draws = T.seeded_normal((count,), T.derive_seed(seed, "noiseaug-sigma")).data
    return tau * np.abs(draws)


# ----------------------------------------------------------------------
# Frechet feature distance


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; negative
    (numerical) eigenvalues clamped at zero."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_feature_distance(set_a: np.ndarray, set_b: np.ndarray,
                             shrinkage: float = 1e-6) -> float:
    """Frechet distance between Gaussians fitted to flattened features."""
    a = np.asarray(set_a, dtype=np.float64).reshape(len(set_a), -1)
    b = np.asarray(set_b, dtype=np.float64).reshape(len(set_b), -1)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    dim = a.shape[1]
    eye = shrinkage * np.eye(dim)
    cov_a = np.cov(a, rowvar=False).reshape(dim, dim) + eye
    cov_b = np.cov(b, rowvar=False).reshape(dim, dim) + eye
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    val = float(((mu_a - mu_b) ** 2).sum()
                + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(val, 0.0)


# ----------------------------------------------------------------------
# decoder training


def train_decoder(encoder: FrozenEncoder, decoder: Decoder,
                  mix: datagen.DomainMix, weights: LossWeights,
                  noise_cfg: NoiseAugConfig, epochs: int, seed: int,
                  config_hash: str = "", samples_per_epoch: int = 128,
                  batch_size: int = 32, lr: float = 5e-4,
                  adv_start_epoch: int = 0, adversary=None,
                  val_per_domain: int = 16) -> ExperimentReport:
    """Optimize the decoder under the composite loss with optional noise
    augmentation; logs per-domain validation l1 once per epoch."""
    report = ExperimentReport(config_hash=config_hash, seed=seed)
    val_sets = {dom: datagen.render_domain_batch(
        dom, val_per_domain, T.derive_seed(seed, "decoder-val", dom))
        for dom in datagen.DOMAINS}

    def log_validation(step: int, epoch: int):
        for dom, imgs in val_sets.items():
            rec = decoder(encoder(imgs)).data
            report.log(step, f"val_l1_{dom}", float(np.abs(rec - imgs).mean()),
                       epoch=epoch)
        combined = float(np.mean([report.last(f"val_l1_{d}") for d in datagen.DOMAINS]))
        report.log(step, "val_l1_combined", combined, epoch=epoch)

    state = T.OptimizerState(decoder.parameters(), lr=lr)
    step = 0
    log_validation(0, 0)
    for epoch in range(epochs):
        images = datagen.render_mixture_batch(
            mix, samples_per_epoch, T.derive_seed(seed, "decoder-epoch", epoch))
        latents = encoder(images)
        order = T.rng(T.derive_seed(seed, "decoder-order", epoch)).permutation(len(images))
        adv = adversary if (adversary is not None and epoch >= adv_start_epoch) else None
        for lo in range(0, len(images), batch_size):
            idx = order[lo:lo + batch_size]
            z = latents[idx]
            if noise_cfg.enabled:
                z = noise_augment(z, noise_cfg, T.derive_seed(seed, "decoder-aug", step))
            x_hat = decoder(z)
            total, breakdown = recon_loss(images[idx], x_hat, weights,
                                          encoder.features, adversary=adv)
            T.zero_grads(decoder.parameters())
            total.backward()
            T.adamw_step(state)
            step += 1
            if step % 10 == 0:
                report.log(step, "train_loss", breakdown["total"], epoch=epoch)
        log_validation(step, epoch + 1)
    return report
