"""Perturbation surgery: edit a known perturbation and measure what is left of the attack.

All operations assume full knowledge of ``eta = x_star - x`` and return a
modified classifier input. Random selections are drawn as prefixes of one
seeded permutation, so a larger ratio always removes a superset of the
positions removed by a smaller ratio under the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from advlab.attacks import AdversarialExample
from advlab.data import Dataset, batch_indices
from advlab.nn import Model, fit
from advlab.rng import derive_seed, make_rng
from advlab.tensor import AdamState, Tensor, l1_loss, no_grad, relu
from advlab.wavelet import BANDS, dwt2, idwt2, zero_bands

DOMAINS = ("spatial_random", "spatial_patch", "frequency", "latent_channel", "latent_spatial", "gaussian_control")


@dataclass
class SurgerySpec:
    domain: str
    ratio: float = 0.0
    band_mask: frozenset = field(default_factory=frozenset)
    patch_side: int = 4
    sigma: float = 8 / 255
    seed: int = 0

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown surgery domain {self.domain!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in [0, 1], got {self.ratio}")
        if self.patch_side < 1:
            raise ValueError("patch_side must be >= 1")
        self.band_mask = frozenset(self.band_mask)
        unknown = self.band_mask - set(BANDS)
        if unknown:
            raise ValueError(f"unknown bands {sorted(unknown)}")


def _removal_mask(count: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask with exactly round(ratio * count) True entries (a permutation prefix)."""
    k = int(round(ratio * count))
    mask = np.zeros(count, dtype=bool)
    mask[rng.permutation(count)[:k]] = True
    return mask


def spatial_keep_mask(shape: tuple, ratio: float, seed: int, mode: str = "element", patch_side: int = 4) -> np.ndarray:
    """Per-example boolean mask of the eta entries that survive removal."""
    n, c, h, w = shape
    keep = np.ones(shape, dtype=bool)
    if mode == "element":
        count = c * h * w
        for i in range(n):
            rng = make_rng(derive_seed(seed, "spatial", i))
            keep[i] = ~_removal_mask(count, ratio, rng).reshape(c, h, w)
    elif mode == "patch":
        if h % patch_side or w % patch_side:
            raise ValueError(f"patch_side {patch_side} does not divide {h}x{w}")
        gh, gw = h // patch_side, w // patch_side
        for i in range(n):
            rng = make_rng(derive_seed(seed, "patch", i))
            grid = _removal_mask(gh * gw, ratio, rng).reshape(gh, gw)
            full = np.repeat(np.repeat(grid, patch_side, axis=0), patch_side, axis=1)
            keep[i] = ~full[None]
    else:
        raise ValueError(f"unknown spatial mode {mode!r}")
    return keep


def remove_spatial_fraction(
    pair: AdversarialExample, ratio: float, seed: int, mode: str = "element", patch_side: int = 4
) -> np.ndarray:
    """Zero a random fraction of eta (per scalar, or per patch across channels)."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    keep = spatial_keep_mask(pair.x.shape, ratio, seed, mode, patch_side)
    # where eta is kept use x_star itself so ratio 0 reproduces x_star bit-exactly
    return np.clip(np.where(keep, pair.x_star, pair.x), 0.0, 1.0)


def gaussian_control(x: np.ndarray, ratio: float, sigma: float, seed: int) -> np.ndarray:
    """Add N(0, sigma^2) noise at a random ``ratio`` of the scalar positions of benign ``x``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float32)
    if sigma == 0 or ratio == 0:
        return x.copy()
    hit = ~spatial_keep_mask(x.shape, ratio, derive_seed(seed, "gauss-mask"))
    noise = make_rng(derive_seed(seed, "gauss-noise")).normal(0.0, sigma, size=x.shape).astype(np.float32)
    return np.clip(np.where(hit, x + noise, x), 0.0, 1.0)


def filtered_perturbation(eta: np.ndarray, band_mask: Iterable[str]) -> np.ndarray:
    """``idwt2(zero_bands(dwt2(eta), mask))``."""
    with no_grad():
        return idwt2(zero_bands(dwt2(Tensor(eta)), band_mask)).data


def remove_frequency_bands(pair: AdversarialExample, band_mask: Iterable[str]) -> np.ndarray:
    eta = filtered_perturbation(pair.eta, band_mask)
    return np.clip(pair.x + eta, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Latent space
# ---------------------------------------------------------------------------


class Autoencoder(Model):
    """Size-preserving conv autoencoder: encoder 3->32->32->32->32, mirrored decoder."""

    fingerprint = "AE-v1;latent=32"
    latent_channels = 32

    def __init__(self, seed: int = 0, width: int = 32):
        super().__init__()
        rng = make_rng(seed)
        chans = [3, width, width, width, width]
        for i in range(4):
            self.add_conv(f"enc{i}", chans[i], chans[i + 1], 3, rng)
        dec = [width, width, width, width, 3]
        for i in range(4):
            self.add_conv(f"dec{i}", dec[i], dec[i + 1], 3, rng)
        self.latent_channels = width
        self.fingerprint = f"AE-v1;latent={width}"

    def encode(self, x: Tensor) -> Tensor:
        for i in range(4):
            x = relu(self.conv(f"enc{i}", x))
        return x

    def decode(self, z: Tensor) -> Tensor:
        for i in range(3):
            z = relu(self.conv(f"dec{i}", z))
        return self.conv("dec3", z)

    def __call__(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


def train_autoencoder(
    ds: Dataset, epochs: int, lr: float, seed: int, batch_size: int = 32, max_steps: int | None = None
) -> tuple[Autoencoder, list[float]]:
    """Fit ``D(E(x)) ~ x`` under L1 on benign images."""
    ae = Autoencoder(seed)

    def batches(epoch):
        return [(ds.images[i], None) for i in batch_indices(len(ds), batch_size, derive_seed(seed, "ae-epoch", epoch))]

    def loss_fn(xb, _, step):
        x = Tensor(xb)
        return l1_loss(ae(x), x)

    trace = fit(ae.parameters(), loss_fn, batches, epochs, AdamState(lr=lr), max_steps=max_steps)
    return ae, trace


def _encode(ae: Autoencoder, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return ae.encode(Tensor(np.asarray(x, dtype=np.float32))).data


def _decode(ae: Autoencoder, z: np.ndarray) -> np.ndarray:
    with no_grad():
        return np.clip(ae.decode(Tensor(z)).data, 0.0, 1.0)


def latent_eta(ae: Autoencoder, pair: AdversarialExample) -> np.ndarray:
    """``E(x_star) - E(x)`` with shape [N, 32, H, W]."""
    return _encode(ae, pair.x_star) - _encode(ae, pair.x)


def latent_keep_mask(shape: tuple, ratio: float, mode: str, seed: int) -> np.ndarray:
    n, c, h, w = shape
    keep = np.ones(shape, dtype=bool)
    for i in range(n):
        rng = make_rng(derive_seed(seed, "latent", mode, i))
        if mode == "channel":
            keep[i] = ~_removal_mask(c, ratio, rng)[:, None, None]
        elif mode == "spatial":
            keep[i] = ~_removal_mask(h * w, ratio, rng).reshape(1, h, w)
        else:
            raise ValueError(f"unknown latent mode {mode!r}")
    return keep


def latent_ablate(ae: Autoencoder, pair: AdversarialExample, ratio: float, mode: str, seed: int, return_eta: bool = False):
    """Decode ``E(x) + eta_latent`` with a random fraction of eta_latent zeroed.

    Zeroed entries take E(x), kept ones E(x_star), so the extreme ratios
    reproduce D(E(x)) and D(E(x_star)) exactly.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    z_clean = _encode(ae, pair.x)
    z_adv = _encode(ae, pair.x_star)
    keep = latent_keep_mask(z_clean.shape, ratio, mode, seed)
    z = np.where(keep, z_adv, z_clean)
    out = _decode(ae, z)
    if return_eta:
        return out, np.where(keep, z_adv - z_clean, 0.0)
    return out


def apply_surgery(spec: SurgerySpec, pair: AdversarialExample, ae: Autoencoder | None = None) -> np.ndarray:
    """Dispatch a :class:`SurgerySpec` to the matching operation."""
    if spec.domain == "spatial_random":
        return remove_spatial_fraction(pair, spec.ratio, spec.seed, "element")
    if spec.domain == "spatial_patch":
        return remove_spatial_fraction(pair, spec.ratio, spec.seed, "patch", spec.patch_side)
    if spec.domain == "frequency":
        return remove_frequency_bands(pair, spec.band_mask)
    if spec.domain == "gaussian_control":
        return gaussian_control(pair.x, spec.ratio, spec.sigma, spec.seed)
    if ae is None:
        raise ValueError(f"{spec.domain} surgery needs a trained autoencoder")
    mode = "channel" if spec.domain == "latent_channel" else "spatial"
    return latent_ablate(ae, pair, spec.ratio, mode, spec.seed)
