"""Adaptive Compression Model: a feature-domain, band-adaptive compression defense.

Pipeline::

    F = extract(x)                          3 convs, 3 -> c -> c -> c
    LL, LH, HL, HH = dwt2(F)
    high band b:  rec_b(tanh(com_b(F_b) [+ noise while training]))
    LL:           up2(rec_LL(down2(F_LL)))
    out = conv(idwt2(...))                  c -> 3, clipped to [0, 1] at inference

Each high band has its own compressor/reconstructor so bands can be
toggled independently; a disabled band passes through unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from advlab import checkpoint
from advlab.data import Dataset, batch_indices
from advlab.nn import Model, fit
from advlab.rng import derive_seed, make_rng
from advlab.tensor import (
    AdamState,
    Tensor,
    clip,
    gaussian_noise,
    l1_loss,
    no_grad,
    relu,
    resample,
    tanh,
)
from advlab.wavelet import BANDS, HIGH_BANDS, SubBands, dwt2, idwt2


@dataclass
class AcmConfig:
    feature_channels: int = 32
    compressed_channels: int = 5
    noise_sigma: float = 0.5
    band_enabled: dict = field(default_factory=lambda: {b: True for b in ("HH", "HL", "LH", "LL")})
    lr: float = 2e-4
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_halving_interval: int = 20000
    total_steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.compressed_channels < self.feature_channels:
            raise ValueError("need 1 <= compressed_channels < feature_channels")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        enabled = {b: True for b in BANDS}
        enabled.update({k: bool(v) for k, v in self.band_enabled.items()})
        if set(enabled) != set(BANDS):
            raise ValueError(f"band_enabled keys must be {BANDS}")
        self.band_enabled = enabled

    def lr_at(self, step: int) -> float:
        return self.lr * 0.5 ** (step // self.lr_halving_interval)


class AcmModel(Model):
    def __init__(self, cfg: AcmConfig | None = None, seed: int | None = None, ll_identity_init: bool = False):
        super().__init__()
        self.cfg = cfg = cfg or AcmConfig()
        base = cfg.seed if seed is None else seed
        c, k = cfg.feature_channels, cfg.compressed_channels
        # one stream per layer so toggling a band leaves the others' weights alone
        layers = [("extract0", 3, c), ("extract1", c, c), ("extract2", c, c)]
        for b in HIGH_BANDS:
            if cfg.band_enabled[b]:
                layers += [(f"{b}.com", c, k), (f"{b}.rec0", k, c), (f"{b}.rec1", c, c)]
        if cfg.band_enabled["LL"]:
            layers += [("LL.rec0", c, c), ("LL.rec1", c, c)]
        layers.append(("out", c, 3))
        for name, cin, cout in layers:
            self.add_conv(name, cin, cout, 3, make_rng(derive_seed(base, "acm-init", name)))
        if cfg.band_enabled["LL"] and ll_identity_init:
            eye = np.zeros((c, c, 3, 3), dtype=self.params["LL.rec0.weight"].data.dtype)
            eye[np.arange(c), np.arange(c), 1, 1] = 1.0
            for name in ("LL.rec0", "LL.rec1"):
                self.params[f"{name}.weight"].data = eye.copy()

    @property
    def fingerprint(self) -> str:
        c = self.cfg
        on = ",".join(b for b in BANDS if c.band_enabled[b])
        return f"ACM-v1;c={c.feature_channels};k={c.compressed_channels};bands={on}"

    def __call__(self, x) -> Tensor:
        """Inference-mode reconstruction (noise off, output clipped)."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        return acm_forward(self, x, training=False)


def _check_even(x: Tensor) -> None:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"ACM needs even spatial dims, got {h}x{w}")


def extract_features(model: AcmModel, x: Tensor) -> Tensor:
    _check_even(x)
    f = relu(model.conv("extract0", x))
    f = relu(model.conv("extract1", f))
    return model.conv("extract2", f)


def compress_high_band(
    model: AcmModel, f_band: Tensor, band: str, training: bool = False, seed: int = 0, taps: dict | None = None
) -> Tensor:
    """Channel-wise bottleneck ``rec(tanh(com(F_b) + noise))``; identity when disabled."""
    if band not in HIGH_BANDS:
        raise ValueError(f"{band!r} is not a high-frequency band")
    if not model.cfg.band_enabled[band]:
        return f_band
    z = model.conv(f"{band}.com", f_band)
    if training and model.cfg.noise_sigma > 0:
        z = gaussian_noise(z, model.cfg.noise_sigma, seed)
    code = tanh(z)
    if taps is not None:
        taps[f"{band}.code"] = code
    out = model.conv(f"{band}.rec1", relu(model.conv(f"{band}.rec0", code)))
    if taps is not None:
        taps[band] = out
    return out


def compress_ll_band(model: AcmModel, f_ll: Tensor, taps: dict | None = None) -> Tensor:
    """Spatial compression ``up2(rec(down2(F_LL)))``; identity when disabled."""
    if not model.cfg.band_enabled["LL"]:
        return f_ll
    _check_even(f_ll)
    z = resample(f_ll, "down2")
    z = model.conv("LL.rec1", relu(model.conv("LL.rec0", z)))
    out = resample(z, "up2")
    if taps is not None:
        taps["LL"] = out
    return out


def acm_forward(model: AcmModel, x: Tensor, training: bool = False, seed: int = 0, taps: dict | None = None) -> Tensor:
    """Full reconstruction. Unclipped while training so gradients reach every pixel."""
    feats = extract_features(model, x)
    bands = dwt2(feats)
    new = {
        b: compress_high_band(model, bands[b], b, training, derive_seed(seed, "noise", b), taps)
        for b in HIGH_BANDS
    }
    new["LL"] = compress_ll_band(model, bands.LL, taps)
    out = model.conv("out", idwt2(SubBands(**new)))
    return out if training else clip(out, 0.0, 1.0)


def train_acm(model: AcmModel, ds: Dataset, cfg: AcmConfig | None = None) -> tuple[AcmModel, list[float]]:
    """Reconstruct benign images under L1 with train-time noise; lr halves every interval."""
    cfg = cfg or model.cfg
    steps_per_epoch = math.ceil(len(ds) / cfg.batch_size)
    epochs = math.ceil(cfg.total_steps / steps_per_epoch)

    def batches(epoch):
        idx = batch_indices(len(ds), cfg.batch_size, derive_seed(cfg.seed, "acm-epoch", epoch))
        return [(ds.images[i], None) for i in idx]

    def loss_fn(xb, _, step):
        x = Tensor(xb)
        return l1_loss(acm_forward(model, x, training=True, seed=derive_seed(cfg.seed, "acm-step", step)), x)

    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    trace = fit(model.parameters(), loss_fn, batches, epochs, adam, lr_schedule=cfg.lr_at, max_steps=cfg.total_steps)
    return model, trace


def defend_predict(classifier, model: AcmModel | None, x) -> Tensor:
    """Classifier logits on the ACM reconstruction (identity when ``model`` is None)."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    return classifier(x if model is None else acm_forward(model, x, training=False))


def tanh_activations(model: AcmModel, batch: np.ndarray, training: bool = False, seed: int = 0) -> np.ndarray:
    taps: dict = {}
    with no_grad():
        acm_forward(model, Tensor(np.asarray(batch, dtype=np.float32)), training, seed, taps)
    codes = [taps[f"{b}.code"].data.ravel() for b in HIGH_BANDS if f"{b}.code" in taps]
    return np.concatenate(codes) if codes else np.zeros(0, dtype=np.float32)


def tanh_histogram(model: AcmModel, batch: np.ndarray, training: bool = False, bins: int = 20, seed: int = 0) -> np.ndarray:
    """Counts of post-tanh bottleneck activations over ``bins`` equal bins of [-1, 1]."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    acts = tanh_activations(model, batch, training, seed)
    counts, _ = np.histogram(acts, bins=bins, range=(-1.0, 1.0))
    return counts


def saturation_fraction(model: AcmModel, batch: np.ndarray, threshold: float = 0.9) -> float:
    acts = tanh_activations(model, batch)
    return float(np.mean(np.abs(acts) > threshold)) if acts.size else 0.0


def save_acm(model: AcmModel, path) -> None:
    checkpoint.save_params(model, path)


def load_acm(path, cfg: AcmConfig) -> AcmModel:
    return checkpoint.load_params(AcmModel(cfg, 0), path)
