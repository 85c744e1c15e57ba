"""Conditional DDPM shape completion.

Occupancy is encoded as -1 (empty) / +1 (occupied) inside the model. The
denoiser is a small 3D U-Net (main branch) plus a control branch with the
same encoder/middle layout and its own weights; control features pass
through projection convolutions and are added voxel-wise to the main
branch's skip and middle activations before decoding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn import ModelParams, load_state, model_params, seeded_init

log = logging.getLogger(__name__)

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "forward_sample",
    "Denoiser",
    "predict_noise",
    "train_step",
    "train_completion",
    "reverse_sample",
    "finalize_shape",
    "to_model_range",
    "denoiser_from_params",
]


@dataclass
class NoiseSchedule:
    beta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if not np.all((self.beta > 0) & (self.beta < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        self.alpha_bar_prev = prev
        self.sigma = np.sqrt(self.beta * (1 - prev) / (1 - self.alpha_bar))

    @property
    def T(self) -> int:
        return len(self.beta)


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def to_model_range(chi):
    return 2.0 * np.asarray(chi, dtype=float) - 1.0


def forward_sample(chi_0, t: int, schedule: NoiseSchedule, noise):
    """Closed-form q(chi_t | chi_0) draw for 1 <= t <= T."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    ab = schedule.alpha_bar[t - 1]
    return math.sqrt(ab) * chi_0 + math.sqrt(1 - ab) * noise


# --- denoiser ----------------------------------------------------------------

def _groups(c):
    return 4 if c % 4 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.temb = nn.Linear(temb, cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.temb(emb)[:, :, None, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class Encoder(nn.Module):
    """in-conv, two resolution levels, middle block."""

    def __init__(self, c1, c2, temb):
        super().__init__()
        self.inp = nn.Conv3d(1, c1, 3, padding=1)
        self.enc1 = ResBlock(c1, c1, temb)
        self.down1 = nn.Conv3d(c1, c1, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c1, c2, temb)
        self.down2 = nn.Conv3d(c2, c2, 3, stride=2, padding=1)
        self.mid = ResBlock(c2, c2, temb)

    def forward(self, x, emb):
        h1 = self.enc1(self.inp(x), emb)
        h2 = self.enc2(self.down1(h1), emb)
        m = self.mid(self.down2(h2), emb)
        return h1, h2, m


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class Denoiser(nn.Module):
    def __init__(self, widths=(8, 16), temb_dim=32, seed: int = 0):
        super().__init__()
        c1, c2 = widths
        self.widths = (c1, c2)
        self.temb_dim = temb_dim
        self.time = nn.Sequential(nn.Linear(temb_dim, 2 * temb_dim), nn.SiLU(),
                                  nn.Linear(2 * temb_dim, 2 * temb_dim))
        emb = 2 * temb_dim
        self.main = Encoder(c1, c2, emb)
        self.control = Encoder(c1, c2, emb)
        self.proj1 = nn.Conv3d(c1, c1, 1)
        self.proj2 = nn.Conv3d(c2, c2, 1)
        self.proj_mid = nn.Conv3d(c2, c2, 1)
        self.up2 = nn.ConvTranspose3d(c2, c2, 2, stride=2)
        self.dec2 = ResBlock(2 * c2, c2, emb)
        self.up1 = nn.ConvTranspose3d(c2, c2, 2, stride=2)
        self.dec1 = ResBlock(c2 + c1, c1, emb)
        self.out_norm = nn.GroupNorm(_groups(c1), c1)
        self.out = nn.Conv3d(c1, 1, 3, padding=1)
        seeded_init(self, seed)

    def projections(self):
        return [self.proj1, self.proj2, self.proj_mid]

    @property
    def topology(self) -> dict:
        return {"kind": "denoiser", "widths": list(self.widths), "temb_dim": self.temb_dim}

    def forward(self, x, t, cond):
        """x, cond: (B, 1, X, Y, Z); t: (B,) integer steps in [1, T].

        Grids whose sides are not multiples of 4 are zero-padded at the high
        end for the two stride-2 levels and cropped back afterwards.
        """
        size = x.shape[2:]
        pad = [(-s) % 4 for s in size]
        if any(pad):
            spec = [0, pad[2], 0, pad[1], 0, pad[0]]
            x = F.pad(x, spec)
            cond = F.pad(cond, spec, value=-1.0)
        emb = self.time(timestep_embedding(t, self.temb_dim))
        h1, h2, m = self.main(x, emb)
        c1, c2, cm = self.control(cond, emb)
        h1 = h1 + self.proj1(c1)
        h2 = h2 + self.proj2(c2)
        m = m + self.proj_mid(cm)
        d2 = self.dec2(torch.cat([self.up2(m), h2], dim=1), emb)
        d1 = self.dec1(torch.cat([self.up1(d2), h1], dim=1), emb)
        out = self.out(F.silu(self.out_norm(d1)))
        return out[:, :, :size[0], :size[1], :size[2]]


def denoiser_from_params(params: ModelParams) -> Denoiser:
    topo = params.topology
    if topo.get("kind") != "denoiser":
        raise ValueError(f"checkpoint holds a {topo.get('kind')!r}, not a denoiser")
    model = Denoiser(tuple(topo["widths"]), topo["temb_dim"])
    return load_state(model, params)


def _batch(x):
    t = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    if t.ndim == 3:
        t = t[None]
    return t[:, None]


def predict_noise(model: Denoiser, chi_t, t, chi_v) -> np.ndarray:
    """Noise estimate for model-range grids (X, Y, Z) or batches (B, X, Y, Z).

    ``chi_v`` is binary {0, 1}; it is mapped to the model range here.
    """
    chi_t = np.asarray(chi_t)
    chi_v = np.asarray(chi_v)
    if chi_t.shape != chi_v.shape:
        raise ValueError(f"chi_t {chi_t.shape} and chi_v {chi_v.shape} differ in shape")
    x, c = _batch(chi_t), _batch(to_model_range(chi_v))
    tt = torch.full((x.shape[0],), int(t), dtype=torch.long) if np.ndim(t) == 0 \
        else torch.as_tensor(t, dtype=torch.long)
    with torch.no_grad():
        out = model(x, tt, c)[:, 0].numpy()
    return out[0] if chi_t.ndim == 3 else out


def train_step(model: Denoiser, chi_0, chi_v, schedule: NoiseSchedule, gen: torch.Generator,
               optimizer: torch.optim.Optimizer) -> float:
    """One noise-prediction step on a batch of binary (B, X, Y, Z) shapes."""
    x0 = torch.as_tensor(to_model_range(chi_0), dtype=torch.float32)[:, None]
    cond = torch.as_tensor(to_model_range(chi_v), dtype=torch.float32)[:, None]
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    B = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float32)[t - 1].view(B, 1, 1, 1, 1)
    xt = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    loss = F.mse_loss(model(xt, t, cond), eps)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite diffusion loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


def train_completion(model: Denoiser, chi_full, chi_vis, schedule: NoiseSchedule, epochs: int = 50,
                     batch_size: int = 16, lr: float = 1e-3, seed: int = 0, log_every: int = 10):
    """Train on paired (complete, visible) grids of shape (S, X, Y, Z).

    Returns the mean loss of every epoch.
    """
    chi_full = np.asarray(chi_full)
    chi_vis = np.asarray(chi_vis)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    history = []
    S = len(chi_full)
    for ep in range(epochs):
        order = rng.permutation(S)
        losses = []
        for lo in range(0, S, batch_size):
            idx = order[lo:lo + batch_size]
            losses.append(train_step(model, chi_full[idx], chi_vis[idx], schedule, gen, opt))
        history.append(float(np.mean(losses)))
        if log_every and (ep + 1) % log_every == 0:
            log.info("diffusion epoch %d: loss %.4f", ep + 1, history[-1])
    model.eval()
    return history


def reverse_sample(model, chi_v, schedule: NoiseSchedule, rng=None, clamp: float | None = 3.0,
                   stochastic: bool = True, eps_fn=None, chi_T=None) -> np.ndarray:
    """Ancestral DDPM sampling conditioned on binary ``chi_v``.

    ``eps_fn(chi_t, t)`` overrides the network (used for oracle checks);
    ``stochastic=False`` drops the sigma_t noise term.
    """
    chi_v = np.asarray(chi_v)
    gen = torch.Generator().manual_seed(int(np.random.default_rng(rng).integers(2**62)))
    x = torch.randn(chi_v.shape, generator=gen, dtype=torch.float64).numpy() if chi_T is None \
        else np.array(chi_T, dtype=float)
    if eps_fn is None:
        def eps_fn(xt, t):
            return predict_noise(model, xt, t, chi_v).astype(float)
    for t in range(schedule.T, 0, -1):
        i = t - 1
        eps = eps_fn(x, t)
        mean = (x - schedule.beta[i] / math.sqrt(1 - schedule.alpha_bar[i]) * eps) / math.sqrt(schedule.alpha[i])
        if stochastic and t > 1:
            z = torch.randn(x.shape, generator=gen, dtype=torch.float64).numpy()
            x = mean + schedule.sigma[i] * z
        else:
            x = mean
        if clamp is not None:
            x = np.clip(x, -clamp, clamp)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite sample at step {t}")
    return x


def finalize_shape(chi_0_raw, chi_v) -> np.ndarray:
    """Binarize at the model-range midpoint (ties occupied), then force chi_v in."""
    raw = np.asarray(chi_0_raw)
    chi_v = np.asarray(chi_v)
    if raw.shape != chi_v.shape:
        raise ValueError(f"shape mismatch {raw.shape} vs {chi_v.shape}")
    out = np.maximum((raw >= 0.0).astype(np.int8), chi_v.astype(np.int8))
    assert np.array_equal(out * chi_v, chi_v.astype(np.int8))
    return out


def save_denoiser_params(model: Denoiser, schedule: NoiseSchedule, extra=None) -> ModelParams:
    ex = {"beta_start": float(schedule.beta[0]), "beta_end": float(schedule.beta[-1]), "T": schedule.T}
    ex.update(extra or {})
    return model_params(model, model.topology, ex)
