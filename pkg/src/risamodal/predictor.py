"""Error-prediction surrogate and RIS configuration optimization.

A fully connected network maps the correlation features [c_0, ..., c_L] of
Q @ H_r to the expected complete-shape reconstruction error. Phases are
optimized by descending the network's prediction through the features,
then quantized to the discrete phase set in one shot.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .features import SubregionPartition, feature_vector, feature_vector_torch
from .nn import ModelParams, load_state, model_params, seeded_init
from .ris import ConfigSet, phase_set

log = logging.getLogger(__name__)

HIDDEN = (32, 64, 128, 64, 32)

__all__ = [
    "PredictorNet",
    "PredictorModel",
    "TrainingSample",
    "GradientCheckError",
    "build_training_set",
    "diverse_configs",
    "train_predictor",
    "predict_error",
    "optimize_configs",
    "corr_min_baseline",
    "save_training_set",
    "load_training_set",
]


class GradientCheckError(RuntimeError):
    pass


class PredictorNet(nn.Module):
    def __init__(self, n_in: int, hidden=HIDDEN, seed: int = 0):
        super().__init__()
        self.hidden = tuple(int(h) for h in hidden)
        dims = [n_in, *self.hidden, 1]
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        self.layers = nn.Sequential(*layers[:-1])
        seeded_init(self, seed)
        self.double()

    def forward(self, x):
        return self.layers(x)[..., 0]


@dataclass
class PredictorModel:
    """Network plus input standardization and label scaling.

    ``raw(features)`` is the unrectified estimate in label units; the
    reported error is ``max(raw, 0)``. Features are clamped to
    [feat_lo, feat_hi], the range seen in training, so the estimate is
    flat outside it instead of extrapolating.
    """

    net: PredictorNet
    feat_mean: np.ndarray
    feat_scale: np.ndarray
    label_mean: float = 0.0
    label_scale: float = 1.0
    feat_lo: np.ndarray | None = None
    feat_hi: np.ndarray | None = None

    @property
    def n_features(self) -> int:
        return len(self.feat_mean)

    def raw_torch(self, feats: torch.Tensor) -> torch.Tensor:
        mu = torch.as_tensor(self.feat_mean, dtype=torch.float64)
        sc = torch.as_tensor(self.feat_scale, dtype=torch.float64)
        if self.feat_lo is not None:
            feats = torch.clamp(feats, torch.as_tensor(self.feat_lo, dtype=torch.float64),
                                torch.as_tensor(self.feat_hi, dtype=torch.float64))
        return self.label_mean + self.label_scale * self.net((feats - mu) / sc)

    def predict(self, feats) -> np.ndarray:
        with torch.no_grad():
            out = self.raw_torch(torch.as_tensor(np.asarray(feats), dtype=torch.float64))
        return np.maximum(out.numpy(), 0.0)

    def to_params(self) -> ModelParams:
        topo = {"kind": "predictor", "n_in": self.n_features, "hidden": list(self.net.hidden)}
        extra = {"feat_mean": self.feat_mean.tolist(), "feat_scale": self.feat_scale.tolist(),
                 "label_mean": self.label_mean, "label_scale": self.label_scale}
        if self.feat_lo is not None:
            extra.update(feat_lo=self.feat_lo.tolist(), feat_hi=self.feat_hi.tolist())
        return model_params(self.net, topo, extra)

    @classmethod
    def from_params(cls, params: ModelParams) -> "PredictorModel":
        topo = params.topology
        if topo.get("kind") != "predictor":
            raise ValueError(f"checkpoint holds a {topo.get('kind')!r}, not a predictor")
        net = load_state(PredictorNet(topo["n_in"], tuple(topo["hidden"])), params)
        ex = params.extra
        lo, hi = ex.get("feat_lo"), ex.get("feat_hi")
        return cls(net, np.array(ex["feat_mean"]), np.array(ex["feat_scale"]),
                   float(ex["label_mean"]), float(ex["label_scale"]),
                   None if lo is None else np.array(lo), None if hi is None else np.array(hi))


@dataclass
class TrainingSample:
    features: np.ndarray
    label: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite features")
        if not 0.0 <= self.label <= 1.0:
            raise ValueError(f"label {self.label} outside [0, 1]")


# --- dataset -----------------------------------------------------------------

def diverse_configs(K: int, M: int, b: int, rng) -> tuple[ConfigSet, float]:
    """Random configurations with a random amount of row diversity.

    Every row copies a shared base row and redraws each element with
    probability ``p ~ U(0, 1)``; p = 1 is i.i.d. uniform. Returns (configs, p).
    """
    rng = np.random.default_rng(rng)
    F = phase_set(b)
    p = float(rng.uniform())
    base = rng.integers(0, 2**b, size=M)
    fresh = rng.integers(0, 2**b, size=(K, M))
    redraw = rng.random((K, M)) < p
    idx = np.where(redraw, fresh, base[None, :])
    return ConfigSet(F[idx], b), p


def build_training_set(num_settings: int, objects, pipeline, K, seed: int = 0,
                       roi_jitter: float = 0.3, M_choices=None, partition_blocks: int = 2,
                       corrmin_fraction: float = 0.25, corrmin_steps: int = 150,
                       common_noise: bool = True):
    """Label random settings with the full sense -> reconstruct -> complete pipeline.

    ``pipeline`` must provide ``with_setting(roi_offset, M)`` returning a
    pipeline for that placement/RIS size, and on it ``channel()``,
    ``partition(blocks)`` and ``evaluate(configs, objects, seed)``
    returning per-object errors. ``K`` may be an int or a list to draw from.
    A ``corrmin_fraction`` of settings start from configs optimized for low
    correlation for 1..``corrmin_steps`` steps so the labels cover that
    feature range too. With ``common_noise`` every setting is evaluated with
    the same noise and sampling seed, so label differences between settings
    are not dominated by the noise draw.
    """
    rng = np.random.default_rng(seed)
    eval_seed = int(rng.integers(2**31))
    K_choices = [K] if np.isscalar(K) else list(K)
    samples = []
    for s in range(num_settings):
        k = int(K_choices[rng.integers(len(K_choices))])
        m_side = None if not M_choices else int(M_choices[rng.integers(len(M_choices))])
        offset = rng.uniform(-roi_jitter, roi_jitter, size=3) * np.array([1, 1, 0.5])
        setting_seed = int(rng.integers(2**31))
        sub = pipeline.with_setting(offset, m_side)
        H = sub.channel()
        part = sub.partition(partition_blocks)
        M = H.shape[0]
        cfg, p = diverse_configs(k, M, sub.bits, setting_seed)
        source = "diverse"
        if rng.uniform() < corrmin_fraction:
            steps = int(rng.integers(1, corrmin_steps + 1))
            cfg, _ = corr_min_baseline(H, k, M, sub.bits, steps=steps, seed=setting_seed,
                                       init=cfg.phases, partition=part)
            source = f"corrmin{steps}"
        try:
            errors = sub.evaluate(cfg, objects, seed=eval_seed if common_noise else setting_seed)
        except Exception as exc:  # skip the setting, keep building
            log.warning("setting %d skipped: %s", s, exc)
            continue
        feats = feature_vector(cfg.Q, H, part)
        samples.append(TrainingSample(feats, float(np.mean(errors)), {
            "setting": s, "seed": setting_seed, "K": k, "M": M, "N": H.shape[1],
            "roi_offset": [float(o) for o in offset], "diversity": p, "source": source}))
    return samples


def save_training_set(samples, path) -> None:
    """CSV: feature columns c0..cL, label, and a JSON metadata column."""
    if not samples:
        with open(path, "w", newline="") as fh:
            fh.write("label,meta\n")
        return
    L1 = len(samples[0].features)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"c{i}" for i in range(L1)] + ["label", "meta"])
        for smp in samples:
            w.writerow([repr(float(f)) for f in smp.features] + [repr(float(smp.label)), json.dumps(smp.meta)])


def load_training_set(path) -> list[TrainingSample]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        feats = [float(v) for k, v in row.items() if k.startswith("c")]
        out.append(TrainingSample(np.array(feats), float(row["label"]), json.loads(row["meta"])))
    return out


# --- training ----------------------------------------------------------------

def train_predictor(samples, epochs: int = 2000, lr: float = 1e-3, split: float = 0.8,
                    seed: int = 0, weight_decay: float = 0.0, batch_size: int | None = None):
    """Fit the network by MSE; the best-validation weights are kept.

    Returns (model, metrics) with per-epoch ``train_mse`` and ``val_mse``
    histories in label units.
    """
    if len(samples) < 10:
        raise ValueError("need at least 10 samples")
    X = np.stack([s.features for s in samples])
    y = np.array([s.label for s in samples], dtype=float)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(X))
    n_tr = max(1, min(len(X) - 1, int(round(split * len(X)))))
    tr, va = order[:n_tr], order[n_tr:]

    mu = X[tr].mean(axis=0)
    sc = X[tr].std(axis=0)
    sc = np.where(sc > 0, sc, 1.0)
    lm = float(y[tr].mean())
    ls = float(y[tr].std()) or 1.0
    model = PredictorModel(PredictorNet(X.shape[1], seed=seed), mu, sc, lm, ls,
                           X[tr].min(axis=0), X[tr].max(axis=0))
    Xt = torch.as_tensor(X, dtype=torch.float64)
    yt = torch.as_tensor(y, dtype=torch.float64)
    opt = torch.optim.Adam(model.net.parameters(), lr=lr, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    tr_t = torch.as_tensor(tr)
    bs = batch_size or len(tr)

    def mse(idx):
        with torch.no_grad():
            return float(((model.raw_torch(Xt[idx]) - yt[idx]) ** 2).mean())

    hist_tr, hist_va = [mse(tr)], [mse(va)]
    best = (hist_va[0], {k: v.clone() for k, v in model.net.state_dict().items()})
    for ep in range(epochs):
        perm = tr_t[torch.randperm(len(tr_t), generator=gen)]
        for lo in range(0, len(perm), bs):
            idx = perm[lo:lo + bs]
            # loss in standardized label units keeps the step size scale-free
            loss = (((model.raw_torch(Xt[idx]) - yt[idx]) / ls) ** 2).mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite predictor loss at epoch {ep}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        hist_tr.append(mse(tr))
        hist_va.append(mse(va))
        if hist_va[-1] < best[0]:
            best = (hist_va[-1], {k: v.clone() for k, v in model.net.state_dict().items()})
    model.net.load_state_dict(best[1])
    metrics = {"train_mse": hist_tr, "val_mse": hist_va, "best_val_mse": best[0],
               "final_train_mse": mse(tr), "n_train": len(tr), "n_val": len(va),
               "label_var_val": float(y[va].var())}
    return model, metrics


def predict_error(model: PredictorModel, Q, H_r, partition: SubregionPartition) -> float:
    feats = feature_vector(Q, H_r, partition)
    if len(feats) != model.n_features:
        raise ValueError(f"model expects {model.n_features} features, partition gives {len(feats)}")
    return float(model.predict(feats))


# --- phase optimization --------------------------------------------------------

def _value_and_grad(objective, phi: np.ndarray):
    t = torch.tensor(phi, dtype=torch.float64, requires_grad=True)
    val = objective(t)
    val.backward()
    return float(val.detach()), t.grad.numpy().copy()


def _check_gradient(objective, phi, grad, rng, h=1e-5, tol=1e-2, tries=3, atol=1e-8):
    """Directional derivative vs central differences along random directions.

    A single mismatch can come from a ReLU kink inside [phi - h, phi + h],
    so the check fails only when every direction disagrees. Differences
    below ``atol`` pass (both sides are rounding noise at stationary points).
    """
    errs = []
    for _ in range(tries):
        d = rng.standard_normal(phi.shape)
        d /= np.linalg.norm(d)
        with torch.no_grad():
            fp = float(objective(torch.as_tensor(phi + h * d)))
            fm = float(objective(torch.as_tensor(phi - h * d)))
        fd = (fp - fm) / (2 * h)
        an = float(np.sum(grad * d))
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-12)
        errs.append(err)
        if err < tol or abs(fd - an) < atol:
            return err
    raise GradientCheckError(f"phase gradient disagrees with finite differences (rel err {min(errs):.3g})")


def _descend(objective, phi0, steps, lr, rng, patience=10, min_improvement=1e-6):
    """Normalized gradient descent with backtracking.

    Each step moves phases by at most ``eta`` radians; a step is accepted
    only if the objective does not increase (eta halves until it does).
    """
    phi = np.array(phi0, dtype=float)
    f, g = _value_and_grad(objective, phi)
    if not np.isfinite(f):
        raise FloatingPointError("non-finite objective at the starting point")
    _check_gradient(objective, phi, g, rng)
    trace = [f]
    eta = lr
    for _ in range(steps):
        gmax = np.max(np.abs(g))
        if gmax == 0:
            break
        accepted = False
        for _ in range(40):
            cand = phi - eta * g / gmax
            with torch.no_grad():
                fc = float(objective(torch.as_tensor(cand)))
            if not np.isfinite(fc):
                raise FloatingPointError("non-finite objective during line search")
            if fc <= f:
                accepted = True
                break
            eta /= 2
        if not accepted:
            break
        phi = cand
        f, g = _value_and_grad(objective, phi)
        trace.append(f)
        eta = min(eta * 1.5, lr * 4)
        if len(trace) > patience and trace[-patience - 1] - trace[-1] < min_improvement:
            break
    return phi, trace


def optimize_configs(model: PredictorModel, H_r, partition: SubregionPartition, K: int, M: int,
                     b: int = 2, steps: int = 200, lr: float = 0.3, seed=None, init=None):
    """Minimize the predicted error over continuous phases, then quantize.

    Returns (quantized ConfigSet, trace) where trace holds the per-iteration
    prediction and the pre/post quantization predictions.
    """
    H = torch.as_tensor(np.asarray(H_r), dtype=torch.complex128)
    if H.shape[0] != M:
        raise ValueError(f"H_r has {H.shape[0]} rows, expected M={M}")
    if model.n_features != partition.L + 1:
        raise ValueError("model input length does not match the partition")
    rng = np.random.default_rng(seed)
    phi0 = rng.choice(phase_set(b), size=(K, M)) if init is None else np.asarray(init, dtype=float)

    def objective(phi):
        return model.raw_torch(feature_vector_torch(phi, H, partition))

    phi, trace = _descend(objective, phi0, steps, lr, rng)
    cont = ConfigSet(phi, b)
    quant = cont.quantized()
    pre = predict_error(model, cont.Q, H_r, partition)
    post = predict_error(model, quant.Q, H_r, partition)
    log.info("predicted error %.5f -> %.5f (continuous) -> %.5f (quantized)",
             max(trace[0], 0), pre, post)
    return quant, {"objective": trace, "predicted": [max(v, 0.0) for v in trace],
                   "pre_quantization": pre, "post_quantization": post,
                   "quantization_gap": post - pre, "continuous_phases": phi}


def corr_min_baseline(H_r, K: int, M: int, b: int = 2, steps: int = 200, lr: float = 0.3,
                      seed=None, init=None, partition: SubregionPartition | None = None):
    """Same descent on the global correlation c_0; returns (ConfigSet, trace)."""
    H = torch.as_tensor(np.asarray(H_r), dtype=torch.complex128)
    if H.shape[0] != M:
        raise ValueError(f"H_r has {H.shape[0]} rows, expected M={M}")
    rng = np.random.default_rng(seed)
    phi0 = rng.choice(phase_set(b), size=(K, M)) if init is None else np.asarray(init, dtype=float)
    whole = SubregionPartition([np.arange(H.shape[1])])

    def objective(phi):
        return feature_vector_torch(phi, H, whole)[0]

    phi, trace = _descend(objective, phi0, steps, lr, rng)
    cont = ConfigSet(phi, b)
    return cont.quantized(), {"objective": trace, "continuous_phases": phi}
