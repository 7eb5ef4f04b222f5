"""Behavioural-cloning policy: MLP encoder, Gaussian / Gaussian-mixture action
heads, likelihood training with hand-derived gradients, low-noise inference.

The network is a plain two-layer tanh MLP over the flattened observation stack
(four 32x32x3 rasters plus the 7-float proprioceptive vector, 12295 inputs).
Heads emit per-mode mixture logits, action means, bounded log-stds, and one
gripper logit.  The continuous action is the 6-vector (translation, rotation
vector) of the relative pose command, normalized per channel; the gripper bit
is an independent Bernoulli.

All gradients are coded by hand in reverse mode and checked against central
finite differences in the test suite, so the module has no autograd
dependency and trains deterministically from a seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from pvp.collect import Action, Episode, StackedObservation
from pvp.scene import ConfigError
from pvp.se3 import RelPose

LOG_2PI = math.log(2.0 * math.pi)

# log-std of each mixture component is squashed into this range
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

# per-channel action normalization: translations are ~2 cm per step, rotations
# ~0.1 rad, so dividing by these puts both on comparable unit scales
TRANS_SCALE = 0.02
ROT_SCALE = 0.1

RASTER_SHAPE = (32, 32, 12)
PROPRIO_DIM = 7
INPUT_DIM = int(np.prod(RASTER_SHAPE)) + PROPRIO_DIM


class TrainingError(RuntimeError):
    """Raised when training input is invalid or optimization diverges."""


class WeightsError(RuntimeError):
    """Raised when a parameter file is malformed or truncated."""


def default_action_scale() -> np.ndarray:
    return np.array([TRANS_SCALE] * 3 + [ROT_SCALE] * 3, dtype=np.float64)


@dataclass
class PolicyParams:
    """Weights of the encoder and the distribution heads.

    modes is 1 (unimodal Gaussian) or 5 (mixture).  With det_equiv the
    continuous std is pinned to 1 and never learned, which makes the
    likelihood loss coincide with a mean-squared-error objective.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W_logit: np.ndarray
    b_logit: np.ndarray
    W_mu: np.ndarray
    b_mu: np.ndarray
    W_std: np.ndarray
    b_std: np.ndarray
    W_grip: np.ndarray
    b_grip: np.ndarray
    modes: int = 5
    det_equiv: bool = False
    action_scale: np.ndarray = field(default_factory=default_action_scale)

    ARRAY_FIELDS = (
        "W1", "b1", "W2", "b2", "W_logit", "b_logit",
        "W_mu", "b_mu", "W_std", "b_std", "W_grip", "b_grip",
    )

    def __post_init__(self):
        if self.modes not in (1, 5):
            raise ConfigError(f"mode count must be 1 or 5, got {self.modes}")
        if self.det_equiv and self.modes != 1:
            raise ConfigError("fixed-variance training requires a single mode")
        self.action_scale = np.asarray(self.action_scale, dtype=np.float64)
        if self.action_scale.shape != (6,) or np.any(self.action_scale <= 0):
            raise ConfigError("action scale must be 6 positive floats")
        for name in self.ARRAY_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigError(f"non-finite values in parameter {name}")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def dtype(self):
        return self.W1.dtype

    @property
    def n_params(self) -> int:
        return sum(getattr(self, n).size for n in self.ARRAY_FIELDS)

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int = INPUT_DIM,
             hidden: int = 128, modes: int = 5, det_equiv: bool = False,
             dtype=np.float32, action_scale: Optional[np.ndarray] = None) -> "PolicyParams":
        """Scaled-Gaussian weight init; draw order is layer by layer."""
        if input_dim < 1 or hidden < 1:
            raise ConfigError("input_dim and hidden must be positive")

        def layer(fan_in, fan_out):
            w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))
            return w.astype(dtype), np.zeros(fan_out, dtype=dtype)

        w1, b1 = layer(input_dim, hidden)
        w2, b2 = layer(hidden, hidden)
        wl, bl = layer(hidden, modes)
        wm, bm = layer(hidden, 6 * modes)
        ws, bs = layer(hidden, 6 * modes)
        # start every component at unit std (squash midpoint 5/7) so early
        # mean errors anneal the std down instead of saturating it upward
        bs[:] = math.log(2.5)
        wg, bg = layer(hidden, 1)
        scale = default_action_scale() if action_scale is None else action_scale
        return cls(w1, b1, w2, b2, wl, bl, wm, bm, ws, bs, wg, bg,
                   modes=modes, det_equiv=det_equiv, action_scale=scale)

    def copy(self) -> "PolicyParams":
        arrays = {n: getattr(self, n).copy() for n in self.ARRAY_FIELDS}
        return PolicyParams(**arrays, modes=self.modes, det_equiv=self.det_equiv,
                            action_scale=self.action_scale.copy())

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in self.ARRAY_FIELDS])

    def unflatten(self, vec: np.ndarray) -> "PolicyParams":
        """New params of identical layout with values taken from vec."""
        vec = np.asarray(vec)
        if vec.size != self.n_params:
            raise ConfigError(f"expected {self.n_params} values, got {vec.size}")
        out, k = {}, 0
        for name in self.ARRAY_FIELDS:
            a = getattr(self, name)
            out[name] = vec[k:k + a.size].reshape(a.shape).astype(a.dtype)
            k += a.size
        return PolicyParams(**out, modes=self.modes, det_equiv=self.det_equiv,
                            action_scale=self.action_scale.copy())


@dataclass
class TrainConfig:
    """Optimization settings; the seed fixes every stochastic choice."""

    seed: int
    epochs: int = 150
    batch_size: int = 64
    step_size: float = 1e-4
    step_decay: float = 0.985
    momentum: float = 0.9
    modes: int = 5
    det_equiv: bool = False
    sigma_eval: float = 1e-4
    val_fraction: float = 0.1
    hidden: int = 128
    dtype: str = "float32"
    keep_best_val: bool = False

    def __post_init__(self):
        if self.step_size <= 0:
            raise ConfigError("step size must be positive")
        if not 0.0 < self.step_decay <= 1.0:
            raise ConfigError("step decay must be in (0, 1]")
        if self.sigma_eval <= 0:
            raise ConfigError("evaluation std must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be at least 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("validation fraction must be in (0, 1)")
        if self.momentum < 0 or self.momentum >= 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")


# -- observation / action encoding ------------------------------------------------------


def obs_to_vec(obs) -> np.ndarray:
    """Flatten a stacked observation into the network input vector."""
    if isinstance(obs, StackedObservation):
        return np.concatenate([obs.raster.ravel(), obs.proprio]).astype(np.float32)
    return np.asarray(obs, dtype=np.float32).ravel()


def episodes_to_arrays(episodes) -> tuple:
    """All (obs, action) tuples of the episodes as X (N, input) / Y (N, 7).

    Y rows are the raw action 6-vector followed by the gripper bit;
    normalization happens inside the loss so stored data stays physical.
    """
    xs, ys = [], []
    for ep in episodes:
        for obs, act, _ in ep.tuples:
            xs.append(obs_to_vec(obs))
            ys.append(np.concatenate([act.delta.t, act.delta.w, [float(act.gripper)]]))
    if not xs:
        raise TrainingError("no training tuples in the given episodes")
    return np.stack(xs), np.stack(ys)


# -- forward pass -----------------------------------------------------------------------


def _logsumexp_sorted(x: np.ndarray) -> np.ndarray:
    """Rowwise log-sum-exp, summing terms in sorted order.

    Sorting before the reduction makes the result invariant under any
    permutation of the inputs, bit for bit.
    """
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    e.sort(axis=1)
    return m[:, 0] + np.log(np.sum(e, axis=1))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward(p: PolicyParams, x: np.ndarray) -> dict:
    x = np.ascontiguousarray(x, dtype=p.dtype)
    if x.ndim == 1:
        x = x[None, :]
    n, k = x.shape[0], p.modes
    h1 = np.tanh(x @ p.W1 + p.b1)
    h2 = np.tanh(h1 @ p.W2 + p.b2)
    logits = h2 @ p.W_logit + p.b_logit
    mu = (h2 @ p.W_mu + p.b_mu).reshape(n, k, 6)
    if p.det_equiv:
        sig = None
        log_std = np.zeros((n, k, 6), dtype=p.dtype)
    else:
        sig = _sigmoid(h2 @ p.W_std + p.b_std)
        span = LOG_STD_MAX - LOG_STD_MIN
        log_std = (LOG_STD_MIN + span * sig).reshape(n, k, 6)
    grip = (h2 @ p.W_grip + p.b_grip)[:, 0]
    return {"x": x, "h1": h1, "h2": h2, "logits": logits, "mu": mu,
            "sig": sig, "log_std": log_std, "grip": grip}


def _check_batch(x: np.ndarray, y: np.ndarray):
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != 2 or y.ndim != 2 or y.shape[1] != 7:
        raise TrainingError("batch must be (n, input_dim) and (n, 7)")
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise TrainingError("batch is empty or misaligned")
    bad_x = ~np.all(np.isfinite(x), axis=1)
    bad_y = ~np.all(np.isfinite(y), axis=1)
    bad = bad_x | bad_y
    if np.any(bad):
        raise TrainingError(f"non-finite values in batch row {int(np.argmax(bad))}")
    return x, y


def _loss_terms(p: PolicyParams, cache: dict, y: np.ndarray) -> dict:
    """Per-tuple negative log likelihoods plus the backprop intermediates."""
    yc = (y[:, :6] / p.action_scale).astype(p.dtype)
    g = y[:, 6].astype(p.dtype)
    std = np.exp(cache["log_std"])
    d = (yc[:, None, :] - cache["mu"]) / std
    comp_ll = -0.5 * np.sum(d * d, axis=2) - np.sum(cache["log_std"], axis=2) \
        - 3.0 * LOG_2PI
    log_w = cache["logits"] - _logsumexp_sorted(cache["logits"])[:, None]
    t = log_w + comp_ll
    mix_ll = _logsumexp_sorted(t)
    z = cache["grip"]
    grip_ll = -(g * _softplus(-z) + (1.0 - g) * _softplus(z))
    nll = -(mix_ll + grip_ll)
    return {"yc": yc, "g": g, "std": std, "d": d, "t": t, "mix_ll": mix_ll,
            "nll": nll}


def nll_loss(p: PolicyParams, x: np.ndarray, y: np.ndarray) -> float:
    """Mean negative log likelihood of a batch of (obs, action) tuples."""
    x, y = _check_batch(x, y)
    cache = _forward(p, x)
    terms = _loss_terms(p, cache, y)
    loss = float(np.mean(terms["nll"]))
    if not math.isfinite(loss):
        raise TrainingError("loss is non-finite")
    return loss


def _loss_and_grad(p: PolicyParams, x: np.ndarray, y: np.ndarray):
    x, y = _check_batch(x, y)
    cache = _forward(p, x)
    terms = _loss_terms(p, cache, y)
    n = x.shape[0]
    loss = float(np.mean(terms["nll"]))
    if not math.isfinite(loss):
        raise TrainingError("loss is non-finite")

    h1, h2 = cache["h1"], cache["h2"]
    xs = cache["x"]
    # mixture posteriors; with one mode this is exactly 1
    r = np.exp(terms["t"] - terms["mix_ll"][:, None])
    soft = np.exp(cache["logits"] - _logsumexp_sorted(cache["logits"])[:, None])
    d_logits = (soft - r) / n
    d = terms["d"]
    d_mu = (r[:, :, None] * (cache["mu"] - terms["yc"][:, None, :])
            / (terms["std"] * terms["std"]) / n).reshape(n, -1)
    if p.det_equiv:
        d_u = np.zeros((n, 6 * p.modes), dtype=p.dtype)
    else:
        d_log_std = r[:, :, None] * (1.0 - d * d) / n
        sig = cache["sig"]
        span = LOG_STD_MAX - LOG_STD_MIN
        d_u = d_log_std.reshape(n, -1) * (span * sig * (1.0 - sig))
    d_grip = ((_sigmoid(cache["grip"]) - terms["g"]) / n)[:, None]

    grads = {
        "W_logit": h2.T @ d_logits, "b_logit": d_logits.sum(0),
        "W_mu": h2.T @ d_mu, "b_mu": d_mu.sum(0),
        "W_std": h2.T @ d_u, "b_std": d_u.sum(0),
        "W_grip": h2.T @ d_grip, "b_grip": d_grip.sum(0),
    }
    d_h2 = d_logits @ p.W_logit.T + d_mu @ p.W_mu.T + d_u @ p.W_std.T \
        + d_grip @ p.W_grip.T
    d_z2 = d_h2 * (1.0 - h2 * h2)
    grads["W2"] = h1.T @ d_z2
    grads["b2"] = d_z2.sum(0)
    d_z1 = (d_z2 @ p.W2.T) * (1.0 - h1 * h1)
    grads["W1"] = xs.T @ d_z1
    grads["b1"] = d_z1.sum(0)

    gp = PolicyParams(**{k: grads[k].astype(p.dtype) for k in PolicyParams.ARRAY_FIELDS},
                      modes=p.modes, det_equiv=p.det_equiv,
                      action_scale=p.action_scale.copy())
    return loss, gp


def grad(p: PolicyParams, x: np.ndarray, y: np.ndarray) -> PolicyParams:
    """Exact reverse-mode gradient of nll_loss, same layout as the params."""
    return _loss_and_grad(p, x, y)[1]


def mixture_log_density(p: PolicyParams, x: np.ndarray, a6: np.ndarray) -> np.ndarray:
    """Log density of normalized continuous actions under the mixture head."""
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    cache = _forward(p, x)
    a6 = np.asarray(a6, dtype=p.dtype)
    if a6.ndim == 1:
        a6 = a6[None, :]
    std = np.exp(cache["log_std"])
    d = (a6[:, None, :] - cache["mu"]) / std
    comp_ll = -0.5 * np.sum(d * d, axis=2) - np.sum(cache["log_std"], axis=2) \
        - 3.0 * LOG_2PI
    log_w = cache["logits"] - _logsumexp_sorted(cache["logits"])[:, None]
    return _logsumexp_sorted(log_w + comp_ll)


# -- training ----------------------------------------------------------------------------


def train(episodes, tc: TrainConfig):
    """Fit a policy to the episodes by momentum gradient descent.

    Returns (params, history) where history rows are (epoch, train NLL,
    held-out NLL); epoch 0 is the pre-training evaluation.  Deterministic for
    a fixed config.
    """
    x, y = episodes_to_arrays(episodes)
    return train_arrays(x, y, tc)


def train_arrays(x: np.ndarray, y: np.ndarray, tc: TrainConfig):
    """Array-level training entry point (x: (n, input), y: (n, 7))."""
    x, y = _check_batch(x, y)
    dtype = np.float32 if tc.dtype == "float32" else np.float64
    rng = np.random.default_rng(tc.seed)
    p = PolicyParams.init(rng, input_dim=x.shape[1], hidden=tc.hidden,
                          modes=tc.modes, det_equiv=tc.det_equiv, dtype=dtype)

    n = x.shape[0]
    n_val = max(1, int(round(tc.val_fraction * n))) if n > 1 else 0
    order = rng.permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        train_idx = order
    xt, yt = x[train_idx], y[train_idx]
    xv, yv = (x[val_idx], y[val_idx]) if n_val else (xt, yt)

    velocity = {k: np.zeros_like(getattr(p, k)) for k in PolicyParams.ARRAY_FIELDS}
    history = [(0, nll_loss(p, xt, yt), nll_loss(p, xv, yv))]
    best, best_val = None, history[0][2]
    for epoch in range(1, tc.epochs + 1):
        perm = rng.permutation(train_idx.size)
        losses = []
        step = tc.step_size * tc.step_decay ** (epoch - 1)
        for lo in range(0, train_idx.size, tc.batch_size):
            sel = perm[lo:lo + tc.batch_size]
            loss, g = _loss_and_grad(p, xt[sel], yt[sel])
            losses.append(loss)
            for k in PolicyParams.ARRAY_FIELDS:
                v = velocity[k]
                v *= tc.momentum
                v -= step * getattr(g, k)
                arr = getattr(p, k)
                arr += v
        train_nll = float(np.mean(losses))
        val_nll = nll_loss(p, xv, yv)
        if not (math.isfinite(train_nll) and math.isfinite(val_nll)):
            raise TrainingError(f"training diverged at epoch {epoch}")
        history.append((epoch, train_nll, val_nll))
        if tc.keep_best_val and val_nll < best_val:
            best, best_val = p.copy(), val_nll
    if tc.keep_best_val and best is not None:
        return best, history
    # refresh invariant checks after in-place updates
    return p.copy(), history


def history_text(history) -> str:
    """Per-epoch loss log as tab-delimited text."""
    lines = ["epoch\ttrain_nll\tval_nll"]
    lines += [f"{e}\t{tr:.8f}\t{va:.8f}" for e, tr, va in history]
    return "\n".join(lines) + "\n"


# -- inference ---------------------------------------------------------------------------


def act(p: PolicyParams, obs, rng: np.random.Generator,
        low_noise: bool = True, sigma_eval: float = 1e-4) -> Action:
    """Sample one action: pick a mode by weight, then a 6-vector around its
    mean with the evaluation std, and threshold the gripper probability.

    Draw order: one uniform for the mode, then six normals.
    """
    if sigma_eval <= 0:
        raise ConfigError("evaluation std must be positive")
    vec = obs_to_vec(obs)
    cache = _forward(p, vec)
    probs = np.exp(cache["logits"][0] - _logsumexp_sorted(cache["logits"])[0])
    k = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
    k = min(k, p.modes - 1)
    std = sigma_eval if low_noise else np.exp(cache["log_std"][0, k])
    a6 = cache["mu"][0, k] + std * rng.normal(size=6)
    a6 = a6.astype(np.float64) * p.action_scale
    gripper = 1 if _sigmoid(cache["grip"])[0] >= 0.5 else 0
    return Action(RelPose(t=a6[:3], w=a6[3:]), gripper)


# -- persistence ---------------------------------------------------------------------------

WEIGHTS_MAGIC = b"PVPW"
WEIGHTS_VERSION = 1
_HEADER = struct.Struct("<4sIIIIB3x6d")


def save_params(path, p: PolicyParams):
    """Versioned binary dump: header, then each array as little-endian f32."""
    header = _HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, p.input_dim,
                          p.hidden, p.modes, int(p.det_equiv), *p.action_scale)
    with open(path, "wb") as f:
        f.write(header)
        for name in PolicyParams.ARRAY_FIELDS:
            f.write(np.ascontiguousarray(getattr(p, name), dtype="<f4").tobytes())


def load_params(path) -> PolicyParams:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise WeightsError("weights file truncated before header")
    magic, version, input_dim, hidden, modes, det, *scale = \
        _HEADER.unpack_from(blob)
    if magic != WEIGHTS_MAGIC:
        raise WeightsError("not a policy weights file")
    if version != WEIGHTS_VERSION:
        raise WeightsError(f"unsupported weights version {version}")
    shapes = _array_shapes(input_dim, hidden, modes)
    arrays, off = {}, _HEADER.size
    for name in PolicyParams.ARRAY_FIELDS:
        count = int(np.prod(shapes[name]))
        end = off + 4 * count
        if end > len(blob):
            raise WeightsError(f"weights file truncated in array {name}")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=count,
                                     offset=off).reshape(shapes[name]).copy()
        off = end
    if off != len(blob):
        raise WeightsError("trailing bytes after final array")
    return PolicyParams(**arrays, modes=modes, det_equiv=bool(det),
                        action_scale=np.array(scale))


def _array_shapes(input_dim: int, hidden: int, modes: int) -> dict:
    return {
        "W1": (input_dim, hidden), "b1": (hidden,),
        "W2": (hidden, hidden), "b2": (hidden,),
        "W_logit": (hidden, modes), "b_logit": (modes,),
        "W_mu": (hidden, 6 * modes), "b_mu": (6 * modes,),
        "W_std": (hidden, 6 * modes), "b_std": (6 * modes,),
        "W_grip": (hidden, 1), "b_grip": (1,),
    }
