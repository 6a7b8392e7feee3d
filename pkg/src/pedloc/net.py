"""Residual MLP regressor for (mu, s = log b) with hand-written backprop.

Topology (width W, default 256)::

    x(34) -> Linear -> BN -> ReLU
          -> n_blocks x [ Linear -> BN -> ReLU -> Dropout
                          Linear -> BN -> ReLU -> Dropout ] + skip
          -> Linear(W -> 2) = (mu, s)

All arithmetic is float64.  ``forward`` runs in one of three modes:
``train`` (batch statistics, dropout on), ``eval`` (running statistics,
dropout off) and ``mc`` (running statistics, dropout on).
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BatchNormError, DivergenceError, InvalidTargetError, UntrainedModelError
from .geometry import INPUT_DIM

log = logging.getLogger(__name__)

MODES = ("train", "eval", "mc")
LOSSES = ("laplace", "gaussian", "l1")
BN_EPS = 1e-5
LOG2 = math.log(2.0)
MODEL_VERSION = "resmlp-1"
# the head starts near its bias: a He-scaled head spreads s over about +-4 at
# init, and exp(-2s) then lets a few samples dominate the Gaussian NLL
HEAD_INIT_SCALE = 0.01


@dataclass
class PredictionHead:
    mu: np.ndarray
    s: np.ndarray

    @property
    def b(self) -> np.ndarray:
        return np.exp(self.s)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 512
    epochs: int = 200
    p_drop: float = 0.2
    weight_decay: float = 1.0  # multiplier on the dropout prior term; 0 disables it
    loss: str = "laplace"
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    bn_momentum: float = 0.1
    width: int = 256
    n_blocks: int = 3

    def __post_init__(self):
        if not 0 <= self.p_drop < 1:
            raise ValueError(f"p_drop must be in [0, 1), got {self.p_drop}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.batch < 2:
            raise ValueError("batch size must be >= 2 for batch normalization")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class LocModel:
    """Parameters and batch-norm buffers of the regressor.

    ``params`` holds everything the optimizer updates; ``buffers`` holds
    running statistics.  Names are stable and double as checkpoint keys.
    """

    def __init__(self, input_dim=INPUT_DIM, width=256, n_blocks=3, p_drop=0.2, seed=0):
        if not 0 <= p_drop < 1:
            raise ValueError(f"p_drop must be in [0, 1), got {p_drop}")
        self.input_dim = input_dim
        self.width = width
        self.n_blocks = n_blocks
        self.p_drop = p_drop
        self.version = MODEL_VERSION
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {"num_batches_tracked": np.zeros(())}
        rng = np.random.default_rng([seed, 2])
        # layers feeding batch norm carry no bias: BN's shift makes it redundant
        self._add_linear("in", input_dim, width, rng, bias=False)
        self._add_bn("in.bn", width)
        for layer in self.block_layers():
            self._add_linear(layer, width, width, rng, bias=False)
            self._add_bn(layer + ".bn", width)
        self._add_linear("out", width, 2, rng)
        self.params["out.W"] *= HEAD_INIT_SCALE

    def _add_linear(self, name, n_in, n_out, rng, bias=True):
        bound = math.sqrt(6.0 / n_in)  # He-uniform, fan-in
        self.params[name + ".W"] = rng.uniform(-bound, bound, size=(n_in, n_out))
        if bias:
            self.params[name + ".b"] = np.zeros(n_out)

    def _add_bn(self, name, n):
        self.params[name + ".gamma"] = np.ones(n)
        self.params[name + ".beta"] = np.zeros(n)
        self.buffers[name + ".mean"] = np.zeros(n)
        self.buffers[name + ".var"] = np.ones(n)

    def block_layers(self):
        return [f"block{i}.{j}" for i in range(self.n_blocks) for j in range(2)]

    def linear_layers(self):
        return ["in", *self.block_layers(), "out"]

    def weight_names(self):
        return [n + ".W" for n in self.linear_layers()]

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def trained(self) -> bool:
        return bool(self.buffers["num_batches_tracked"] > 0)

    def copy(self) -> "LocModel":
        return copy.deepcopy(self)

    def architecture(self) -> dict:
        return {
            "version": self.version,
            "input_dim": self.input_dim,
            "width": self.width,
            "n_blocks": self.n_blocks,
            "p_drop": self.p_drop,
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"param/" + k: v for k, v in self.params.items()}
        out.update({"buffer/" + k: np.asarray(v, dtype=float) for k, v in self.buffers.items()})
        return out

    @classmethod
    def from_state(cls, arch: dict, arrays: dict[str, np.ndarray]) -> "LocModel":
        if arch.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported architecture version {arch.get('version')!r}")
        m = cls(arch["input_dim"], arch["width"], arch["n_blocks"], arch["p_drop"])
        expected = set(m.state_arrays())
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise ValueError(f"checkpoint arrays do not match architecture (missing {missing}, extra {extra})")
        for k, v in arrays.items():
            kind, name = k.split("/", 1)
            target = m.params if kind == "param" else m.buffers
            if np.shape(target[name]) != np.shape(v):
                raise ValueError(f"shape mismatch for {k}: {np.shape(v)} vs {np.shape(target[name])}")
            target[name] = np.array(v, dtype=float)
        return m


# ------------------------------------------------------------------ forward


def _dropout_mask(rng, shape, p):
    """Boolean keep-mask; kept units are rescaled by 1/(1-p) at the call site."""
    if p <= 0:
        return None
    return rng.random(shape, dtype=np.float32) >= p


def forward(model: LocModel, x, mode: str = "eval", rng=None, keep_cache=False, momentum=0.1,
            update_stats=True):
    """Run the network on ``x`` of shape (34,) or (N, 34).

    Returns a :class:`PredictionHead`; with ``keep_cache`` also returns the
    intermediate values :func:`backward` needs.  ``rng`` drives the
    dropout masks in ``train``/``mc`` mode.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.input_dim:
        raise ValueError(f"expected inputs with {model.input_dim} features, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in network input")
    if mode == "train" and x.shape[0] < 2:
        raise BatchNormError("batch normalization in train mode needs a batch of at least 2")
    p = model.p_drop if mode in ("train", "mc") else 0.0
    if p > 0 and rng is None:
        rng = np.random.default_rng()
    P, B = model.params, model.buffers
    cache = {"x": x, "mode": mode}

    def linear_bn_relu(h, name):
        z = h @ P[name + ".W"]
        bn = name + ".bn"
        if mode == "train":
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            if update_stats:
                n = z.shape[0]
                B[bn + ".mean"] = (1 - momentum) * B[bn + ".mean"] + momentum * mean
                B[bn + ".var"] = (1 - momentum) * B[bn + ".var"] + momentum * var * n / (n - 1)
        else:
            mean, var = B[bn + ".mean"], B[bn + ".var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        z -= mean
        z *= inv_std
        xhat = z
        y = xhat * P[bn + ".gamma"]
        y += P[bn + ".beta"]
        active = y > 0
        a = np.multiply(y, active, out=y)
        if keep_cache:
            cache[name] = (h, xhat, inv_std, active)
        return a

    h = linear_bn_relu(x, "in")
    for i in range(model.n_blocks):
        res = h
        for j in range(2):
            name = f"block{i}.{j}"
            a = linear_bn_relu(h, name)
            mask = _dropout_mask(rng, a.shape, p)
            if mask is not None:
                a *= mask
                a *= 1.0 / (1.0 - p)
            if keep_cache:
                cache[name + ".mask"] = mask
            h = a
        h = h + res
    out = h @ P["out.W"] + P["out.b"]
    if keep_cache:
        cache["out"] = h
    if mode == "train" and update_stats:
        B["num_batches_tracked"] = B["num_batches_tracked"] + 1
    mu, s = out[:, 0], out[:, 1]
    if single:
        mu, s = mu[0], s[0]
    head = PredictionHead(mu, s)
    return (head, cache) if keep_cache else head


def backward(model: LocModel, cache: dict, d_mu, d_s) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar whose output gradients are (d_mu, d_s)."""
    P = model.params
    grads = {}
    dout = np.column_stack([np.atleast_1d(d_mu), np.atleast_1d(d_s)])
    h = cache["out"]
    grads["out.W"] = h.T @ dout
    grads["out.b"] = dout.sum(axis=0)
    dh = dout @ P["out.W"].T
    batch_stats = cache["mode"] == "train"

    def back_linear_bn_relu(da, name):
        h_in, xhat, inv_std, active = cache[name]
        dy = da * active
        bn = name + ".bn"
        gamma = P[bn + ".gamma"]
        d_gamma = np.einsum("ij,ij->j", dy, xhat)
        d_beta = dy.sum(axis=0)
        grads[bn + ".gamma"] = d_gamma
        grads[bn + ".beta"] = d_beta
        if batch_stats:
            # d/dz of gamma * (z - mean(z)) / std(z) + beta, folded into one pass
            n = dy.shape[0]
            dz = dy
            dz *= n
            dz -= d_beta
            dz -= xhat * d_gamma
            dz *= inv_std * gamma / n
        else:
            dz = dy
            dz *= inv_std * gamma
        grads[name + ".W"] = h_in.T @ dz
        return dz @ P[name + ".W"].T

    for i in reversed(range(model.n_blocks)):
        d_res = dh
        for j in reversed(range(2)):
            name = f"block{i}.{j}"
            mask = cache[name + ".mask"]
            if mask is not None:
                dh = dh * mask
                dh *= 1.0 / (1.0 - model.p_drop)
            dh = back_linear_bn_relu(dh, name)
        dh = dh + d_res
    back_linear_bn_relu(dh, "in")
    return grads


# ------------------------------------------------------------------ losses


def _check_targets(x):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise InvalidTargetError("target distances must be positive")
    return x


def laplace_loss(x, mu, s):
    """Relative Laplace NLL ``|1 - mu/x| / exp(s) + log 2 + s`` (elementwise)."""
    x = _check_targets(x)
    return np.abs(1.0 - np.asarray(mu) / x) * np.exp(-np.asarray(s)) + LOG2 + s


def gaussian_loss(x, mu, s):
    """Relative Gaussian NLL ``(1 - mu/x)^2 / (2 exp(2s)) + s`` (constant dropped)."""
    x = _check_targets(x)
    r = 1.0 - np.asarray(mu) / x
    return r * r * 0.5 * np.exp(-2.0 * np.asarray(s)) + s


def l1_loss(x, mu):
    x = _check_targets(x)
    return np.abs(x - np.asarray(mu))


def loss_and_grad(kind: str, x, mu, s):
    """Mean loss over the batch and its gradients w.r.t. mu and s."""
    x = _check_targets(x)
    n = x.shape[0]
    if kind == "laplace":
        r = 1.0 - mu / x
        e = np.exp(-s)
        val = np.abs(r) * e + LOG2 + s
        d_mu = np.sign(r) * (-1.0 / x) * e
        d_s = 1.0 - np.abs(r) * e
    elif kind == "gaussian":
        r = 1.0 - mu / x
        e2 = np.exp(-2.0 * s)
        val = 0.5 * r * r * e2 + s
        d_mu = r * (-1.0 / x) * e2
        d_s = 1.0 - r * r * e2
    elif kind == "l1":
        val = np.abs(x - mu)
        d_mu = -np.sign(x - mu)
        d_s = np.zeros_like(s)
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return float(val.mean()), d_mu / n, d_s / n


def weight_decay_term(model: LocModel, p_drop: float, N: int) -> float:
    """(1 - p_drop) / (2N) * ||theta||^2 over the linear weight matrices."""
    if N < 1:
        raise ValueError("N must be >= 1")
    sq = sum(float(np.sum(model.params[w] ** 2)) for w in model.weight_names())
    return (1.0 - p_drop) / (2.0 * N) * sq


def weight_decay_grads(model: LocModel, p_drop: float, N: int) -> dict[str, np.ndarray]:
    c = (1.0 - p_drop) / N
    return {w: c * model.params[w] for w in model.weight_names()}


def objective_and_grads(model, x, targets, kind, N, rng=None, wd_scale=1.0, momentum=0.1,
                        update_stats=True):
    """Train-mode mean loss plus the dropout prior term, with all gradients."""
    head, cache = forward(model, x, "train", rng=rng, keep_cache=True, momentum=momentum,
                          update_stats=update_stats)
    val, d_mu, d_s = loss_and_grad(kind, targets, head.mu, head.s)
    grads = backward(model, cache, d_mu, d_s)
    if wd_scale:
        val += wd_scale * weight_decay_term(model, model.p_drop, N)
        for k, g in weight_decay_grads(model, model.p_drop, N).items():
            grads[k] = grads[k] + wd_scale * g
    return val, grads


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """In-place Adam update with bias correction; returns ``state``."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        if state.m[k].shape != g.shape:
            raise ValueError(f"optimizer state shape mismatch for {k}")
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        params[k] -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
    return state


# ------------------------------------------------------------------ training


@dataclass
class History:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_ale: list = field(default_factory=list)
    best_epoch: int = -1

    def rows(self):
        return list(zip(self.epoch, self.train_loss, self.val_loss, self.val_ale))


def predict(model: LocModel, x, mode="eval", rng=None, chunk=4096) -> PredictionHead:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mus, ss = [], []
    for i in range(0, x.shape[0], chunk):
        head = forward(model, x[i : i + chunk], mode, rng=rng)
        mus.append(np.atleast_1d(head.mu))
        ss.append(np.atleast_1d(head.s))
    return PredictionHead(np.concatenate(mus), np.concatenate(ss))


def _data_loss(kind, x, head):
    if kind == "laplace":
        return float(laplace_loss(x, head.mu, head.s).mean())
    if kind == "gaussian":
        return float(gaussian_loss(x, head.mu, head.s).mean())
    return float(l1_loss(x, head.mu).mean())


def train(train_x, train_y, cfg: TrainConfig = TrainConfig(), val_x=None, val_y=None,
          model: LocModel | None = None):
    """Fit a model with Adam on shuffled mini-batches.

    Validation (eval mode) runs after every epoch; the returned model is
    the one with the lowest validation loss (last epoch when no
    validation data is given).  A fresh model starts with its distance
    output at the mean training distance.
    """
    train_x = np.asarray(train_x, dtype=float)
    train_y = _check_targets(train_y)
    n = train_x.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if n < 2:
        raise BatchNormError("need at least 2 training samples")
    if model is None:
        model = LocModel(train_x.shape[1], cfg.width, cfg.n_blocks, cfg.p_drop, seed=cfg.seed)
        model.params["out.b"][0] = float(train_y.mean())  # start mu at the mean distance, s at 0
    has_val = val_x is not None and len(val_x) > 0
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    drop_rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    hist = History()
    best = (math.inf, None)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch):
            idx = order[start : start + cfg.batch]
            if idx.size < 2:
                continue  # a lone leftover sample cannot be batch-normalized
            val, grads = objective_and_grads(
                model, train_x[idx], train_y[idx], cfg.loss, n, rng=drop_rng,
                wd_scale=cfg.weight_decay, momentum=cfg.bn_momentum,
            )
            if not math.isfinite(val) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"non-finite loss/gradient at epoch {epoch}, batch starting {start} (loss={val})")
            adam_step(model.params, grads, state, cfg.lr, cfg.betas, cfg.eps)
            total += val * idx.size
            seen += idx.size
        train_loss = total / seen
        if has_val:
            head = predict(model, val_x)
            val_loss = _data_loss(cfg.loss, val_y, head)
            val_ale = float(np.mean(np.abs(head.mu - np.asarray(val_y))))
        else:
            val_loss, val_ale = train_loss, float("nan")
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        hist.epoch.append(epoch)
        hist.train_loss.append(train_loss)
        hist.val_loss.append(val_loss)
        hist.val_ale.append(val_ale)
        if val_loss < best[0]:
            best = (val_loss, model.copy())
            hist.best_epoch = epoch
        log.debug("epoch %d train %.5f val %.5f ale %.4f", epoch, train_loss, val_loss, val_ale)
    return best[1], hist


def require_trained(model: LocModel):
    if not model.trained:
        raise UntrainedModelError("model has never seen a training batch; batch-norm statistics are uninitialized")
