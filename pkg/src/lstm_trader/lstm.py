"""Deep LSTM with a stacked-hidden dense head, trained by BPTT and ADAM.

Row-vector convention throughout: ``z = x @ W_x + h @ W_h + b``. The four
gate blocks of each layer are stored side by side in one matrix, ordered
input, output, forget, candidate; the named accessors (``W_ix``, ``W_oh``,
...) return views into that storage.

The dense head maps every hidden state of the last layer, stacked as a
``(B*T, H)`` matrix, through a single ``H x O`` weight plus a bias that is
either one value per stacked row (the default) or one shared value.
"""

from __future__ import annotations

import copy
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

GATES = ("i", "o", "f", "h")
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    """Non-finite loss during training; ``last_finite`` is the last good iteration (-1 if none)."""

    def __init__(self, last_finite: int, message: str = ""):
        super().__init__(message or f"training diverged after iteration {last_finite}")
        self.last_finite = last_finite


@dataclass
class NetworkConfig:
    num_layers: int = 3
    hidden_size: int = 64
    window: int = 22
    dropout: float = 0.5
    input_size: int = 6
    output_size: int = 1
    batch_size: int = 1
    iterations: int = 1600
    seed: int = 0
    base_lr: float = 0.01
    lr_decay: float = 0.96
    decay_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    per_position_bias: bool = True
    normalize: bool = True
    warm_start: bool = True

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "window", "input_size", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.output_size != 1:
            raise ValueError("only scalar outputs (output_size=1) are supported")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerParams:
    Wx: np.ndarray  # (in, 4H)
    Wh: np.ndarray  # (H, 4H)
    b: np.ndarray   # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.Wh.shape[0]

    def _block(self, arr, gate):
        H = self.hidden_size
        k = GATES.index(gate)
        return arr[..., k * H:(k + 1) * H]

    W_ix = property(lambda self: self._block(self.Wx, "i"))
    W_ox = property(lambda self: self._block(self.Wx, "o"))
    W_fx = property(lambda self: self._block(self.Wx, "f"))
    W_hx = property(lambda self: self._block(self.Wx, "h"))
    W_ih = property(lambda self: self._block(self.Wh, "i"))
    W_oh = property(lambda self: self._block(self.Wh, "o"))
    W_fh = property(lambda self: self._block(self.Wh, "f"))
    W_hh = property(lambda self: self._block(self.Wh, "h"))
    b_i = property(lambda self: self._block(self.b, "i"))
    b_o = property(lambda self: self._block(self.b, "o"))
    b_f = property(lambda self: self._block(self.b, "f"))
    b_h = property(lambda self: self._block(self.b, "h"))


@dataclass
class NetworkParams:
    layers: list[LayerParams]
    W_y: np.ndarray  # (H, O)
    b_y: np.ndarray  # (B*T, O) or (1, O)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for k, layer in enumerate(self.layers):
            out += [(f"layer{k}.Wx", layer.Wx), (f"layer{k}.Wh", layer.Wh),
                    (f"layer{k}.b", layer.b)]
        out += [("W_y", self.W_y), ("b_y", self.b_y)]
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]

    def copy(self) -> "NetworkParams":
        return copy.deepcopy(self)

    def num_dense_params(self) -> int:
        return self.W_y.size + self.b_y.size

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_glorot(config: NetworkConfig, seed: int | None = None) -> NetworkParams:
    """Glorot-uniform weights (each gate matrix on its own fan-in/fan-out), zero biases."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    H = config.hidden_size
    layers = []
    in_size = config.input_size
    for _ in range(config.num_layers):
        Wx = np.concatenate([_glorot(rng, in_size, H) for _ in GATES], axis=1)
        Wh = np.concatenate([_glorot(rng, H, H) for _ in GATES], axis=1)
        layers.append(LayerParams(Wx, Wh, np.zeros(4 * H)))
        in_size = H
    W_y = _glorot(rng, H, config.output_size)
    rows = config.batch_size * config.window if config.per_position_bias else 1
    b_y = np.zeros((rows, config.output_size))
    return NetworkParams(layers, W_y, b_y)


def zeros_like_params(params: NetworkParams) -> NetworkParams:
    return NetworkParams(
        [LayerParams(np.zeros_like(l.Wx), np.zeros_like(l.Wh), np.zeros_like(l.b))
         for l in params.layers],
        np.zeros_like(params.W_y), np.zeros_like(params.b_y))


def sigmoid(x):
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ForwardCache:
    x_in: list          # per layer (B, T, in) after dropout
    masks: list         # per layer mask or None
    i: list
    o: list
    f: list
    g: list
    c: list             # (B, T+1, H), index 0 is the zero initial state
    tc: list
    h: list             # (B, T+1, H)
    stacked_hidden: np.ndarray  # (B*T, H)
    outputs: np.ndarray         # (B, T)
    params: NetworkParams = field(repr=False)


def _as_batch(window):
    x = np.asarray(window, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"window must be (T, I) or (B, T, I), got shape {x.shape}")
    return x


def dropout_masks(params: NetworkParams, shape_bt, p: float, rng) -> list:
    """Inverted-dropout masks for the input of every layer."""
    B, T = shape_bt
    masks = []
    for layer in params.layers:
        keep = rng.random((B, T, layer.Wx.shape[0])) >= p
        masks.append(keep / (1.0 - p))
    return masks


def forward(params: NetworkParams, window, train_mode: bool = False,
            dropout: float = 0.0, dropout_seed=None, masks=None):
    """Run the network on one window (``(T, I)``) or a batch (``(B, T, I)``).

    Returns ``(outputs, stacked_hidden, cache)`` where ``outputs`` has shape
    ``(T,)`` for a single window and ``(B, T)`` for a batch. Output position
    ``k`` is the prediction for the day after input row ``k``.
    """
    x = _as_batch(window)
    single = np.ndim(window) == 2
    B, T, _ = x.shape
    if x.shape[2] != params.layers[0].Wx.shape[0]:
        raise ShapeError(f"input width {x.shape[2]} != {params.layers[0].Wx.shape[0]}")
    if params.b_y.shape[0] not in (1, B * T):
        raise ShapeError(f"dense bias has {params.b_y.shape[0]} rows, need {B * T} or 1")
    if train_mode and dropout > 0.0 and masks is None:
        masks = dropout_masks(params, (B, T), dropout, np.random.default_rng(dropout_seed))
    if not (train_mode and masks is not None):
        masks = [None] * len(params.layers)

    cache = ForwardCache([], [], [], [], [], [], [], [], [], None, None, params)
    inp = x
    for layer, mask in zip(params.layers, masks):
        H = layer.hidden_size
        if mask is not None:
            inp = inp * mask
        zx = (inp.reshape(B * T, -1) @ layer.Wx).reshape(B, T, 4 * H) + layer.b
        i_s = np.empty((B, T, H)); o_s = np.empty((B, T, H))
        f_s = np.empty((B, T, H)); g_s = np.empty((B, T, H))
        c_s = np.zeros((B, T + 1, H)); tc_s = np.empty((B, T, H))
        h_s = np.zeros((B, T + 1, H))
        Wh = layer.Wh
        for s in range(T):
            z = zx[:, s] + h_s[:, s] @ Wh
            gates = sigmoid(z[:, :3 * H])
            i_s[:, s] = gates[:, :H]
            o_s[:, s] = gates[:, H:2 * H]
            f_s[:, s] = gates[:, 2 * H:]
            g_s[:, s] = np.tanh(z[:, 3 * H:])
            c_s[:, s + 1] = f_s[:, s] * c_s[:, s] + i_s[:, s] * g_s[:, s]
            tc_s[:, s] = np.tanh(c_s[:, s + 1])
            h_s[:, s + 1] = tc_s[:, s] * o_s[:, s]
        cache.x_in.append(inp); cache.masks.append(mask)
        cache.i.append(i_s); cache.o.append(o_s); cache.f.append(f_s); cache.g.append(g_s)
        cache.c.append(c_s); cache.tc.append(tc_s); cache.h.append(h_s)
        inp = h_s[:, 1:]
    stacked = inp.reshape(B * T, -1)
    out = (stacked @ params.W_y + params.b_y)[:, 0].reshape(B, T)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite network output")
    cache.stacked_hidden = stacked
    cache.outputs = out
    return (out[0] if single else out), stacked, cache


def mse_loss(outputs, targets) -> float:
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise ShapeError(f"outputs {outputs.shape} vs targets {targets.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.mean((outputs - targets) ** 2))


def backward(cache: ForwardCache, targets, scale: float = 1.0) -> NetworkParams:
    """Exact gradients of ``scale * mse_loss`` for every parameter, by BPTT."""
    params = cache.params
    out = cache.outputs
    if np.size(targets) != out.size:
        raise ShapeError(f"targets of size {np.size(targets)} vs outputs {out.shape}")
    tgt = np.asarray(targets, dtype=np.float64).reshape(out.shape)
    B, T = out.shape
    grads = zeros_like_params(params)

    dout = (2.0 * scale / out.size) * (out - tgt)           # (B, T)
    dflat = dout.reshape(B * T, 1)
    grads.W_y[:] = cache.stacked_hidden.T @ dflat
    if params.b_y.shape[0] == 1:
        grads.b_y[:] = dflat.sum(axis=0, keepdims=True)
    else:
        grads.b_y[:] = dflat
    dh_seq = (dflat @ params.W_y.T).reshape(B, T, -1)

    for k in reversed(range(len(params.layers))):
        layer = params.layers[k]
        H = layer.hidden_size
        i_s, o_s, f_s, g_s = cache.i[k], cache.o[k], cache.f[k], cache.g[k]
        c_s, tc_s, h_s = cache.c[k], cache.tc[k], cache.h[k]
        dz = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        WhT = layer.Wh.T
        for s in reversed(range(T)):
            dh = dh_seq[:, s] + dh_next
            tc = tc_s[:, s]
            o = o_s[:, s]; i = i_s[:, s]; f = f_s[:, s]; g = g_s[:, s]
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz[:, s, :H] = dc * g * i * (1.0 - i)
            dz[:, s, H:2 * H] = dh * tc * o * (1.0 - o)
            dz[:, s, 2 * H:3 * H] = dc * c_s[:, s] * f * (1.0 - f)
            dz[:, s, 3 * H:] = dc * i * (1.0 - g * g)
            dc_next = dc * f
            dh_next = dz[:, s] @ WhT
        g_layer = grads.layers[k]
        dzf = dz.reshape(B * T, 4 * H)
        g_layer.Wh[:] = h_s[:, :-1].reshape(B * T, H).T @ dzf
        g_layer.Wx[:] = cache.x_in[k].reshape(B * T, -1).T @ dzf
        g_layer.b[:] = dzf.sum(axis=0)
        if k > 0:
            dx = (dzf @ layer.Wx.T).reshape(B, T, -1)
            if cache.masks[k] is not None:
                dx = dx * cache.masks[k]
            dh_seq = dx
    return grads


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    base_lr: float = 0.01
    decay: float = 0.96
    decay_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetworkParams, config: NetworkConfig | None = None,
                   **overrides) -> "AdamState":
        kw = {}
        if config is not None:
            kw = dict(base_lr=config.base_lr, decay=config.lr_decay,
                      decay_steps=config.decay_steps, beta1=config.beta1,
                      beta2=config.beta2, eps=config.adam_eps)
        kw.update(overrides)
        return cls([np.zeros_like(a) for a in params.arrays()],
                   [np.zeros_like(a) for a in params.arrays()], **kw)

    def learning_rate(self, step: int | None = None) -> float:
        k = self.step if step is None else step
        return self.base_lr * self.decay ** (k / self.decay_steps)


def adam_step(params: NetworkParams, grads: NetworkParams, state: AdamState) -> NetworkParams:
    """One bias-corrected ADAM update, applied in place; returns ``params``."""
    lr = state.learning_rate()
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def clip_gradients(grads: NetworkParams, max_norm: float) -> float:
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.arrays())))
    if norm > max_norm:
        for g in grads.arrays():
            g *= max_norm / norm
    return norm


@dataclass
class TrainResult:
    params: NetworkParams
    initial_loss: float
    final_loss: float
    iterations: int
    losses: np.ndarray = field(repr=False, default=None)


def evaluate_loss(params: NetworkParams, window, targets) -> float:
    out, _, _ = forward(params, window, train_mode=False)
    return mse_loss(out, np.asarray(targets).reshape(np.shape(out)))


def train_on_window(params: NetworkParams, window, targets, config: NetworkConfig,
                    seed=None) -> TrainResult:
    """Run ``config.iterations`` forward/backward/ADAM cycles on one window (or batch).

    The input parameters are not modified. ``initial_loss`` and ``final_loss``
    are inference-mode (no dropout) losses before and after training; a fresh
    ADAM state and learning-rate schedule is used for every call.
    """
    params = params.copy()
    window = np.asarray(window, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    initial = evaluate_loss(params, window, targets)
    if config.iterations == 0:
        return TrainResult(params, initial, initial, 0, np.empty(0))
    rng = np.random.default_rng(config.seed if seed is None else seed)
    state = AdamState.for_params(params, config)
    losses = np.empty(config.iterations)
    x = _as_batch(window)
    tgt = targets.reshape(x.shape[0], x.shape[1])
    for it in range(config.iterations):
        masks = None
        if config.dropout > 0:
            masks = dropout_masks(params, x.shape[:2], config.dropout, rng)
        try:
            out, _, cache = forward(params, x, train_mode=True, masks=masks)
        except FloatingPointError:
            raise TrainingDiverged(it - 1) from None
        loss = mse_loss(out, tgt)
        if not np.isfinite(loss):
            raise TrainingDiverged(it - 1)
        losses[it] = loss
        grads = backward(cache, tgt)
        if config.grad_clip is not None:
            clip_gradients(grads, config.grad_clip)
        adam_step(params, grads, state)
        if not all(np.all(np.isfinite(a)) for a in params.arrays()):
            raise TrainingDiverged(it)
    try:
        final = evaluate_loss(params, window, targets)
    except FloatingPointError:
        raise TrainingDiverged(config.iterations - 1) from None
    return TrainResult(params, initial, final, config.iterations, losses)


def save_params(path, params: NetworkParams, config: NetworkConfig, meta: dict | None = None):
    """Write a versioned ``.npz`` checkpoint (no pickling; exact float64 round trip)."""
    header = {"version": CHECKPOINT_VERSION, "config": config.to_dict(),
              "num_layers": len(params.layers), "meta": meta or {}}
    arrays = {name: a for name, a in params.named_arrays()}
    arrays["__meta__"] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(params, config, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__meta__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        layers = [LayerParams(data[f"layer{k}.Wx"].copy(), data[f"layer{k}.Wh"].copy(),
                              data[f"layer{k}.b"].copy())
                  for k in range(header["num_layers"])]
        params = NetworkParams(layers, data["W_y"].copy(), data["b_y"].copy())
    return params, NetworkConfig.from_dict(header["config"]), header["meta"]
