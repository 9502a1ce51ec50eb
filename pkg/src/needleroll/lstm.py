"""Recurrent roll estimator: LSTM + fully-connected + linear head, trained
with full-sequence backpropagation through time and Adam.

Layout and conventions, shared by the streaming path, the batched training
path, the serializer, and the test oracles:

- feature vector x (8): (sensed position / z_max (3), sensed heading (3),
  sin base_angle, cos base_angle)
- target y (2): (sin roll, cos roll)
- gate order inside the stacked (4H, .) matrices: input, forget, cell
  candidate, output; sigmoid on i/f/o, tanh on the candidate
- fully-connected layer: tanh activation, inverted dropout on its
  activations in training mode only
- output layer: linear
- loss: RMSE over every component of every timestep of every sequence in
  the batch (padded steps excluded via masks)

Everything runs in float64. The streaming estimator and the offline
run_sequence call the exact same forward_step, so their outputs are
bit-identical by construction; the batched training forward is a separate
vectorized path validated against run_sequence in tests.
"""

from __future__ import annotations

import copy
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from needleroll.plant import SensedTip
from needleroll.se3 import Pose, recompose_roll, wrap_angle

MODEL_SCHEMA_VERSION = 1


class DegenerateOutput(ValueError):
    """Network emitted a near-zero (sin, cos) pair: no angle to read."""


class Diverged(RuntimeError):
    """Training loss became non-finite."""


def scale_features(position, heading, base_angle: float, z_max: float) -> np.ndarray:
    """Build the 8-component input: scaled position, heading, angle encoding."""
    if z_max <= 0.0:
        raise ValueError("z_max must be positive")
    position = np.asarray(position, dtype=float)
    heading = np.asarray(heading, dtype=float)
    return np.concatenate([
        position / z_max,
        heading,
        [math.sin(base_angle), math.cos(base_angle)],
    ])


def roll_target(roll: float) -> np.ndarray:
    """Angle encoded as (sin, cos): continuous and bounded in [-1, 1]."""
    return np.array([math.sin(roll), math.cos(roll)])


def estimate_roll(y) -> float:
    """Angle read back from a (sin, cos) pair, in (-pi, pi].

    Magnitude does not matter (atan2 is scale-invariant) but a near-zero
    pair carries no angle and signals a broken or untrained model.
    """
    y = np.asarray(y, dtype=float)
    if float(np.linalg.norm(y)) <= 1e-6:
        raise DegenerateOutput("output vector too small to define an angle")
    return wrap_angle(math.atan2(y[0], y[1]))


@dataclass
class LstmModel:
    """All trainable parameters plus the constants inference needs."""

    w_x: np.ndarray  # (4H, D) input-to-gates
    w_h: np.ndarray  # (4H, H) hidden-to-gates
    b_g: np.ndarray  # (4H,)
    w_fc: np.ndarray  # (H, H)
    b_fc: np.ndarray  # (H,)
    w_out: np.ndarray  # (2, H)
    b_out: np.ndarray  # (2,)
    z_max: float
    dropout_rate: float
    metadata: dict = field(default_factory=dict)

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]

    def params(self):
        """Fixed-order (name, array) pairs; the order is part of the
        optimizer and serialization contracts."""
        return [("w_x", self.w_x), ("w_h", self.w_h), ("b_g", self.b_g),
                ("w_fc", self.w_fc), ("b_fc", self.b_fc),
                ("w_out", self.w_out), ("b_out", self.b_out)]

    def validate(self):
        four_h, d = self.w_x.shape
        h = four_h // 4
        if four_h != 4 * h or self.w_h.shape != (four_h, h):
            raise ValueError("gate matrices must stack 4 gates of one hidden size")
        if self.b_g.shape != (four_h,) or self.w_fc.shape != (h, h):
            raise ValueError("inconsistent parameter shapes")
        if self.b_fc.shape != (h,) or self.w_out.shape != (2, h) or self.b_out.shape != (2,):
            raise ValueError("inconsistent parameter shapes")
        for name, arr in self.params():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")


@dataclass(frozen=True)
class LstmCellState:
    hidden: np.ndarray
    cell: np.ndarray


def zero_state(hidden_size: int) -> LstmCellState:
    return LstmCellState(np.zeros(hidden_size), np.zeros(hidden_size))


def init_model(input_size: int = 8, hidden_size: int = 30, z_max: float = 75.0,
               dropout_rate: float = 0.2, seed: int = 0,
               metadata: dict | None = None) -> LstmModel:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights; forget-gate bias starts at +1
    so early training does not flush the cell state."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1517]))
    bound = 1.0 / math.sqrt(hidden_size)
    four_h = 4 * hidden_size

    def u(*shape):
        return rng.uniform(-bound, bound, size=shape)

    b_g = u(four_h)
    b_g[hidden_size:2 * hidden_size] += 1.0
    model = LstmModel(
        w_x=u(four_h, input_size), w_h=u(four_h, hidden_size), b_g=b_g,
        w_fc=u(hidden_size, hidden_size), b_fc=u(hidden_size),
        w_out=u(2, hidden_size), b_out=u(2),
        z_max=z_max, dropout_rate=dropout_rate,
        metadata=dict(metadata or {}, seed=seed),
    )
    model.validate()
    return model


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def forward_step(model: LstmModel, state: LstmCellState, x, train_mode: bool = False,
                 dropout_rng=None):
    """One recurrent step. The single code path for streaming and offline
    inference; training uses the batched twin below."""
    x = np.asarray(x, dtype=float)
    h_size = model.hidden_size
    z = model.w_x @ x + model.w_h @ state.hidden + model.b_g
    gate_i = _sigmoid(z[:h_size])
    gate_f = _sigmoid(z[h_size:2 * h_size])
    gate_g = np.tanh(z[2 * h_size:3 * h_size])
    gate_o = _sigmoid(z[3 * h_size:])
    cell = gate_f * state.cell + gate_i * gate_g
    hidden = gate_o * np.tanh(cell)
    act = np.tanh(model.w_fc @ hidden + model.b_fc)
    if train_mode:
        if dropout_rng is None:
            raise ValueError("train_mode needs a dropout generator")
        keep = 1.0 - model.dropout_rate
        act = act * (dropout_rng.uniform(size=h_size) < keep) / keep
    y = model.w_out @ act + model.b_out
    return LstmCellState(hidden, cell), y


def run_sequence(model: LstmModel, xs, train_mode: bool = False,
                 dropout_rng=None) -> np.ndarray:
    """Offline forward pass: forward_step iterated from the zero state."""
    state = zero_state(model.hidden_size)
    out = np.empty((len(xs), 2))
    for t, x in enumerate(xs):
        state, y = forward_step(model, state, x, train_mode, dropout_rng)
        out[t] = y
    return out


# --------------------------------------------------------------- training path

def _pad_batch(seqs):
    """End-pad (xs, ys) pairs to a common length; mask marks real steps."""
    lengths = [len(xs) for xs, _ in seqs]
    t_max = max(lengths)
    batch = len(seqs)
    d = seqs[0][0].shape[1]
    xs = np.zeros((batch, t_max, d))
    ys = np.zeros((batch, t_max, 2))
    mask = np.zeros((batch, t_max))
    for k, (x_seq, y_seq) in enumerate(seqs):
        n = lengths[k]
        xs[k, :n] = x_seq
        ys[k, :n] = y_seq
        mask[k, :n] = 1.0
    return xs, ys, mask


def _forward_batch(model: LstmModel, xs, train_mode: bool, dropout_rng=None):
    """Vectorized forward over (B, T, D) inputs, caching every activation
    the backward pass needs. Padded steps are computed (cheap) and later
    masked out of the loss, which provably zeroes their gradients for
    end-padded sequences."""
    batch, t_max, _ = xs.shape
    h_size = model.hidden_size
    cache = {
        "x": xs,
        "i": np.empty((batch, t_max, h_size)), "f": np.empty((batch, t_max, h_size)),
        "g": np.empty((batch, t_max, h_size)), "o": np.empty((batch, t_max, h_size)),
        "c": np.empty((batch, t_max, h_size)), "tc": np.empty((batch, t_max, h_size)),
        "h_prev": np.empty((batch, t_max, h_size)),
        "h": np.empty((batch, t_max, h_size)),
        "act": np.empty((batch, t_max, h_size)),
        "drop": np.ones((batch, t_max, h_size)),
        "y": np.empty((batch, t_max, 2)),
    }
    hidden = np.zeros((batch, h_size))
    cell = np.zeros((batch, h_size))
    keep = 1.0 - model.dropout_rate
    for t in range(t_max):
        z = xs[:, t] @ model.w_x.T + hidden @ model.w_h.T + model.b_g
        gi = _sigmoid(z[:, :h_size])
        gf = _sigmoid(z[:, h_size:2 * h_size])
        gg = np.tanh(z[:, 2 * h_size:3 * h_size])
        go = _sigmoid(z[:, 3 * h_size:])
        cache["h_prev"][:, t] = hidden
        c_prev = cell
        cell = gf * c_prev + gi * gg
        tc = np.tanh(cell)
        hidden = go * tc
        act = np.tanh(hidden @ model.w_fc.T + model.b_fc)
        if train_mode:
            drop = (dropout_rng.uniform(size=(batch, h_size)) < keep) / keep
            cache["drop"][:, t] = drop
            act_d = act * drop
        else:
            act_d = act
        y = act_d @ model.w_out.T + model.b_out
        cache["i"][:, t], cache["f"][:, t] = gi, gf
        cache["g"][:, t], cache["o"][:, t] = gg, go
        cache["c"][:, t], cache["tc"][:, t] = cell, tc
        cache["h"][:, t], cache["act"][:, t] = hidden, act
        cache["y"][:, t] = y
    return cache


def batch_loss(pred, target, mask):
    """(rmse, sse, n): root-mean-square error over all real components."""
    diff = (pred - target) * mask[..., None]
    sse = float(np.sum(diff * diff))
    n = float(np.sum(mask) * pred.shape[-1])
    if n == 0:
        raise ValueError("empty batch")
    return math.sqrt(sse / n), sse, n


def sequence_rmse(model: LstmModel, seqs, chunk: int = 32) -> float:
    """RMSE of the no-dropout forward pass over a set of sequences."""
    sse = 0.0
    n = 0.0
    for start in range(0, len(seqs), chunk):
        xs, ys, mask = _pad_batch(seqs[start:start + chunk])
        cache = _forward_batch(model, xs, train_mode=False)
        _, s, m = batch_loss(cache["y"], ys, mask)
        sse += s
        n += m
    return math.sqrt(sse / n)


def backward(model: LstmModel, cache, target, mask):
    """Exact full-sequence BPTT gradients of the batch RMSE.

    Returns (grads keyed like model.params(), rmse, sse, n).
    """
    xs = cache["x"]
    batch, t_max, _ = xs.shape
    h_size = model.hidden_size
    rmse, sse, n = batch_loss(cache["y"], target, mask)
    grads = {name: np.zeros_like(arr) for name, arr in model.params()}
    if rmse == 0.0 or not math.isfinite(rmse):
        return grads, rmse, sse, n
    d_y_all = (cache["y"] - target) * mask[..., None] / (n * rmse)

    d_h_next = np.zeros((batch, h_size))
    d_c_next = np.zeros((batch, h_size))
    for t in range(t_max - 1, -1, -1):
        d_y = d_y_all[:, t]
        act, drop = cache["act"][:, t], cache["drop"][:, t]
        act_d = act * drop
        grads["w_out"] += d_y.T @ act_d
        grads["b_out"] += d_y.sum(axis=0)
        d_act = (d_y @ model.w_out) * drop
        d_fc_pre = d_act * (1.0 - act * act)
        hidden = cache["h"][:, t]
        grads["w_fc"] += d_fc_pre.T @ hidden
        grads["b_fc"] += d_fc_pre.sum(axis=0)

        d_h = d_fc_pre @ model.w_fc + d_h_next
        go, tc = cache["o"][:, t], cache["tc"][:, t]
        gi, gf, gg = cache["i"][:, t], cache["f"][:, t], cache["g"][:, t]
        c_prev = cache["c"][:, t - 1] if t > 0 else np.zeros((batch, h_size))
        d_o = d_h * tc
        d_c = d_h * go * (1.0 - tc * tc) + d_c_next
        d_i = d_c * gg
        d_g = d_c * gi
        d_f = d_c * c_prev
        d_c_next = d_c * gf

        d_z = np.concatenate([
            d_i * gi * (1.0 - gi),
            d_f * gf * (1.0 - gf),
            d_g * (1.0 - gg * gg),
            d_o * go * (1.0 - go),
        ], axis=1)
        grads["w_x"] += d_z.T @ xs[:, t]
        grads["w_h"] += d_z.T @ cache["h_prev"][:, t]
        grads["b_g"] += d_z.sum(axis=0)
        d_h_next = d_z @ model.w_h
    return grads, rmse, sse, n


class Adam:
    """Plain Adam over the model's fixed parameter order."""

    def __init__(self, model: LstmModel, learning_rate: float, beta1: float,
                 beta2: float, epsilon: float):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.moment1 = {name: np.zeros_like(arr) for name, arr in model.params()}
        self.moment2 = {name: np.zeros_like(arr) for name, arr in model.params()}

    def apply(self, model: LstmModel, grads: dict):
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, arr in model.params():
            g = grads[name]
            m = self.moment1[name]
            v = self.moment2[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= self.lr * (m / correction1) / (
                np.sqrt(v / correction2) + self.epsilon
            )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    dropout_rate: float = 0.2
    hidden_size: int = 30
    input_size: int = 8
    z_max: float = 75.0
    seed: int = 0


@dataclass(frozen=True)
class TrainLogRow:
    epoch: int
    train_loss: float
    val_rmse: float


def train(train_seqs, val_seqs, config: TrainConfig):
    """Fit on (xs, ys) sequence pairs; returns (best model, per-epoch log).

    Seeded shuffling each epoch, dropout in training passes only, model
    snapshot at every new best validation RMSE. Raises Diverged on a
    non-finite loss.
    """
    if not train_seqs or not val_seqs:
        raise ValueError("need non-empty train and validation sets")
    root = np.random.SeedSequence([config.seed, 0x4C53])
    shuffle_seed, dropout_seed = root.spawn(2)
    model = init_model(
        input_size=config.input_size, hidden_size=config.hidden_size,
        z_max=config.z_max, dropout_rate=config.dropout_rate,
        seed=config.seed,
        metadata={"train_episodes": len(train_seqs), "val_episodes": len(val_seqs)},
    )
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)
    optimizer = Adam(model, config.learning_rate, config.beta1, config.beta2,
                     config.adam_epsilon)
    log: list[TrainLogRow] = []
    best_model = copy.deepcopy(model)
    best_val = math.inf
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_seqs))
        sse_total = 0.0
        n_total = 0.0
        for start in range(0, len(order), config.batch_size):
            chunk = [train_seqs[k] for k in order[start:start + config.batch_size]]
            xs, ys, mask = _pad_batch(chunk)
            cache = _forward_batch(model, xs, train_mode=True,
                                   dropout_rng=dropout_rng)
            grads, rmse, sse, n = backward(model, cache, ys, mask)
            if not math.isfinite(rmse):
                raise Diverged(f"non-finite loss at epoch {epoch}")
            optimizer.apply(model, grads)
            sse_total += sse
            n_total += n
        train_loss = math.sqrt(sse_total / n_total)
        val_rmse = sequence_rmse(model, val_seqs)
        if not math.isfinite(val_rmse):
            raise Diverged(f"non-finite validation RMSE at epoch {epoch}")
        log.append(TrainLogRow(epoch=epoch, train_loss=train_loss,
                               val_rmse=val_rmse))
        if val_rmse < best_val:
            best_val = val_rmse
            best_model = copy.deepcopy(model)
    best_model.metadata["best_val_rmse"] = best_val
    return best_model, log


# ---------------------------------------------------------------- streaming

# Reported-pose position is a causal straight-line fit over a short window,
# evaluated at the newest sample: smoothing without the lag a plain moving
# average has against the steadily advancing tip. Raw positions make the
# bang-bang azimuth ill-conditioned once the target's radial offset shrinks
# toward the sensor noise scale and the controller starts chasing noise.
# The network inputs stay raw to match the training distribution.
POSITION_WINDOW = 12


def _endpoint_fit(points) -> np.ndarray:
    """Least-squares line through the window, evaluated at the last point."""
    n = len(points)
    if n < 3:
        return np.asarray(points[-1], dtype=float)
    stack = np.asarray(points, dtype=float)
    k = np.arange(n, dtype=float)
    k_mean = k.mean()
    centered = k - k_mean
    slope = (centered @ stack) / float(centered @ centered)
    return stack.mean(axis=0) + slope * (n - 1 - k_mean)


class RollEstimator:
    """Stateful wrapper exposing the controller-facing estimator interface:
    consume one 5-DOF measurement plus the commanded base angle, emit a full
    pose with the learned roll recomposed onto the sensed heading."""

    def __init__(self, model: LstmModel):
        model.validate()
        self.model = model
        self.state = zero_state(model.hidden_size)
        self.last_roll = None
        self._positions = deque(maxlen=POSITION_WINDOW)

    def reset(self):
        self.state = zero_state(self.model.hidden_size)
        self.last_roll = None
        self._positions.clear()

    def estimate(self, meas: SensedTip, base_angle: float) -> Pose:
        x = scale_features(meas.position, meas.heading, base_angle,
                           self.model.z_max)
        self.state, y = forward_step(self.model, self.state, x)
        roll = estimate_roll(y)
        self.last_roll = roll
        heading = np.asarray(meas.heading, dtype=float)
        heading = heading / np.linalg.norm(heading)
        self._positions.append(np.asarray(meas.position, dtype=float))
        position = _endpoint_fit(list(self._positions))
        return Pose(position, recompose_roll(heading, roll))


# ------------------------------------------------------------- serialization

def save_model(model: LstmModel, path):
    """Self-sufficient JSON model file: version, shapes, scaler, weights."""
    model.validate()
    doc = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "hidden_size": model.hidden_size,
        "input_size": model.input_size,
        "z_max": model.z_max,
        "dropout_rate": model.dropout_rate,
        "metadata": model.metadata,
        "params": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in model.params()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_model(path) -> LstmModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema: {doc.get('schema_version')}")
    arrays = {}
    for name, entry in doc["params"].items():
        arrays[name] = np.array(entry["data"], dtype=float).reshape(entry["shape"])
    model = LstmModel(
        w_x=arrays["w_x"], w_h=arrays["w_h"], b_g=arrays["b_g"],
        w_fc=arrays["w_fc"], b_fc=arrays["b_fc"],
        w_out=arrays["w_out"], b_out=arrays["b_out"],
        z_max=float(doc["z_max"]), dropout_rate=float(doc["dropout_rate"]),
        metadata=dict(doc.get("metadata", {})),
    )
    model.validate()
    return model
