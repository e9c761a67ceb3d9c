"""Small fully connected network with hand-written backpropagation.

Shared by the alignment network and the closed-loop baseline policies.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MLP_MAGIC = b"RARMLP1"


class CheckpointError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__("training diverged at epoch %d (loss=%r)" % (epoch, loss))
        self.epoch = epoch
        self.loss = loss


@dataclass
class MLP:
    """ReLU hidden layers and a linear output head."""

    weights: list
    biases: list

    @classmethod
    def init(cls, sizes, rng: np.random.Generator) -> MLP:
        ws, bs = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            # He initialization suits the ReLU hidden layers
            ws.append(rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in))
            bs.append(np.zeros(n_out))
        return cls(ws, bs)

    @property
    def sizes(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> MLP:
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, X: np.ndarray, keep: bool = False):
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts: list, dout: np.ndarray) -> list:
        """Gradients ordered like ``params()`` given dL/d(output)."""
        grads = [None] * (2 * len(self.weights))
        g = dout
        for i in range(len(self.weights) - 1, -1, -1):
            h_in = acts[i]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * (acts[i] > 0)
        return grads

    def round_float32(self) -> None:
        self.weights = [w.astype(np.float32).astype(np.float64) for w in self.weights]
        self.biases = [b.astype(np.float32).astype(np.float64) for b in self.biases]


def weighted_mse(pred: np.ndarray, target: np.ndarray, weights: np.ndarray):
    """Loss = mean over rows of sum_k w_k (pred_k - target_k)^2, and its gradient."""
    r = pred - target
    n = pred.shape[0]
    loss = float(np.sum(weights * r * r) / n)
    return loss, 2.0 * weights * r / n


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> Standardizer:
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd = np.where(sd < 1e-8, 1.0, sd)
        return cls(mu, sd)

    @classmethod
    def identity(cls, dim: int) -> Standardizer:
        return cls(np.zeros(dim), np.ones(dim))

    def apply(self, X):
        return (X - self.mean) / self.scale

    def invert(self, Z):
        return Z * self.scale + self.mean


@dataclass
class Regressor:
    """MLP plus input/output standardization."""

    net: MLP
    x_norm: Standardizer
    y_norm: Standardizer
    meta: dict = field(default_factory=dict)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return self.y_norm.invert(self.net.forward(self.x_norm.apply(X)))


@dataclass
class SGDConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    validation_fraction: float = 0.1
    loss_weights: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.batch_size > 0 and self.epochs > 0):
            raise ValueError("learning_rate, batch_size and epochs must be positive")
        if not 0 < self.validation_fraction < 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5)")


@dataclass
class FitResult:
    model: Regressor
    train_loss: list
    val_loss: list


def split_indices(n: int, fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = max(1, int(round(fraction * n))) if n >= 2 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit(X: np.ndarray, Y: np.ndarray, hidden: tuple, cfg: SGDConfig) -> FitResult:
    """Minibatch gradient descent on weighted MSE in standardized space.

    Reported losses are the weighted MSE in original target units.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) < 2:
        raise ValueError("need at least two training pairs")
    rng = np.random.default_rng(cfg.seed)
    tr, va = split_indices(len(X), cfg.validation_fraction, rng)
    x_norm = Standardizer.fit(X[tr])
    y_norm = Standardizer.fit(Y[tr])
    w = np.asarray(cfg.loss_weights or (1.0,) * Y.shape[1], dtype=np.float64)
    net = MLP.init((X.shape[1],) + tuple(hidden) + (Y.shape[1],), rng)
    model = Regressor(net, x_norm, y_norm)
    Xs, Ys = x_norm.apply(X), y_norm.apply(Y)

    def report(idx):
        return weighted_mse(model.predict(X[idx]), Y[idx], w)[0]

    train_curve, val_curve = [report(tr)], [report(va)]
    for epoch in range(1, cfg.epochs + 1):
        order = tr[rng.permutation(len(tr))]
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            out, acts = net.forward(Xs[b], keep=True)
            _, dout = weighted_mse(out, Ys[b], w)
            for p, g in zip(net.params(), net.backward(acts, dout)):
                p -= cfg.learning_rate * g
        tl, vl = report(tr), report(va)
        if not (np.isfinite(tl) and np.isfinite(vl)):
            raise DivergenceError(epoch, tl)
        train_curve.append(tl)
        val_curve.append(vl)
    net.round_float32()
    return FitResult(model, train_curve, val_curve)


def gradient_check(net: MLP, X: np.ndarray, Y: np.ndarray, weights=None, n_coords: int = 200,
                   h: float = 1e-5, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
    coordinates whose true gradient is zero from dividing by rounding noise.
    """
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    w = np.ones(Y.shape[1]) if weights is None else np.asarray(weights, dtype=float)

    def loss():
        return weighted_mse(net.forward(X), Y, w)[0]

    out, acts = net.forward(X, keep=True)
    grads = net.backward(acts, weighted_mse(out, Y, w)[1])
    params = net.params()
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[k]), params[k].shape)
        old = params[k][idx]
        params[k][idx] = old + h
        lp = loss()
        params[k][idx] = old - h
        lm = loss()
        params[k][idx] = old
        num = (lp - lm) / (2 * h)
        ana = float(grads[k][idx])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


# -- checkpoint files --------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_bytes(model: Regressor, descriptor_id: str) -> bytes:
    """magic, descriptor id, meta json, layer shapes, float32 weights, float64 stats, CRC32."""
    import json

    body = io.BytesIO()
    body.write(MLP_MAGIC)
    body.write(_pack_str(descriptor_id))
    body.write(_pack_str(json.dumps(model.meta, sort_keys=True)))
    net = model.net
    body.write(struct.pack("<I", len(net.weights)))
    for w in net.weights:
        body.write(struct.pack("<II", *w.shape))
    for w, b in zip(net.weights, net.biases):
        body.write(w.astype("<f4").tobytes())
        body.write(b.astype("<f4").tobytes())
    for s in (model.x_norm, model.y_norm):
        body.write(s.mean.astype("<f8").tobytes())
        body.write(s.scale.astype("<f8").tobytes())
    data = body.getvalue()
    return data + struct.pack("<I", zlib.crc32(data))


def load_bytes(data: bytes) -> tuple[Regressor, str]:
    import json

    if len(data) < len(MLP_MAGIC) + 4 or not data.startswith(MLP_MAGIC):
        raise CheckpointError("not a model checkpoint (bad magic)")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint CRC mismatch (corrupt or truncated file)")
    f = io.BytesIO(payload[len(MLP_MAGIC):])

    def read(n):
        b = f.read(n)
        if len(b) != n:
            raise CheckpointError("truncated checkpoint")
        return b

    def read_str():
        (n,) = struct.unpack("<I", read(4))
        return read(n).decode("utf-8")

    descriptor = read_str()
    meta = json.loads(read_str())
    (n_layers,) = struct.unpack("<I", read(4))
    shapes = [struct.unpack("<II", read(8)) for _ in range(n_layers)]
    ws, bs = [], []
    for r, c in shapes:
        ws.append(np.frombuffer(read(4 * r * c), dtype="<f4").reshape(r, c).astype(np.float64))
        bs.append(np.frombuffer(read(4 * c), dtype="<f4").astype(np.float64))
    stats = []
    for dim in (shapes[0][0], shapes[-1][1]):
        mean = np.frombuffer(read(8 * dim), dtype="<f8").copy()
        scale = np.frombuffer(read(8 * dim), dtype="<f8").copy()
        stats.append(Standardizer(mean, scale))
    if f.read(1):
        raise CheckpointError("trailing bytes in checkpoint")
    return Regressor(MLP(ws, bs), stats[0], stats[1], meta), descriptor
