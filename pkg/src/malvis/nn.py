"""Hand-written CNN: three conv blocks (conv, ReLU, max-pool, dropout,
batch norm), flatten, two dense layers and a softmax classification head.

Forward and backward passes are explicit numpy so the last conv feature
map and its class-score gradients stay accessible to the explanation
methods.  Training is plain SGD with classical momentum.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import (BadMagic, ChecksumError, MissingTrace, NonFiniteLoss,
                     ShapeMismatch, VersionMismatch)
from .seeding import rng_for

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

CKPT_MAGIC = b"MVXC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class Hyperparams:
    kernel_first_conv: int = 5
    lambda_norm: bool = True
    dense1: int = 1024
    dense2: int = 256
    dropout_conv: float = 0.1
    dropout_dense: float = 0.3
    learning_rate: float = 0.0003
    momentum: float = 0.95
    filters: tuple[int, int, int] = (32, 64, 128)
    kernel_rest: int = 3
    batch_size: int = 32

    def validate(self) -> None:
        if not (0.0 <= self.dropout_conv < 1.0 and 0.0 <= self.dropout_dense < 1.0):
            raise ValueError("dropout rates must be in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")


# ---------------------------------------------------------------------------
# layer primitives


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(logits.dtype)


def conv2d_same(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """'same' convolution, stride 1. x (N,Cin,H,W), w (F,Cin,k,k)."""
    n, _, h, wd = x.shape
    f, _, k, _ = w.shape
    pl = (k - 1) // 2
    pr = k - 1 - pl
    xp = np.pad(x, ((0, 0), (0, 0), (pl, pr), (pl, pr)))
    acc = np.zeros((f, n, h, wd), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            acc += np.tensordot(w[:, :, u, v], xp[:, :, u:u + h, v:v + wd], axes=([1], [1]))
    y = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    if b is not None:
        y += b[None, :, None, None]
    return y


def conv2d_same_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray,
                         need_dx: bool = True):
    """Gradients of conv2d_same: returns (dx, dw, db)."""
    n, cin, h, wd = x.shape
    f, _, k, _ = w.shape
    pl = (k - 1) // 2
    pr = k - 1 - pl
    xp = np.pad(x, ((0, 0), (0, 0), (pl, pr), (pl, pr)))
    dyt = np.ascontiguousarray(dy.transpose(1, 0, 2, 3))  # (F,N,H,W)
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    for u in range(k):
        for v in range(k):
            xs = xp[:, :, u:u + h, v:v + wd]
            dw[:, :, u, v] = np.tensordot(dyt, xs, axes=([1, 2, 3], [0, 2, 3]))
            if need_dx:
                g = np.tensordot(w[:, :, u, v], dyt, axes=([0], [0]))  # (Cin,N,H,W)
                dxp[:, :, u:u + h, v:v + wd] += g.transpose(1, 0, 2, 3)
    db = dy.sum(axis=(0, 2, 3))
    dx = dxp[:, :, pl:pl + h, pl:pl + wd] if need_dx else None
    return dx, dw, db


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool2(x: np.ndarray) -> np.ndarray:
    """2x2/stride-2 max pool; trailing odd row/col dropped."""
    h, w = x.shape[2], x.shape[3]
    ho, wo = h // 2, w // 2
    core = x[:, :, :ho * 2, :wo * 2]
    y = np.maximum(np.maximum(core[:, :, 0::2, 0::2], core[:, :, 0::2, 1::2]),
                   np.maximum(core[:, :, 1::2, 0::2], core[:, :, 1::2, 1::2]))
    return y


def maxpool2_backward(dy: np.ndarray, x: np.ndarray, pooled: np.ndarray) -> np.ndarray:
    """Route gradients to each cell's max; on exact ties the first
    position in row-major order within the cell wins."""
    h, w = x.shape[2], x.shape[3]
    ho, wo = h // 2, w // 2
    dx = np.zeros_like(x)
    avail = np.ones(dy.shape, dtype=bool)
    for si, sj in _POOL_OFFSETS:
        sl = x[:, :, si:ho * 2:2, sj:wo * 2:2]
        hit = (sl == pooled) & avail
        np.copyto(dx[:, :, si:ho * 2:2, sj:wo * 2:2], dy, where=hit)
        avail &= ~hit
    return dx


def bn_forward_train(x, gamma, beta):
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv.astype(x.dtype), mu, var)


def bn_forward_eval(x, gamma, beta, rmean, rvar):
    inv = 1.0 / np.sqrt(rvar + BN_EPS)
    scale = (gamma * inv).astype(x.dtype)
    return x * scale[None, :, None, None] + (beta - gamma * rmean * inv)[None, :, None, None]


def bn_backward_train(dy, gamma, cache):
    xhat, inv, _, _ = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    dx = inv[None, :, None, None] * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype) -> np.ndarray:
    """Inverted dropout mask: kept units scaled by 1/(1-rate)."""
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / dtype(keep)


# ---------------------------------------------------------------------------
# the model


@dataclass
class ForwardTrace:
    """Cached activations for one forward pass, including the last conv
    feature map A (post-ReLU, pre-pool)."""

    mode: str
    x: np.ndarray
    blocks: list[dict] = field(default_factory=list)
    A: np.ndarray | None = None
    flat: np.ndarray | None = None
    head: dict = field(default_factory=dict)
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None


@dataclass
class OptimizerState:
    velocities: dict[str, np.ndarray]

    @classmethod
    def for_model(cls, model: "Model") -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in model.params.items()})


class Model:
    """Fixed 3-block CNN with a 2-hidden-dense softmax head."""

    def __init__(self, n_classes: int, hp: Hyperparams | None = None, input_side: int = 64,
                 seed: int = 0, dtype=np.float32, class_labels: list[str] | None = None):
        hp = hp or Hyperparams()
        hp.validate()
        if input_side % 8 != 0 or input_side < 8:
            raise ShapeMismatch(f"input side {input_side} must be a multiple of 8")
        if class_labels is not None and len(class_labels) != n_classes:
            raise ShapeMismatch("class_labels length != n_classes")
        self.hp = hp
        self.n_classes = n_classes
        self.input_side = input_side
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        self.class_labels = list(class_labels) if class_labels else None

        f1, f2, f3 = hp.filters
        side3 = input_side // 8
        self.flat_dim = f3 * side3 * side3
        rng = rng_for(seed, "init")

        def he(shape, fan_in):
            return (rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)).astype(self.dtype)

        k1, k = hp.kernel_first_conv, hp.kernel_rest
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        chans = [1, f1, f2, f3]
        kernels = [k1, k, k]
        for i in range(3):
            cin, cout = chans[i], chans[i + 1]
            ksz = kernels[i]
            self.params[f"conv{i}_w"] = he((cout, cin, ksz, ksz), cin * ksz * ksz)
            self.params[f"conv{i}_b"] = np.zeros(cout, dtype=self.dtype)
            self.params[f"bn{i}_gamma"] = np.ones(cout, dtype=self.dtype)
            self.params[f"bn{i}_beta"] = np.zeros(cout, dtype=self.dtype)
            self.buffers[f"bn{i}_mean"] = np.zeros(cout, dtype=self.dtype)
            self.buffers[f"bn{i}_var"] = np.ones(cout, dtype=self.dtype)
        self.params["fc1_w"] = he((self.flat_dim, hp.dense1), self.flat_dim)
        self.params["fc1_b"] = np.zeros(hp.dense1, dtype=self.dtype)
        self.params["fc2_w"] = he((hp.dense1, hp.dense2), hp.dense1)
        self.params["fc2_b"] = np.zeros(hp.dense2, dtype=self.dtype)
        self.params["out_w"] = he((hp.dense2, n_classes), hp.dense2)
        self.params["out_b"] = np.zeros(n_classes, dtype=self.dtype)
        self._drop_rng = rng_for(seed, "dropout")

    # -- forward -----------------------------------------------------------

    def _check_input(self, x) -> np.ndarray:
        if hasattr(x, "values"):  # InputTensor
            x = x.values
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.input_side \
                or x.shape[3] != self.input_side:
            raise ShapeMismatch(f"expected (*,1,{self.input_side},{self.input_side}), "
                                f"got {x.shape}")
        return x

    def forward(self, x: np.ndarray, mode: str = "eval", want_trace: bool = False,
                use_dropout: bool = True, update_stats: bool = True):
        """Returns class probabilities (N, C); with ``want_trace`` also the
        cached activations.  Eval mode is deterministic (no dropout,
        running-stat normalization).  ``use_dropout``/``update_stats`` let
        the statistics-refresh pass reuse the train-mode path."""
        if mode not in ("train", "eval"):
            raise ValueError(f"bad mode {mode!r}")
        x = self._check_input(x)
        trace = ForwardTrace(mode=mode, x=x)
        cur = x
        for i in range(3):
            blk: dict = {"x_in": cur}
            z = conv2d_same(cur, self.params[f"conv{i}_w"], self.params[f"conv{i}_b"])
            r = np.maximum(z, 0)
            if i == 2:
                trace.A = r
            p = maxpool2(r)
            blk["relu_out"] = r
            blk["pool_out"] = p
            rate = self.hp.dropout_conv
            if mode == "train" and use_dropout and rate > 0:
                dmask = dropout_mask(p.shape, rate, self._drop_rng, self.dtype)
                p = p * dmask
                blk["drop_mask"] = dmask
            else:
                blk["drop_mask"] = None
            blk["bn_in"] = p
            if mode == "train":
                y, cache = bn_forward_train(p, self.params[f"bn{i}_gamma"],
                                            self.params[f"bn{i}_beta"])
                xh, inv, mu, var = cache
                if update_stats:
                    self.buffers[f"bn{i}_mean"] = (
                        (1 - BN_MOMENTUM) * self.buffers[f"bn{i}_mean"]
                        + BN_MOMENTUM * mu).astype(self.dtype)
                    self.buffers[f"bn{i}_var"] = (
                        (1 - BN_MOMENTUM) * self.buffers[f"bn{i}_var"]
                        + BN_MOMENTUM * var).astype(self.dtype)
                blk["bn_cache"] = cache
            else:
                y = bn_forward_eval(p, self.params[f"bn{i}_gamma"], self.params[f"bn{i}_beta"],
                                    self.buffers[f"bn{i}_mean"], self.buffers[f"bn{i}_var"])
                blk["bn_cache"] = None
            trace.blocks.append(blk)
            cur = y
        flat = cur.reshape(cur.shape[0], -1)
        trace.flat = flat
        head: dict = {}
        h = flat
        for name in ("fc1", "fc2"):
            z = h @ self.params[f"{name}_w"] + self.params[f"{name}_b"]
            mask = z > 0
            h = z * mask
            head[f"{name}_in"] = flat if name == "fc1" else head["fc1_out"]
            head[f"{name}_mask"] = mask
            rate = self.hp.dropout_dense
            if mode == "train" and use_dropout and rate > 0:
                dmask = dropout_mask(h.shape, rate, self._drop_rng, self.dtype)
                h = h * dmask
                head[f"{name}_drop"] = dmask
            else:
                head[f"{name}_drop"] = None
            head[f"{name}_out"] = h
        logits = h @ self.params["out_w"] + self.params["out_b"]
        probs = softmax(logits)
        trace.head = head
        trace.logits = logits
        trace.probs = probs
        if want_trace:
            return probs, trace
        return probs

    def predict_proba(self, x: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Deterministic eval-mode probabilities, chunked over the batch."""
        x = self._check_input(x)
        outs = [self.forward(x[i:i + chunk], mode="eval") for i in range(0, len(x), chunk)]
        return np.concatenate(outs, axis=0)

    def param_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(self.params[name].tobytes())
        for name in sorted(self.buffers):
            h.update(self.buffers[name].tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# backward


def _backward_from_dlogits(model: Model, trace: ForwardTrace, dlogits: np.ndarray,
                           need_params: bool = True, stop_at_feature_map: bool = False):
    """Shared backward walk.  Returns (grads or None, d feature map A)."""
    if trace is None or trace.logits is None:
        raise MissingTrace("forward trace required for backward")
    p = model.params
    head = trace.head
    grads: dict[str, np.ndarray] = {} if need_params else None

    if need_params:
        grads["out_w"] = head["fc2_out"].T @ dlogits
        grads["out_b"] = dlogits.sum(axis=0)
    d = dlogits @ p["out_w"].T
    for name in ("fc2", "fc1"):
        if head[f"{name}_drop"] is not None:
            d = d * head[f"{name}_drop"]
        d = d * head[f"{name}_mask"]
        if need_params:
            grads[f"{name}_w"] = head[f"{name}_in"].T @ d
            grads[f"{name}_b"] = d.sum(axis=0)
        d = d @ p[f"{name}_w"].T
    n = trace.x.shape[0]
    f3 = model.hp.filters[2]
    side3 = model.input_side // 8
    d = d.reshape(n, f3, side3, side3)

    d_feature = None
    for i in (2, 1, 0):
        blk = trace.blocks[i]
        gamma = p[f"bn{i}_gamma"]
        if trace.mode == "train":
            d, dgamma, dbeta = bn_backward_train(d, gamma, blk["bn_cache"])
            if need_params:
                grads[f"bn{i}_gamma"] = dgamma
                grads[f"bn{i}_beta"] = dbeta
        else:
            inv = 1.0 / np.sqrt(model.buffers[f"bn{i}_var"] + BN_EPS)
            if need_params:
                xhat = (blk["bn_in"] - model.buffers[f"bn{i}_mean"][None, :, None, None]) \
                    * inv[None, :, None, None]
                grads[f"bn{i}_gamma"] = (d * xhat).sum(axis=(0, 2, 3))
                grads[f"bn{i}_beta"] = d.sum(axis=(0, 2, 3))
            d = d * (gamma * inv).astype(d.dtype)[None, :, None, None]
        if blk["drop_mask"] is not None:
            d = d * blk["drop_mask"]
        d = maxpool2_backward(d, blk["relu_out"], blk["pool_out"])
        if i == 2:
            d_feature = d.copy()
            if stop_at_feature_map:
                return grads, d_feature
        d = d * (blk["relu_out"] > 0)
        dx, dw, db = conv2d_same_backward(blk["x_in"], p[f"conv{i}_w"], d, need_dx=(i > 0))
        if need_params:
            grads[f"conv{i}_w"] = dw
            grads[f"conv{i}_b"] = db
        d = dx
    return grads, d_feature


def backward(model: Model, trace: ForwardTrace, labels: np.ndarray):
    """Exact gradients of the mean cross-entropy for every parameter tensor,
    plus the loss gradient at the last conv feature map.

    Returns (loss, grads dict, dA)."""
    if trace is None or trace.logits is None:
        raise MissingTrace("forward trace required for backward")
    loss, dlogits = softmax_xent(trace.logits, np.asarray(labels))
    grads, d_a = _backward_from_dlogits(model, trace, dlogits, need_params=True)
    return loss, grads, d_a


def class_score_feature_grad(model: Model, x: np.ndarray, class_idx: int):
    """(A, dScore_c/dA) for the pre-softmax class score, eval mode."""
    probs, trace = model.forward(x, mode="eval", want_trace=True)
    dlogits = np.zeros_like(trace.logits)
    dlogits[:, class_idx] = 1.0
    _, d_a = _backward_from_dlogits(model, trace, dlogits, need_params=False,
                                    stop_at_feature_map=True)
    return trace.A, d_a


def eval_scores_from_feature_map(model: Model, a: np.ndarray) -> np.ndarray:
    """Logits computed from a given last-conv feature map through the
    eval-mode tail (pool, norm, dense head).  Reference path for verifying
    feature-map gradients."""
    pooled = maxpool2(np.asarray(a, dtype=model.dtype))
    y = bn_forward_eval(pooled, model.params["bn2_gamma"], model.params["bn2_beta"],
                        model.buffers["bn2_mean"], model.buffers["bn2_var"])
    h = y.reshape(y.shape[0], -1)
    for name in ("fc1", "fc2"):
        h = relu(h @ model.params[f"{name}_w"] + model.params[f"{name}_b"])
    return h @ model.params["out_w"] + model.params["out_b"]


# ---------------------------------------------------------------------------
# training


def refresh_bn_stats(model: Model, x: np.ndarray, batch_size: int) -> None:
    """Replace the running normalization statistics with the mean of the
    batch statistics over ``x`` (weights frozen, dropout off).  Keeps
    eval-mode behavior aligned with the current parameters even when an
    epoch has few optimizer steps."""
    sums: dict[str, np.ndarray] = {}
    n_batches = 0
    for start in range(0, len(x), batch_size):
        _, trace = model.forward(x[start:start + batch_size], mode="train",
                                 want_trace=True, use_dropout=False, update_stats=False)
        for i, blk in enumerate(trace.blocks):
            _, _, mu, var = blk["bn_cache"]
            sums[f"bn{i}_mean"] = sums.get(f"bn{i}_mean", 0) + mu
            sums[f"bn{i}_var"] = sums.get(f"bn{i}_var", 0) + var
        n_batches += 1
    for name, total in sums.items():
        model.buffers[name] = (total / n_batches).astype(model.dtype)


def momentum_update(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
                    lr: float, momentum: float) -> None:
    """Classical momentum, in place: v <- m*v - lr*g; w <- w + v."""
    velocity *= momentum
    velocity -= lr * grad
    param += velocity


def train_step(model: Model, opt: OptimizerState, x: np.ndarray, y: np.ndarray) -> float:
    """One SGD-with-momentum step over a batch; returns the batch loss."""
    _, trace = model.forward(x, mode="train", want_trace=True)
    loss, grads, _ = backward(model, trace, y)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss became {loss}")
    lr = model.dtype(model.hp.learning_rate)
    mom = model.dtype(model.hp.momentum)
    for name, g in grads.items():
        momentum_update(model.params[name], g, opt.velocities[name], lr, mom)
    return loss


def train(model: Model, x_train: np.ndarray, y_train: np.ndarray,
          x_val: np.ndarray | None, y_val: np.ndarray | None,
          epochs: int, seed: int, patience: int | None = None,
          batch_size: int | None = None) -> list[dict]:
    """Train in place; returns per-epoch history.  Deterministic under
    (seed, data order).  Optional early stop on a val-accuracy plateau."""
    bs = batch_size or model.hp.batch_size
    opt = OptimizerState.for_model(model)
    order_rng = rng_for(seed, "order")
    history: list[dict] = []
    best_val = -np.inf
    since_best = 0
    have_val = x_val is not None and len(x_val) > 0
    for epoch in range(epochs):
        perm = order_rng.permutation(len(x_train))
        losses = []
        for start in range(0, len(x_train), bs):
            idx = perm[start:start + bs]
            losses.append(train_step(model, opt, x_train[idx], y_train[idx]))
        refresh_bn_stats(model, x_train, bs)
        val_acc = float("nan")
        if have_val:
            pred = predict(model, x_val)[0]
            val_acc = float((pred == y_val).mean())
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "val_accuracy": val_acc})
        if patience is not None and have_val:
            if val_acc > best_val + 1e-12:
                best_val = val_acc
                since_best = 0
            else:
                since_best += 1
                if since_best >= patience:
                    break
    return history


def predict(model: Model, x: np.ndarray):
    """(predicted class(es), probability vector(s)); eval mode, lowest
    index wins ties."""
    single = np.asarray(x).ndim == 2
    probs = model.predict_proba(x)
    classes = probs.argmax(axis=1)
    if single:
        return int(classes[0]), probs[0]
    return classes, probs


# ---------------------------------------------------------------------------
# checkpoints


def _tensor_order(model: Model) -> list[tuple[str, np.ndarray]]:
    items = [(n, model.params[n]) for n in sorted(model.params)]
    items += [(n, model.buffers[n]) for n in sorted(model.buffers)]
    return items


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Binary checkpoint: magic, version, length-prefixed JSON header,
    raw little-endian tensor payloads, trailing CRC32."""
    hp = asdict(model.hp)
    hp["filters"] = list(hp["filters"])
    tensors = [{"name": n, "shape": list(t.shape)} for n, t in _tensor_order(model)]
    header = {"version": CKPT_VERSION, "n_classes": model.n_classes,
              "input_side": model.input_side, "seed": model.seed,
              "dtype": np.dtype(model.dtype).name, "class_labels": model.class_labels,
              "hyperparams": hp, "tensors": tensors}
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray()
    body += CKPT_MAGIC
    body += CKPT_VERSION.to_bytes(4, "little")
    body += len(hjson).to_bytes(4, "little")
    body += hjson
    le = np.dtype(model.dtype).newbyteorder("<")
    for _, t in _tensor_order(model):
        body += np.ascontiguousarray(t, dtype=le).tobytes()
    crc = zlib.crc32(bytes(body))
    body += crc.to_bytes(4, "little")
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: bad checkpoint magic {raw[:4]!r}")
    if zlib.crc32(raw[:-4]) != int.from_bytes(raw[-4:], "little"):
        raise ChecksumError(f"{path}: checkpoint CRC mismatch")
    version = int.from_bytes(raw[4:8], "little")
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    hlen = int.from_bytes(raw[8:12], "little")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    hp_d = dict(header["hyperparams"])
    hp_d["filters"] = tuple(hp_d["filters"])
    hp = Hyperparams(**hp_d)
    model = Model(n_classes=header["n_classes"], hp=hp, input_side=header["input_side"],
                  seed=header["seed"], dtype=np.dtype(header["dtype"]).type,
                  class_labels=header["class_labels"])
    le = np.dtype(model.dtype).newbyteorder("<")
    pos = 12 + hlen
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * le.itemsize
        arr = np.frombuffer(raw[pos:pos + nbytes], dtype=le).reshape(shape)
        arr = np.ascontiguousarray(arr, dtype=model.dtype)
        name = spec["name"]
        if name in model.params:
            model.params[name] = arr
        else:
            model.buffers[name] = arr
        pos += nbytes
    return model


def checkpoint_digest(path: str | Path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
