"""Minimal dense-tensor toolkit with reverse-mode gradients.

Implements exactly the layers the text CNN needs (embedding lookup, 1-d
valid convolution with max-over-time pooling, dense layers, softmax
cross-entropy, inverted dropout), the Nesterov-Adam optimizer, a central
finite-difference gradient checker, and a binary checkpoint container.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .base import TrainingError, ValidationError


class Tensor:
    """A dense float array with an optional gradient buffer.

    Ops on tensors record a backward closure; calling backward() on a scalar
    result accumulates gradients into every reachable tensor that has
    requires_grad set.
    """

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValidationError("backward() requires a scalar tensor")
        topo = []
        seen = set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None:
                t._backward()

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def _result(data, parents, backward, dtype=None):
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=dtype or data.dtype)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a, b):
    data = a.data + b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    out = _result(data, (a, b), backward)
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a, b):
    data = a.data @ b.data

    def backward():
        if b.data.ndim == 2:
            # flatten leading axes so 1-d, 2-d, and batched inputs share a path
            a2 = a.data.reshape(-1, a.data.shape[-1])
            g2 = out.grad.reshape(-1, out.data.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                b._accumulate(a2.T @ g2)
        else:
            if a.requires_grad:
                a._accumulate(out.grad @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                g = np.swapaxes(a.data, -1, -2) @ out.grad
                b._accumulate(_unbroadcast(g, b.data.shape))

    out = _result(data, (a, b), backward)
    return out


def relu(x):
    mask = x.data > 0
    data = x.data * mask

    def backward():
        if x.requires_grad:
            x._accumulate(out.grad * mask)

    out = _result(data, (x,), backward)
    return out


def concat(tensors, axis=-1):
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward():
        pieces = np.split(out.grad, np.cumsum(sizes)[:-1], axis=axis)
        for t, g in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(g)

    out = _result(data, tuple(tensors), backward)
    return out


def embedding(table, ids):
    """Row lookup: ids (...,) int array -> (..., emb_dim). Gradients
    scatter-add back into the table."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward():
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, ids.ravel(), out.grad.reshape(-1, table.data.shape[1]))
            table._accumulate(g)

    out = _result(data, (table,), backward)
    return out


def dropout(x, rate, mode, rng=None):
    """Inverted dropout: train mode zeros each element with probability
    `rate` and scales survivors by 1/(1-rate); eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate {rate} not in [0, 1)")
    if mode not in ("train", "eval"):
        raise ValidationError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        data = x.data.copy()

        def backward():
            if x.requires_grad:
                x._accumulate(out.grad)

        out = _result(data, (x,), backward)
        return out

    if rng is None:
        raise ValidationError("dropout in train mode needs an rng")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    data = x.data * keep

    def backward():
        if x.requires_grad:
            x._accumulate(out.grad * keep)

    out = _result(data, (x,), backward)
    return out


def dense(x, weights, bias=None):
    """Affine map x @ W (+ b). Raises on dimension mismatch."""
    if x.data.shape[-1] != weights.data.shape[0]:
        raise ValidationError(
            f"dense: input dim {x.data.shape[-1]} != weight rows {weights.data.shape[0]}"
        )
    out = matmul(x, weights)
    if bias is not None:
        if bias.data.shape[-1] != weights.data.shape[1]:
            raise ValidationError("dense: bias dim does not match weight columns")
        out = add(out, bias)
    return out


def _as_batched(x):
    if x.data.ndim == 2:
        return x, True
    if x.data.ndim == 3:
        return x, False
    raise ValidationError(f"expected (seq, emb) or (batch, seq, emb), got shape {x.data.shape}")


def conv1d_maxpool(x, filters, bias=None, lengths=None):
    """Valid 1-d convolution over time, ReLU, then max over time.

    x: (seq, emb) or (batch, seq, emb); filters: (width, emb, n_maps).
    `lengths` gives each example's true token count; windows that start
    beyond max(1, length - width + 1) cover padding only and are masked out
    of the max with -inf. Returns (n_maps,) or (batch, n_maps).
    """
    x, single = _as_batched(x)
    if single:
        data3 = x.data[None]
    else:
        data3 = x.data
    batch, seq_len, emb = data3.shape
    width, f_emb, n_maps = filters.data.shape
    if emb != f_emb:
        raise ValidationError(f"conv1d: embedding dim {emb} != filter dim {f_emb}")
    if seq_len < width:
        raise ValidationError(f"conv1d: sequence length {seq_len} < filter width {width}")
    n_pos = seq_len - width + 1

    # im2col: (batch, n_pos, width*emb)
    cols = np.stack([data3[:, i : i + n_pos, :] for i in range(width)], axis=2)
    cols = cols.reshape(batch, n_pos, width * emb)
    flat_filters = filters.data.reshape(width * emb, n_maps)
    conv = cols @ flat_filters
    if bias is not None:
        conv = conv + bias.data
    activ = np.maximum(conv, 0.0)

    if lengths is not None:
        lengths = np.asarray(lengths).reshape(-1)
        valid = np.maximum(1, np.minimum(lengths - width + 1, n_pos))
    else:
        valid = np.full(batch, n_pos)
    mask = np.arange(n_pos)[None, :] < valid[:, None]
    masked = np.where(mask[:, :, None], activ, -np.inf)
    argmax = masked.argmax(axis=1)  # (batch, n_maps)
    pooled = np.take_along_axis(masked, argmax[:, None, :], axis=1)[:, 0, :]
    data = pooled[0] if single else pooled

    def backward():
        g_pool = out.grad if not single else out.grad[None]
        g_act = np.zeros_like(activ)
        np.put_along_axis(g_act, argmax[:, None, :], g_pool[:, None, :], axis=1)
        g_conv = g_act * (conv > 0)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g_conv.sum(axis=(0, 1)))
        if filters.requires_grad:
            g_flat = np.einsum("bpc,bpm->cm", cols, g_conv)
            filters._accumulate(g_flat.reshape(width, emb, n_maps))
        if x.requires_grad:
            g_cols = (g_conv @ flat_filters.T).reshape(batch, n_pos, width, emb)
            g_x = np.zeros_like(data3)
            for i in range(width):
                g_x[:, i : i + n_pos, :] += g_cols[:, :, i, :]
            x._accumulate(g_x if not single else g_x[0])

    parents = (x, filters) if bias is None else (x, filters, bias)
    out = _result(data, parents, backward)
    return out


def softmax(logits):
    """Row-wise softmax of a plain array (no graph)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy over the batch.

    logits: (batch, n_classes) or (n_classes,); labels: int class indices.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    data2 = logits.data if logits.data.ndim == 2 else logits.data[None]
    if labels.shape[0] != data2.shape[0]:
        raise ValidationError(
            f"softmax_xent: {labels.shape[0]} labels for batch of {data2.shape[0]}"
        )
    if labels.min() < 0 or labels.max() >= data2.shape[1]:
        raise ValidationError("softmax_xent: label out of range")
    shifted = data2 - data2.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    batch = data2.shape[0]
    loss = -log_probs[np.arange(batch), labels].mean()

    def backward():
        if logits.requires_grad:
            g = np.exp(log_probs)
            g[np.arange(batch), labels] -= 1.0
            g *= out.grad / batch
            logits._accumulate(g if logits.data.ndim == 2 else g[0])

    out = _result(np.asarray(loss), (logits,), backward)
    return out


class Nadam:
    """Adam with Nesterov momentum applied to the first-moment term.

    Per parameter: m <- b1*m + (1-b1)*g, v <- b2*v + (1-b2)*g^2, then the
    bias-corrected update uses the look-ahead blend
    b1*m/(1-b1^(t+1)) + (1-b1)*g/(1-b1^t), divided by sqrt(v/(1-b2^t)) + eps.
    """

    def __init__(self, params, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {p.name or i}")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** (t + 1))
            g_hat = g / (1 - b1**t)
            v_hat = self.v[i] / (1 - b2**t)
            p.data -= self.lr * (b1 * m_hat + (1 - b1) * g_hat) / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": list(self.m), "v": list(self.v)}


def gradient_check(make_loss, tensors, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `make_loss` re-evaluates the scalar loss from scratch; `tensors` are the
    leaves to check (must have requires_grad). Relative error is
    |a - n| / max(|a|, |n|, 1e-6).
    """
    for t in tensors:
        t.zero_grad()
    loss = make_loss()
    loss.backward()
    analytic = [np.array(t.grad, copy=True) for t in tensors]

    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = float(make_loss().data)
            flat[j] = orig - eps
            down = float(make_loss().data)
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            ref = a.reshape(-1)[j]
            err = abs(ref - numeric) / max(abs(ref), abs(numeric), 1e-6)
            worst = max(worst, err)
    for t in tensors:
        t.zero_grad()
    return worst


_MAGIC = b"MMCK"


def save_checkpoint(path, arrays, meta=None):
    """Write named arrays as a JSON header plus raw little-endian float data."""
    names = list(arrays)
    header = {
        "byte_order": "little",
        "entries": [
            {"name": n, "shape": list(arrays[n].shape), "dtype": str(arrays[n].dtype)}
            for n in names
        ],
    }
    if meta is not None:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            little = np.dtype(arrays[n].dtype).newbyteorder("<")
            f.write(np.ascontiguousarray(arrays[n], dtype=little).tobytes())


def load_checkpoint(path, with_meta=False):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValidationError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        out = {}
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * dtype.itemsize)
            arr = np.frombuffer(buf, dtype=dtype, count=count).reshape(shape)
            out[entry["name"]] = arr.astype(np.dtype(entry["dtype"]))
        if with_meta:
            return out, header.get("meta")
        return out
