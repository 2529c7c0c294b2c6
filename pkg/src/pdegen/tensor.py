"""Dense float64 tensors with a reverse-mode autodiff tape.

Arrays are plain numpy float64, rank <= 4 laid out as (batch, channel,
height, width). The op catalogue is fixed: exactly what the denoiser
nets, the residual stencils and the training losses need. A Tape owns
an append-only node list in topological order; backward() does a single
reverse sweep and accumulates gradients into Parameters blocks and any
requested input tensors.
"""

from __future__ import annotations

import json
import math
import numpy as np


class ContractViolation(ValueError):
    """Raised when an op is called outside its shape/value contract."""


class DeterminismError(RuntimeError):
    """Raised when a function under grad_check is not seed-deterministic."""


def _as_f64(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 4:
        raise ContractViolation(f"rank {a.ndim} > 4 not supported")
    return a


class Node:
    __slots__ = ("kind", "inputs", "value", "ctx", "needs_grad", "param_key")

    def __init__(self, kind, inputs, value, ctx, needs_grad, param_key=None):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.ctx = ctx
        self.needs_grad = needs_grad
        self.param_key = param_key


class Tensor:
    """Handle to a tape node."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self):
        return self.tape.nodes[self.nid].value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, kind={self.tape.nodes[self.nid].kind})"


class Parameters:
    """Named flat value blocks with matching gradient blocks."""

    def __init__(self, trainable: bool = True):
        self.blocks: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.trainable = trainable

    def add(self, name: str, value) -> None:
        if name in self.blocks:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        v = _as_f64(value).copy()
        self.blocks[name] = v
        self.grads[name] = np.zeros_like(v)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def clone(self, trainable: bool = True) -> "Parameters":
        p = Parameters(trainable=trainable)
        for k, v in self.blocks.items():
            p.add(k, v)
        return p

    def copy_from(self, other: "Parameters") -> None:
        for k in self.blocks:
            self.blocks[k][...] = other.blocks[k]

    def ema_update(self, online: "Parameters", decay: float) -> None:
        for k, v in self.blocks.items():
            v *= decay
            v += (1.0 - decay) * online.blocks[k]

    def flat_norm(self) -> float:
        return math.sqrt(sum(float((v * v).sum()) for v in self.blocks.values()))

    def __len__(self):
        return len(self.blocks)


class Tape:
    """Single-owner op recorder. grad=False skips saving backward context."""

    def __init__(self, grad: bool = True, save_cols: bool = True):
        self.grad = grad
        self.save_cols = save_cols and grad  # conv patch matrices kept for backward
        self.nodes: list[Node] = []
        self._param_nodes: dict[tuple[int, str], int] = {}

    def _record(self, kind, inputs, value, ctx=None, needs_grad=None, param_key=None) -> Tensor:
        if needs_grad is None:
            needs_grad = any(self.nodes[i].needs_grad for i in inputs)
        if not self.grad:
            needs_grad = False
            ctx = None
        self.nodes.append(Node(kind, inputs, value, ctx, needs_grad, param_key))
        return Tensor(self, len(self.nodes) - 1)

    def const(self, value) -> Tensor:
        return self._record("const", (), _as_f64(value), needs_grad=False)

    def leaf(self, value, needs_grad: bool = True) -> Tensor:
        return self._record("leaf", (), _as_f64(value), needs_grad=needs_grad and self.grad)

    def param(self, params: Parameters, name: str) -> Tensor:
        """Leaf bound to a named block; reused within one tape so repeated
        applications of the same weights accumulate into one grad slot."""
        key = (id(params), name)
        nid = self._param_nodes.get(key)
        if nid is not None:
            return Tensor(self, nid)
        t = self._record("leaf", (), params.blocks[name],
                         needs_grad=params.trainable and self.grad,
                         param_key=(params, name))
        self._param_nodes[key] = t.nid
        return t


def _same_tape(*ts: Tensor) -> Tape:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise ContractViolation("operands recorded on different tapes")
    return tape


def _check_same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ContractViolation(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# op catalogue


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _check_same_shape("add", a.value, b.value)
    return tape._record("add", (a.nid, b.nid), a.value + b.value)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _check_same_shape("sub", a.value, b.value)
    return tape._record("sub", (a.nid, b.nid), a.value - b.value)


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _check_same_shape("mul", a.value, b.value)
    return tape._record("mul", (a.nid, b.nid), a.value * b.value,
                        ctx=(a.value, b.value))


def scale(a: Tensor, alpha: float) -> Tensor:
    return a.tape._record("scale", (a.nid,), a.value * alpha, ctx=alpha)


def silu(a: Tensor) -> Tensor:
    x = a.value
    t = np.exp(-np.abs(x))  # overflow-free sigmoid
    s = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    return a.tape._record("silu", (a.nid,), x * s, ctx=(x, s))


def roll(a: Tensor, shift: int, axis: int) -> Tensor:
    return a.tape._record("roll", (a.nid,), np.roll(a.value, shift, axis=axis),
                          ctx=(shift, axis))


def stop_gradient(a: Tensor) -> Tensor:
    return a.tape._record("stop_grad", (a.nid,), a.value, needs_grad=False)


def row_scale(a: Tensor, v: np.ndarray) -> Tensor:
    """Multiply each batch row by a constant per-sample scalar v[b]."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (a.value.shape[0],):
        raise ContractViolation(f"row_scale: weights {v.shape} vs batch {a.value.shape[0]}")
    vb = v.reshape((-1,) + (1,) * (a.value.ndim - 1))
    return a.tape._record("row_scale", (a.nid,), a.value * vb, ctx=vb)


def chan_bias(a: Tensor, v: Tensor) -> Tensor:
    """Add a per-sample per-channel bias v of shape (B, C) to (B, C, H, W)."""
    tape = _same_tape(a, v)
    x, b = a.value, v.value
    if x.ndim != 4 or b.shape != x.shape[:2]:
        raise ContractViolation(f"chan_bias: feature {x.shape} vs bias {b.shape}")
    return tape._record("chan_bias", (a.nid, v.nid), x + b[:, :, None, None])


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(B, n) @ (n, m) + (m,)."""
    tape = _same_tape(x, w, b)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0] or bv.shape != (wv.shape[1],):
        raise ContractViolation(f"affine: x {xv.shape}, w {wv.shape}, b {bv.shape}")
    return tape._record("affine", (x.nid, w.nid, b.nid), xv @ wv + bv, ctx=(xv, wv))


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Channels-first patch matrix (B, C*k*k, H*W); one contiguous gather."""
    bsz, c, h, w = x.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s = xp.strides
    v = np.lib.stride_tricks.as_strided(
        xp, (bsz, c, k, k, h, w), (s[0], s[1], s[2], s[3], s[2], s[3]))
    return np.ascontiguousarray(v).reshape(bsz, c * k * k, h * w)


def _conv2d_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray, cols=None):
    """Returns (out, cols); cols is the patch matrix for k=3, else None."""
    k = w.shape[2]
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    if k == 1:
        out = np.matmul(w[:, :, 0, 0][None], x.reshape(bsz, cin, h * wd))
        return out.reshape(bsz, cout, h, wd) + b[None, :, None, None], None
    if cols is None:
        cols = _im2col(x, k)
    out = np.matmul(w.reshape(cout, cin * k * k)[None], cols)
    return out.reshape(bsz, cout, h, wd) + b[None, :, None, None], cols


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padding 2D convolution (cross-correlation), kernel 1x1 or 3x3."""
    tape = _same_tape(x, w, b)
    xv, wv, bv = x.value, w.value, b.value
    k = wv.shape[2] if wv.ndim == 4 else 0
    if (xv.ndim != 4 or wv.ndim != 4 or k not in (1, 3) or wv.shape[2] != wv.shape[3]
            or wv.shape[1] != xv.shape[1] or bv.shape != (wv.shape[0],)):
        raise ContractViolation(f"conv2d: x {xv.shape}, w {wv.shape}, b {bv.shape}")
    out, cols = _conv2d_fwd(xv, wv, bv)
    if not tape.save_cols:
        cols = None  # rebuilt in backward; saves memory on long unrolls
    return tape._record("conv2d", (x.nid, w.nid, b.nid), out, ctx=(xv, wv, cols))


def down2(x: Tensor) -> Tensor:
    """Nearest-neighbour downsample by 2 (top-left pick)."""
    v = x.value
    if v.ndim != 4 or v.shape[2] % 2 or v.shape[3] % 2:
        raise ContractViolation(f"down2: needs even spatial extents, got {v.shape}")
    return x.tape._record("down2", (x.nid,), np.ascontiguousarray(v[:, :, ::2, ::2]),
                          ctx=v.shape)


def up2(x: Tensor) -> Tensor:
    """Exact nearest-neighbour upsample by 2."""
    v = x.value
    if v.ndim != 4:
        raise ContractViolation(f"up2: needs rank-4 input, got {v.shape}")
    return x.tape._record("up2", (x.nid,), v.repeat(2, axis=2).repeat(2, axis=3))


def chan_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    """Slice channels [lo, hi) of a (B, C, H, W) tensor."""
    v = x.value
    if v.ndim != 4 or not (0 <= lo < hi <= v.shape[1]):
        raise ContractViolation(f"chan_slice: [{lo}, {hi}) of {v.shape}")
    return x.tape._record("chan_slice", (x.nid,), np.ascontiguousarray(v[:, lo:hi]),
                          ctx=(lo, hi, v.shape))


def chan_cat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two (B, C, H, W) tensors along the channel axis."""
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.ndim != 4 or bv.ndim != 4 or av.shape[0] != bv.shape[0] or av.shape[2:] != bv.shape[2:]:
        raise ContractViolation(f"chan_cat: {av.shape} vs {bv.shape}")
    return tape._record("chan_cat", (a.nid, b.nid), np.concatenate([av, bv], axis=1),
                        ctx=av.shape[1])


def tsum(x: Tensor) -> Tensor:
    return x.tape._record("sum", (x.nid,), np.asarray(x.value.sum()), ctx=x.value.shape)


def tmean(x: Tensor) -> Tensor:
    return x.tape._record("mean", (x.nid,), np.asarray(x.value.mean()), ctx=x.value.shape)


def sqdiff(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences, reduced to a scalar."""
    tape = _same_tape(a, b)
    _check_same_shape("sqdiff", a.value, b.value)
    d = a.value - b.value
    return tape._record("sqdiff", (a.nid, b.nid), np.asarray((d * d).sum()), ctx=d)


_OPS = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "silu": silu,
    "roll": roll, "stop_grad": stop_gradient, "row_scale": row_scale,
    "chan_bias": chan_bias, "affine": affine, "conv2d": conv2d,
    "down2": down2, "up2": up2, "sum": tsum, "mean": tmean, "sqdiff": sqdiff,
    "chan_slice": chan_slice, "chan_cat": chan_cat,
}


def forward_op(kind: str, inputs, **attrs) -> Tensor:
    """Dispatch into the fixed op catalogue by kind name."""
    if kind not in _OPS:
        raise ContractViolation(f"unknown op kind {kind!r}")
    return _OPS[kind](*inputs, **attrs)


# ---------------------------------------------------------------------------
# backward


def _bw_conv2d(node, g, out):
    xv, wv, cols = node.ctx
    k = wv.shape[2]
    bsz, cin, h, wd = xv.shape
    cout = wv.shape[0]
    gmat = g.reshape(bsz, cout, h * wd)
    if k == 1:
        out[0] = np.matmul(wv[:, :, 0, 0].T[None], gmat).reshape(xv.shape)
        out[1] = np.matmul(gmat, xv.reshape(bsz, cin, h * wd).transpose(0, 2, 1)) \
            .sum(axis=0).reshape(cout, cin, 1, 1)
        out[2] = g.sum(axis=(0, 2, 3))
        return
    if cols is None:
        cols = _im2col(xv, k)
    # input gradient: correlation with the channel-transposed, flipped kernel
    wf = np.ascontiguousarray(wv.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    out[0] = _conv2d_fwd(g, wf, np.zeros(cin))[0]
    out[1] = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0) \
        .reshape(cout, cin, k, k)
    out[2] = g.sum(axis=(0, 2, 3))


def _backward_node(node: Node, g: np.ndarray) -> list:
    kind = node.kind
    out = [None] * len(node.inputs)
    if kind == "add":
        out[0] = g
        out[1] = g
    elif kind == "sub":
        out[0] = g
        out[1] = -g
    elif kind == "mul":
        av, bv = node.ctx
        out[0] = g * bv
        out[1] = g * av
    elif kind == "scale":
        out[0] = g * node.ctx
    elif kind == "silu":
        x, s = node.ctx
        out[0] = g * (s * (1.0 + x * (1.0 - s)))
    elif kind == "roll":
        shift, axis = node.ctx
        out[0] = np.roll(g, -shift, axis=axis)
    elif kind == "row_scale":
        out[0] = g * node.ctx
    elif kind == "chan_bias":
        out[0] = g
        out[1] = g.sum(axis=(2, 3))
    elif kind == "affine":
        xv, wv = node.ctx
        out[0] = g @ wv.T
        out[1] = xv.T @ g
        out[2] = g.sum(axis=0)
    elif kind == "conv2d":
        _bw_conv2d(node, g, out)
    elif kind == "down2":
        gx = np.zeros(node.ctx)
        gx[:, :, ::2, ::2] = g
        out[0] = gx
    elif kind == "up2":
        b, c, h2, w2 = g.shape
        out[0] = g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
    elif kind == "sum":
        out[0] = np.broadcast_to(g, node.ctx)
    elif kind == "mean":
        n = int(np.prod(node.ctx)) if node.ctx else 1
        out[0] = np.broadcast_to(g / n, node.ctx)
    elif kind == "sqdiff":
        d = node.ctx
        out[0] = (2.0 * g) * d
        out[1] = (-2.0 * g) * d
    elif kind == "chan_slice":
        lo, hi, shape = node.ctx
        gx = np.zeros(shape)
        gx[:, lo:hi] = g
        out[0] = gx
    elif kind == "chan_cat":
        ca = node.ctx
        out[0] = np.ascontiguousarray(g[:, :ca])
        out[1] = np.ascontiguousarray(g[:, ca:])
    elif kind == "stop_grad":
        pass  # tape cut: nothing flows upstream
    else:
        raise ContractViolation(f"no backward rule for op {kind!r}")
    return out


def backward(root: Tensor, wrt=()):
    """Reverse sweep from a scalar root.

    Parameter-block gradients are accumulated in place into their
    Parameters objects. Returns the gradient array for each tensor in
    `wrt` (zeros if the root does not depend on it).
    """
    tape = root.tape
    if not tape.grad:
        raise ContractViolation("backward on a tape recorded with grad=False")
    node = tape.nodes[root.nid]
    if node.value.shape != ():
        raise ContractViolation(f"backward root must be scalar, got shape {node.value.shape}")
    grads: dict[int, np.ndarray] = {root.nid: np.asarray(1.0)}
    for nid in range(root.nid, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.param_key is not None:
            params, name = node.param_key
            params.grads[name] += g
        if not node.inputs:
            if any(t.nid == nid for t in wrt):
                grads[nid] = g  # keep leaf grads requested by the caller
            continue
        need = [tape.nodes[i].needs_grad or any(t.nid == i for t in wrt)
                for i in node.inputs]
        if not any(need) and node.kind != "stop_grad":
            continue
        ins = _backward_node(node, g)
        for i, gi in zip(node.inputs, ins):
            if gi is None or not (tape.nodes[i].needs_grad or any(t.nid == i for t in wrt)):
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    return [np.array(grads.get(t.nid, np.zeros_like(t.value))).reshape(t.value.shape)
            for t in wrt]


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn, params: Parameters, step: float = 1e-4, n_coords: int = 24,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn(params) must build a fresh tape and return a scalar Tensor,
    deterministically for a fixed internal seed. A random subset of
    parameter coordinates is probed.
    """
    if not (1e-6 <= step <= 1e-2):
        raise ContractViolation(f"grad_check step {step} outside [1e-6, 1e-2]")
    v0 = float(fn(params).value)
    root = fn(params)
    if float(root.value) != v0:
        raise DeterminismError("fn returned different values on identical calls")
    params.zero_grad()
    backward(root)
    analytic = {k: g.copy() for k, g in params.grads.items()}
    params.zero_grad()

    rng = np.random.default_rng(seed)
    names = list(params.blocks)
    sizes = np.array([params.blocks[n].size for n in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum(sizes)
    max_rel = 0.0
    for flat in picks:
        bi = int(np.searchsorted(bounds, flat, side="right"))
        off = int(flat - (bounds[bi - 1] if bi else 0))
        block = params.blocks[names[bi]].reshape(-1)
        orig = block[off]
        block[off] = orig + step
        fp = float(fn(params).value)
        block[off] = orig - step
        fm = float(fn(params).value)
        block[off] = orig
        fd = (fp - fm) / (2.0 * step)
        a = float(analytic[names[bi]].reshape(-1)[off])
        max_rel = max(max_rel, abs(a - fd) / (abs(fd) + 1e-8))
    return max_rel


# ---------------------------------------------------------------------------
# checkpoint serialization

_CKPT_VERSION = 1


def save_params(params: Parameters, path, meta: dict | None = None) -> None:
    """Header line: compact JSON map with the block table; payload:
    little-endian raw float64, blocks concatenated at the listed offsets."""
    table = []
    off = 0
    for name, v in params.blocks.items():
        table.append({"name": name, "shape": list(v.shape), "offset": off})
        off += v.size * 8
    header = {"format": "pdegen-ckpt", "version": _CKPT_VERSION,
              "blocks": table, "meta": meta or {}}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in params.blocks.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path, trainable: bool = True):
    """Returns (Parameters, meta). Rejects truncated or mismatched files."""
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as e:
            raise ContractViolation(f"corrupt checkpoint header: {e}") from e
        if header.get("format") != "pdegen-ckpt" or header.get("version") != _CKPT_VERSION:
            raise ContractViolation(f"unsupported checkpoint header: {header.get('format')}")
        payload = f.read()
    params = Parameters(trainable=trainable)
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        chunk = payload[start:start + n * 8]
        if len(chunk) != n * 8:
            raise ContractViolation(f"truncated checkpoint payload for block {entry['name']!r}")
        params.add(entry["name"], np.frombuffer(chunk, dtype="<f8").reshape(shape))
    return params, header["meta"]
