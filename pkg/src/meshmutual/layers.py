"""Neural layers with hand-derived backward passes.

Two mesh-aware convolution schemes live here. The vertex scheme averages
each vertex's neighbourhood with a row-stochastic operator and mixes
channels with a single weight matrix (no bias). The edge scheme convolves
each edge with its four adjacent edges through five kernel slots applied
to order-invariant symmetric combinations; a raw-ordered variant exists
for ablation. Dense layers, a leaky rectifier, 3x3 convolutions for the
image encoders, incidence averaging between edges and vertices, parameter
initialization/serialization, and a central finite-difference gradient
checker complete the set.

Everything is float64 and framework-free: each op returns (output, cache)
and has a matching backward taking (cache, upstream gradient). The Tape
just sequences recorded backward thunks and enforces single use.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import GradientCheckError, StructuralError

LEAKY_SLOPE = 0.01


class Tape:
    """Single-use recorder of backward thunks.

    Forward code appends callables; backward() runs them in reverse order
    exactly once and refuses a second call.
    """

    def __init__(self):
        self._steps = []
        self._consumed = False

    def record(self, fn) -> None:
        if self._consumed:
            raise StructuralError("tape already consumed; record before backward")
        self._steps.append(fn)

    def backward(self) -> None:
        if self._consumed:
            raise StructuralError("tape already consumed; backward may run once")
        self._consumed = True
        for fn in reversed(self._steps):
            fn()

    @property
    def consumed(self) -> bool:
        return self._consumed


# ---------------------------------------------------------------------------
# activations

def _activate(y: np.ndarray, kind: str):
    if kind == "linear":
        return y, None
    if kind == "leaky":
        mask = y > 0
        out = np.where(mask, y, LEAKY_SLOPE * y)
        return out, mask
    raise StructuralError(f"unknown activation {kind!r}")


def _activate_backward(d_out: np.ndarray, act_cache, kind: str) -> np.ndarray:
    if kind == "linear":
        return d_out
    # subgradient at exactly 0 is the leaky slope
    return np.where(act_cache, d_out, LEAKY_SLOPE * d_out)


def leaky_relu_forward(x: np.ndarray):
    return _activate(np.asarray(x, dtype=np.float64), "leaky")


def leaky_relu_backward(cache, d_out: np.ndarray) -> np.ndarray:
    return _activate_backward(d_out, cache, "leaky")


# ---------------------------------------------------------------------------
# dense

def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None,
                  activation: str = "linear"):
    """Affine map over the last axis, then activation. Returns (out, cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[0]:
        raise StructuralError(f"dense width mismatch: input {x.shape[-1]}, weights {W.shape[0]}")
    y = x @ W
    if b is not None:
        if b.shape != (W.shape[1],):
            raise StructuralError(f"bias shape {b.shape} does not match output width {W.shape[1]}")
        y = y + b
    out, act = _activate(y, activation)
    return out, (x, W, b is not None, act, activation)


def dense_backward(cache, d_out: np.ndarray):
    """Returns (d_x, d_W, d_b); d_b is None when the layer has no bias."""
    x, W, has_bias, act, activation = cache
    dy = _activate_backward(np.asarray(d_out, dtype=np.float64), act, activation)
    d_x = dy @ W.T
    d_W = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    d_b = dy.reshape(-1, dy.shape[-1]).sum(axis=0) if has_bias else None
    return d_x, d_W, d_b


# ---------------------------------------------------------------------------
# vertex graph convolution

def graph_conv_forward(H: np.ndarray, A, W: np.ndarray, activation: str = "leaky"):
    """H' = activation(A H W); A is the row-stochastic averaging operator.

    No bias, matching the printed form. A may be dense or scipy sparse.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.shape[1] != W.shape[0]:
        raise StructuralError(f"graph conv width mismatch: {H.shape[1]} vs {W.shape[0]}")
    if A.shape[0] != A.shape[1] or A.shape[0] != H.shape[0]:
        raise StructuralError(f"operator shape {A.shape} does not match {H.shape[0]} vertices")
    AH = A @ H
    y = AH @ W
    out, act = _activate(y, activation)
    return out, (A, AH, H, W, act, activation)


def graph_conv_backward(cache, d_out: np.ndarray):
    """Returns (d_H, d_W)."""
    A, AH, H, W, act, activation = cache
    dy = _activate_backward(np.asarray(d_out, dtype=np.float64), act, activation)
    d_W = AH.T @ dy
    d_AH = dy @ W.T
    d_H = A.T @ d_AH
    return np.asarray(d_H), d_W


# ---------------------------------------------------------------------------
# edge mesh convolution

def mesh_conv_forward(psi: np.ndarray, neighbors: np.ndarray, mu: np.ndarray,
                      activation: str = "leaky", symmetric: bool = True):
    """Convolve each edge with its 4 adjacent edges through 5 kernel slots.

    neighbors is the (E, 4) array from the edge adjacency: columns 0-1 are
    the first face's other edges (e1, e2), columns 2-3 the second face's
    (e3, e4). In the default symmetric form

        out(e0) = mu0 psi_e0 + mu1 (psi_e1 + psi_e3) + mu2 |psi_e1 - psi_e3|
                + mu3 (psi_e2 + psi_e4) + mu4 |psi_e2 - psi_e4|

    which is invariant to which incident face is called first. The raw
    variant applies mu1..mu4 to e1..e4 directly and is order-sensitive.
    """
    psi = np.asarray(psi, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.int64)
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim != 3 or mu.shape[0] != 5:
        raise StructuralError(f"mesh conv kernel must be (5, D_in, D_out), got {mu.shape}")
    if psi.shape[1] != mu.shape[1]:
        raise StructuralError(f"mesh conv width mismatch: {psi.shape[1]} vs {mu.shape[1]}")
    if neighbors.shape != (psi.shape[0], 4):
        raise StructuralError(
            f"adjacency shape {neighbors.shape} does not match {psi.shape[0]} edges"
        )
    n1, n2, n3, n4 = (psi[neighbors[:, k]] for k in range(4))
    if symmetric:
        d13 = n1 - n3
        d24 = n2 - n4
        terms = (psi, n1 + n3, np.abs(d13), n2 + n4, np.abs(d24))
        extra = (np.sign(d13), np.sign(d24))
    else:
        terms = (psi, n1, n2, n3, n4)
        extra = None
    y = terms[0] @ mu[0]
    for k in range(1, 5):
        y += terms[k] @ mu[k]
    out, act = _activate(y, activation)
    return out, (psi, neighbors, mu, terms, extra, act, activation, symmetric)


def mesh_conv_backward(cache, d_out: np.ndarray):
    """Returns (d_psi, d_mu). |.| uses subgradient 0 at exact ties."""
    psi, neighbors, mu, terms, extra, act, activation, symmetric = cache
    dy = _activate_backward(np.asarray(d_out, dtype=np.float64), act, activation)

    d_mu = np.empty_like(mu)
    for k in range(5):
        d_mu[k] = terms[k].T @ dy
    dt = [dy @ mu[k].T for k in range(5)]

    d_psi = dt[0].copy()
    cols = neighbors.T
    if symmetric:
        s13, s24 = extra
        np.add.at(d_psi, cols[0], dt[1] + s13 * dt[2])
        np.add.at(d_psi, cols[2], dt[1] - s13 * dt[2])
        np.add.at(d_psi, cols[1], dt[3] + s24 * dt[4])
        np.add.at(d_psi, cols[3], dt[3] - s24 * dt[4])
    else:
        for k in range(4):
            np.add.at(d_psi, cols[k], dt[k + 1])
    return d_psi, d_mu


# ---------------------------------------------------------------------------
# incidence averaging

def edge_to_vertex_forward(values: np.ndarray, edges: np.ndarray, n_vertices: int):
    """Average each vertex's incident-edge values. Returns (out, cache)."""
    values = np.asarray(values, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64)
    deg = np.bincount(edges.reshape(-1), minlength=n_vertices).astype(np.float64)
    if np.any(deg == 0):
        raise StructuralError("a vertex has no incident edge; cannot average")
    acc = np.zeros((n_vertices, values.shape[1]))
    np.add.at(acc, edges[:, 0], values)
    np.add.at(acc, edges[:, 1], values)
    out = acc / deg[:, None]
    return out, (edges, deg)


def edge_to_vertex_backward(cache, d_out: np.ndarray) -> np.ndarray:
    edges, deg = cache
    dn = np.asarray(d_out, dtype=np.float64) / deg[:, None]
    return dn[edges[:, 0]] + dn[edges[:, 1]]


# ---------------------------------------------------------------------------
# 3x3 convolution for the image encoders

def conv2d_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray, stride: int = 1,
                   activation: str = "leaky"):
    """3x3 convolution, zero padding 1, given stride, then activation.

    x is (H, W, C_in), W is (3, 3, C_in, C_out). Output spatial size is
    floor((H - 1) / stride) + 1.
    """
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.shape[:2] != (3, 3) or W.ndim != 4:
        raise StructuralError(f"conv kernel must be (3, 3, C_in, C_out), got {W.shape}")
    if x.ndim != 3 or x.shape[2] != W.shape[2]:
        raise StructuralError(f"conv input {x.shape} does not match kernel {W.shape}")
    H, Wd, Cin = x.shape
    Cout = W.shape[3]
    Ho = (H - 1) // stride + 1
    Wo = (Wd - 1) // stride + 1
    xp = np.zeros((H + 2, Wd + 2, Cin))
    xp[1:-1, 1:-1] = x

    y = np.tile(b, (Ho, Wo, 1)).astype(np.float64)
    for di in range(3):
        for dj in range(3):
            patch = xp[di:di + stride * (Ho - 1) + 1:stride, dj:dj + stride * (Wo - 1) + 1:stride]
            y += patch @ W[di, dj]
    out, act = _activate(y, activation)
    return out, (xp, x.shape, W, stride, (Ho, Wo), act, activation)


def conv2d_backward(cache, d_out: np.ndarray):
    """Returns (d_x, d_W, d_b)."""
    xp, x_shape, W, stride, (Ho, Wo), act, activation = cache
    dy = _activate_backward(np.asarray(d_out, dtype=np.float64), act, activation)
    Cin = x_shape[2]
    d_xp = np.zeros_like(xp)
    d_W = np.zeros_like(W)
    for di in range(3):
        for dj in range(3):
            rows = slice(di, di + stride * (Ho - 1) + 1, stride)
            cols = slice(dj, dj + stride * (Wo - 1) + 1, stride)
            patch = xp[rows, cols]
            d_W[di, dj] = patch.reshape(-1, Cin).T @ dy.reshape(-1, dy.shape[-1])
            d_xp[rows, cols] += dy @ W[di, dj].T
    d_b = dy.sum(axis=(0, 1))
    return d_xp[1:-1, 1:-1], d_W, d_b


# ---------------------------------------------------------------------------
# parameters

@dataclass
class ParamStore:
    """Named parameter blocks plus how they were initialized."""

    arrays: dict
    scheme: str = "fan_in_uniform"
    seed: int = 0

    def check_finite(self) -> None:
        for name, a in self.arrays.items():
            if not np.all(np.isfinite(a)):
                raise StructuralError(f"parameter block {name!r} contains non-finite values")

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.arrays.items()}, self.scheme, self.seed)


_INIT_VARIANCE = {"fan_in_uniform": 1.0, "he_uniform": 2.0}


def init_params(specs: dict, seed: int, scheme: str = "fan_in_uniform") -> ParamStore:
    """Initialize named blocks: specs maps name -> (shape, fan_in).

    fan_in = None zero-fills the block (biases). Otherwise the block is a
    uniform draw on +-sqrt(3 g / fan_in), whose variance is g / fan_in:
    g = 1 for "fan_in_uniform", g = 2 for "he_uniform". The doubled gain
    keeps signal variance roughly constant through rectifier stacks, which
    deep chains need so early-layer gradients stay alive.
    """
    if scheme not in _INIT_VARIANCE:
        raise StructuralError(f"unknown init scheme {scheme!r}")
    gain = _INIT_VARIANCE[scheme]
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, (shape, fan_in) in specs.items():
        if fan_in is None:
            arrays[name] = np.zeros(shape)
        else:
            bound = np.sqrt(3.0 * gain / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ParamStore(arrays, scheme=scheme, seed=seed)


_MAGIC = b"MESHMU1"
_VERSION = 1


def serialize_params(params: ParamStore, extra_manifest: dict | None = None) -> bytes:
    """Versioned binary container: magic, manifest JSON, named fp64 blocks."""
    params.check_finite()
    manifest = {
        "blocks": list(params.arrays.keys()),
        "scheme": params.scheme,
        "seed": params.seed,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    out = [_MAGIC, struct.pack("<I", _VERSION), struct.pack("<I", len(mbytes)), mbytes,
           struct.pack("<I", len(params.arrays))]
    for name, a in params.arrays.items():
        nbytes = name.encode("utf-8")
        out.append(struct.pack("<I", len(nbytes)))
        out.append(nbytes)
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
        out.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(out)


def deserialize_params(data: bytes):
    """Inverse of serialize_params. Returns (ParamStore, manifest dict)."""
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise StructuralError("checkpoint truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(_MAGIC))) != _MAGIC:
        raise StructuralError("bad checkpoint magic")
    version = struct.unpack("<I", take(4))[0]
    if version != _VERSION:
        raise StructuralError(f"unsupported checkpoint version {version}")
    mlen = struct.unpack("<I", take(4))[0]
    try:
        manifest = json.loads(bytes(take(mlen)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise StructuralError("checkpoint manifest is not valid JSON")
    count = struct.unpack("<I", take(4))[0]
    arrays = {}
    for _ in range(count):
        nlen = struct.unpack("<I", take(4))[0]
        name = bytes(take(nlen)).decode("utf-8")
        rank = struct.unpack("<I", take(4))[0]
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n = int(np.prod(shape)) if shape else 1
        payload = take(8 * n)
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise StructuralError("trailing bytes after checkpoint payload")
    if manifest.get("blocks") != list(arrays.keys()):
        raise StructuralError("checkpoint manifest does not match block list")
    store = ParamStore(arrays, scheme=manifest.get("scheme", "fan_in_uniform"),
                       seed=int(manifest.get("seed", 0)))
    store.check_finite()
    return store, manifest


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    """Max relative error per parameter block from central differences."""

    errors: dict
    tolerance: float
    h: float

    @property
    def max_error(self) -> float:
        return float(max(self.errors.values())) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tolerance)

    def __str__(self):
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        state = "ok" if self.passed else "FAIL"
        return f"grad check {state}: max rel err {self.max_error:.3e} ({worst}), tol {self.tolerance:g}"


def grad_check(closure, params: dict, h: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Check analytic gradients of a scalar closure by central differences.

    closure(params) must return (value, grads) where grads maps each
    checked block name to an array shaped like params[name]. Relative
    error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-6),
    maximized per block.
    """
    value, grads = closure(params)
    if not np.isfinite(value):
        raise GradientCheckError("closure value is not finite")
    errors = {}
    for name, p in params.items():
        if name not in grads:
            raise GradientCheckError(f"closure returned no gradient for block {name!r}")
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != p.shape:
            raise GradientCheckError(
                f"gradient shape {analytic.shape} != parameter shape {p.shape} for {name!r}"
            )
        if not np.all(np.isfinite(analytic)):
            raise GradientCheckError(f"analytic gradient for {name!r} is not finite")
        worst = 0.0
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            fp = closure(params)[0]
            p[idx] = orig - h
            fm = closure(params)[0]
            p[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradientCheckError(f"non-finite closure value while perturbing {name!r}")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors=errors, tolerance=tolerance, h=h)
