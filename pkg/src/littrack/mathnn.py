"""Minimal dense-network stack: MLPs with hand-derived backprop and Adam.

Parameters are plain numpy arrays held in small dataclasses.  Gradients come
back in containers shaped exactly like the parameters, so the same tree
utilities drive the optimizer and the finite-difference checker for every
network in the package.  All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

ACTIVATIONS = ("tanh", "elu", "identity", "softplus")


@dataclass
class Layer:
    w: Array            # (out, in)
    b: Array            # (out,)
    act: str = "identity"


@dataclass
class MlpParams:
    """A stack of dense layers applied in order."""

    layers: list[Layer] = field(default_factory=list)

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    def validate(self) -> None:
        prev_out = None
        for i, layer in enumerate(self.layers):
            if layer.act not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.act!r}")
            if layer.w.ndim != 2 or layer.b.shape != (layer.w.shape[0],):
                raise ValueError(f"layer {i}: weight/bias shapes inconsistent")
            if prev_out is not None and layer.w.shape[1] != prev_out:
                raise ValueError(
                    f"layer {i}: in-dim {layer.w.shape[1]} != previous out-dim {prev_out}"
                )
            if not (np.isfinite(layer.w).all() and np.isfinite(layer.b).all()):
                raise ValueError(f"layer {i}: non-finite parameters")
            prev_out = layer.w.shape[0]


@dataclass
class AdamState:
    """First/second-moment accumulators shaped like the parameter tree."""

    m: object
    v: object
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


# ---------------------------------------------------------------------------
# parameter trees: MlpParams / arrays / dict / list / tuple


def tree_leaves(tree) -> list[Array]:
    out: list[Array] = []
    _walk(tree, out.append)
    return out


def _walk(tree, fn) -> None:
    if isinstance(tree, np.ndarray):
        fn(tree)
    elif isinstance(tree, MlpParams):
        for layer in tree.layers:
            fn(layer.w)
            fn(layer.b)
    elif isinstance(tree, dict):
        for key in tree:
            _walk(tree[key], fn)
    elif isinstance(tree, (list, tuple)):
        for item in tree:
            _walk(item, fn)
    else:
        raise TypeError(f"not a parameter tree node: {type(tree)}")


def tree_map(fn, *trees):
    """Apply fn leafwise across same-structure trees, rebuilding the structure."""
    head = trees[0]
    if isinstance(head, np.ndarray):
        return fn(*trees)
    if isinstance(head, MlpParams):
        layers = [
            Layer(fn(*(t.layers[i].w for t in trees)), fn(*(t.layers[i].b for t in trees)),
                  head.layers[i].act)
            for i in range(len(head.layers))
        ]
        return MlpParams(layers)
    if isinstance(head, dict):
        return {k: tree_map(fn, *(t[k] for t in trees)) for k in head}
    if isinstance(head, (list, tuple)):
        items = [tree_map(fn, *(t[i] for t in trees)) for i in range(len(head))]
        return type(head)(items)
    raise TypeError(f"not a parameter tree node: {type(head)}")


def zeros_like_tree(tree):
    return tree_map(np.zeros_like, tree)


def tree_global_norm(tree) -> float:
    total = 0.0
    for leaf in tree_leaves(tree):
        total += float(np.sum(leaf * leaf))
    return float(np.sqrt(total))


def clip_tree_by_norm(tree, max_norm: float):
    """Scale the whole tree so its global L2 norm is at most max_norm."""
    norm = tree_global_norm(tree)
    if norm <= max_norm or norm == 0.0:
        return tree
    scale = max_norm / norm
    return tree_map(lambda g: g * scale, tree)


# ---------------------------------------------------------------------------
# activations


def _act_forward(z: Array, act: str) -> Array:
    if act == "identity":
        return z
    if act == "tanh":
        return np.tanh(z)
    if act == "elu":
        # max(z,0) + expm1(min(z,0)) == z for z>0, e^z - 1 otherwise
        return np.maximum(z, 0.0) + np.expm1(np.minimum(z, 0.0))
    if act == "softplus":
        # log(1 + e^z), overflow-safe
        return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    raise ValueError(f"unknown activation {act!r}")


def _act_grad_from_output(y: Array, act: str) -> Array:
    # Every activation here has a derivative expressible from its output.
    if act == "identity":
        return np.ones_like(y)
    if act == "tanh":
        return 1.0 - y * y
    if act == "elu":
        # 1 for y>0, y+1 (= e^z) otherwise
        return np.minimum(y, 0.0) + 1.0
    if act == "softplus":
        return 1.0 - np.exp(-y)        # sigmoid(z) = 1 - e^{-softplus(z)}
    raise ValueError(f"unknown activation {act!r}")


# ---------------------------------------------------------------------------
# forward / backward


def _as_batch(x: Array, dim: int, what: str) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"{what}: expected length {dim}, got {x.shape[0]}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ValueError(f"{what}: expected width {dim}, got {x.shape[1]}")
        return x, False
    raise ValueError(f"{what}: expected 1-D or 2-D array")


def forward_cached(params: MlpParams, x: Array) -> list[Array]:
    """Run the net, returning [input, every layer output] for reuse in backward."""
    outs = [x]
    h = x
    for layer in params.layers:
        h = _act_forward(h @ layer.w.T + layer.b, layer.act)
        outs.append(h)
    return outs


def mlp_forward(params: MlpParams, x: Array) -> Array:
    """Evaluate the MLP on a vector or a (batch, in_dim) array."""
    xb, squeeze = _as_batch(x, params.in_dim, "mlp_forward input")
    y = forward_cached(params, xb)[-1]
    return y[0] if squeeze else y


def backward_from_cache(params: MlpParams, cache: list[Array], upstream: Array
                        ) -> tuple[MlpParams, Array]:
    """Backprop given forward_cached output; returns (grads, input grad).

    Gradients are summed over the batch and returned in an MlpParams of the
    same shape as ``params``.
    """
    g = upstream
    grad_layers: list[Layer] = [None] * len(params.layers)  # type: ignore[list-item]
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        dz = g * _act_grad_from_output(cache[i + 1], layer.act)
        grad_layers[i] = Layer(dz.T @ cache[i], dz.sum(axis=0), layer.act)
        g = dz @ layer.w
    return MlpParams(grad_layers), g


def mlp_backward(params: MlpParams, x: Array, upstream: Array
                 ) -> tuple[MlpParams, Array]:
    """Gradients of sum(upstream * output) w.r.t. parameters and input."""
    xb, squeeze = _as_batch(x, params.in_dim, "mlp_backward input")
    ub, _ = _as_batch(upstream, params.out_dim, "mlp_backward upstream")
    if ub.shape[0] != xb.shape[0]:
        raise ValueError("mlp_backward: batch sizes of input and upstream differ")
    cache = forward_cached(params, xb)
    grads, gin = backward_from_cache(params, cache, ub)
    return grads, (gin[0] if squeeze else gin)


# ---------------------------------------------------------------------------
# Adam


def init_adam(params, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(m=zeros_like_tree(params), v=zeros_like_tree(params),
                     t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state: AdamState):
    """One Adam update with bias correction; works on any parameter tree.

    Rejects non-finite gradients outright so a bad batch can never poison the
    parameters.
    """
    p_leaves = tree_leaves(params)
    g_leaves = tree_leaves(grads)
    if len(p_leaves) != len(g_leaves):
        raise ValueError("adam_step: gradient tree does not match parameter tree")
    for p, g in zip(p_leaves, g_leaves):
        if p.shape != g.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        if not np.isfinite(g).all():
            raise ValueError("adam_step: non-finite gradient")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m = tree_map(lambda m, g: b1 * m + (1.0 - b1) * g, state.m, grads)
    new_v = tree_map(lambda v, g: b2 * v + (1.0 - b2) * g * g, state.v, grads)
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    step = state.lr / corr1

    def upd(p, m, v):
        return p - step * m / (np.sqrt(v / corr2) + state.eps)

    new_params = tree_map(upd, params, new_m, new_v)
    return new_params, AdamState(m=new_m, v=new_v, t=t, lr=state.lr,
                                 beta1=b1, beta2=b2, eps=state.eps)


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(loss_and_grad, params, eps: float = 1e-5,
                      rng: np.random.Generator | None = None,
                      max_entries: int | None = None) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grad(params)`` must return ``(loss, grad_tree)`` with the grad
    tree shaped like ``params``.  Entries are perturbed one at a time with a
    step scaled to the entry's magnitude.  Returns the max relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`` over the
    checked entries.  With ``max_entries`` set, a random subsample of entries
    is checked instead of all of them.
    """
    if eps <= 0.0:
        raise ValueError("finite_diff_check: eps must be > 0")
    loss0, grads = loss_and_grad(params)
    if not np.isfinite(loss0):
        raise ValueError("finite_diff_check: loss is not finite")
    p_leaves = tree_leaves(params)
    g_leaves = tree_leaves(grads)
    coords = [(i, j) for i, leaf in enumerate(p_leaves) for j in range(leaf.size)]
    if max_entries is not None and len(coords) > max_entries:
        if rng is None:
            rng = np.random.default_rng(0)
        idx = rng.choice(len(coords), size=max_entries, replace=False)
        coords = [coords[k] for k in idx]

    worst = 0.0
    for i, j in coords:
        leaf = p_leaves[i]
        orig = leaf.flat[j]
        h = eps * max(1.0, abs(orig))
        leaf.flat[j] = orig + h
        lo_hi = loss_and_grad(params)[0]
        leaf.flat[j] = orig - h
        lo_lo = loss_and_grad(params)[0]
        leaf.flat[j] = orig
        if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
            raise ValueError("finite_diff_check: perturbed loss is not finite")
        numeric = (lo_hi - lo_lo) / (2.0 * h)
        analytic = float(g_leaves[i].reshape(-1)[j])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# initialization


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> Array:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    d = np.diag(r)
    q = q * np.where(d == 0.0, 1.0, np.sign(d))   # fix QR sign ambiguity
    out = q[:rows, :cols] if rows >= cols else q[:cols, :rows].T
    # contiguous storage keeps BLAS on one code path, so a checkpoint
    # roundtrip reproduces forward passes bit-exactly
    return np.ascontiguousarray(out)


def make_mlp(rng: np.random.Generator, dims: list[int], acts: list[str],
             out_gain: float = 1.0) -> MlpParams:
    """Orthogonal-init MLP; gain sqrt(2) on hidden layers, out_gain on the last."""
    if len(acts) != len(dims) - 1:
        raise ValueError("make_mlp: need one activation per layer")
    layers = []
    for i, act in enumerate(acts):
        gain = out_gain if i == len(acts) - 1 else np.sqrt(2.0)
        w = gain * _orthogonal(rng, dims[i + 1], dims[i])
        layers.append(Layer(w, np.zeros(dims[i + 1]), act))
    params = MlpParams(layers)
    params.validate()
    return params
