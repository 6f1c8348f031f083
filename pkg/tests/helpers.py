"""Shared test oracles.

``central_difference`` estimates gradients of float64 scalar functions.
The ``mirror_*`` functions re-implement the model forward, the masked blend
step, and the training loss in plain float64 numpy, independently of the
Tensor engine, so gradient and trajectory checks compare two separately
written computations.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


def central_difference(f, x, h=1e-3):
    """Gradient of the scalar function ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_close_rel(got, want, tol=1e-3, floor=1e-6):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    err = float(np.max(np.abs(got - want))) if got.size else 0.0
    scale = max(float(np.max(np.abs(want))) if want.size else 0.0, floor)
    assert err / scale <= tol, f"rel err {err / scale:.3e} > {tol} (abs {err:.3e})"


def assert_grads_match(tensor_fn, mirror_fn, inputs, tol=1e-3, h=1e-3):
    """AD gradient of ``tensor_fn`` vs central differences of ``mirror_fn``.

    Both callables take one argument per entry of ``inputs`` and return a
    scalar (Tensor / float respectively).
    """
    from blockskip.tensor import Tensor, backward

    tensors = [Tensor(np.asarray(x, dtype=np.float32), requires_grad=True) for x in inputs]
    loss = tensor_fn(*tensors)
    grads = backward(loss)
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
    for i, t in enumerate(tensors):
        def partial(v, _i=i):
            args = [v if j == _i else arrays[j] for j in range(len(arrays))]
            return float(mirror_fn(*args))
        fd = central_difference(partial, arrays[i], h=h)
        ad = grads.get(t)
        assert ad is not None, f"no gradient for input {i}"
        assert_close_rel(ad, fd, tol=tol)


# -- float64 mirror of the block-chain model ------------------------------------


def _p(model, name):
    return model.param(name).data.astype(np.float64)


def mirror_layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def mirror_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mirror_embed_input(model, x):
    x = np.asarray(x, dtype=np.float64)
    if model.spec.mode == "image8":
        n = x.shape[0]
        x = x.reshape(n, 16, 4)
    return x @ _p(model, "in_w") + _p(model, "in_b")


def mirror_block(model, b, h, emb_row):
    kind = model.spec.block_kinds[b]
    prefix = f"block{b:02d}"
    u = mirror_layer_norm(h + emb_row)
    if kind == "mlp":
        z = np.maximum(u @ _p(model, f"{prefix}.w1") + _p(model, f"{prefix}.b1"), 0.0)
        z = z @ _p(model, f"{prefix}.w2") + _p(model, f"{prefix}.b2")
    else:
        q = u @ _p(model, f"{prefix}.wq")
        k = u @ _p(model, f"{prefix}.wk")
        v = u @ _p(model, f"{prefix}.wv")
        scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(model.spec.width)
        z = (mirror_softmax(scores) @ v) @ _p(model, f"{prefix}.wo")
    return h + z


def mirror_project(model, h):
    out = h @ _p(model, "out_w") + _p(model, "out_b")
    if model.spec.mode == "image8":
        out = out.reshape(out.shape[0], 64)
    return out


def mirror_forward(model, x, t):
    h = mirror_embed_input(model, x)
    emb_row = _p(model, "emb")[t]
    feats = []
    for b in range(model.num_blocks):
        h = mirror_block(model, b, h, emb_row)
        feats.append(h)
    return mirror_project(model, h), feats


def mirror_masked_step_continuous(model, x, t, coeffs, cache_entries):
    """Blend semantics of the continuous masked step, in float64."""
    h = mirror_embed_input(model, x)
    emb_row = _p(model, "emb")[t]
    for b in range(model.num_blocks):
        computed = mirror_block(model, b, h, emb_row)
        entry = cache_entries[b]
        if entry is None:
            assert float(coeffs[b]) == 1.0, "uninitialized cache needs coefficient 1"
            h = computed
        else:
            c = float(coeffs[b])
            h = c * computed + (1.0 - c) * np.asarray(entry, dtype=np.float64)
    return mirror_project(model, h), h


def mirror_min_preactivation(model, t, scores, x, cache_entries):
    """Smallest |relu pre-activation| along the blended step.

    Finite differences are only meaningful away from the kinks; callers
    reject sample points whose margin is smaller than the stencil reach.
    """
    h = mirror_embed_input(model, x)
    emb_row = _p(model, "emb")[t]
    margin = np.inf
    for b in range(model.num_blocks):
        assert model.spec.block_kinds[b] == "mlp"
        u = mirror_layer_norm(h + emb_row)
        pre = u @ _p(model, f"block{b:02d}.w1") + _p(model, f"block{b:02d}.b1")
        margin = min(margin, float(np.abs(pre).min()))
        z = np.maximum(pre, 0.0) @ _p(model, f"block{b:02d}.w2") + _p(model, f"block{b:02d}.b2")
        computed = h + z
        c = float(scores[b])
        entry = cache_entries[b]
        h = computed if entry is None else c * computed + (1.0 - c) * entry
    return margin


def mirror_step_loss(model, t, scores, x, cache_entries, x_ori_end,
                     lambda1, lambda2, weight):
    """The weighted feature/sparsity/bimodality objective, in float64."""
    scores = np.asarray(scores, dtype=np.float64)
    _, end = mirror_masked_step_continuous(model, x, t, scores, cache_entries)
    diff = end - np.asarray(x_ori_end, dtype=np.float64)
    feature = np.sqrt((diff * diff).sum())
    sparse = scores.sum()
    bimodal = (scores * (1.0 - scores)).sum()
    return feature + lambda1 * weight * sparse + lambda2 * weight * bimodal
