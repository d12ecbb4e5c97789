"""Small sequential recommenders with exact hand-derived gradients.

Three model kinds share one interface:

* ``sasrec_lite``: single-block, single-head causal self-attention followed
  by a position-wise FFN, residual adds and LayerNorms, tied output
  projection (logits = h @ E^T).
* ``poolrec``: prefix mean-pooled embeddings through two relu layers, tied
  output projection.
* ``embed_only``: prefix mean-pooled embeddings scored directly against the
  embedding table; degenerate kind with no hidden matrices, used to exercise
  the empty-Muon-group path.

Inputs are left-padded with item id 0; the embedding row for id 0 is pinned
to zero and receives no gradient. Positional embeddings are indexed by the
item's index among the non-pad entries of its row, so the amount of padding
around a sequence never changes the loss or the gradients. Padding positions
are masked out of attention keys and excluded from the loss.

All arithmetic is float64 and fully deterministic; ``loss_and_backward``
overwrites each parameter's ``grad`` buffer on every call.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .linalg import NonFiniteError, ShapeError

LN_EPS = 1e-5
INIT_SCALE = 0.02


class Role(Enum):
    HIDDEN_MATRIX = "hidden_matrix"
    BIAS = "bias"
    LAYER_NORM_GAIN = "layer_norm_gain"
    LAYER_NORM_BIAS = "layer_norm_bias"
    EMBEDDING = "embedding"
    POSITIONAL_EMBEDDING = "positional_embedding"
    OUTPUT_HEAD = "output_head"


class ModelKind(Enum):
    SASREC_LITE = "sasrec_lite"
    POOLREC = "poolrec"
    EMBED_ONLY = "embed_only"


@dataclass
class ParamTensor:
    """A named, role-tagged parameter with its gradient buffer."""

    name: str
    role: Role
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.role is Role.HIDDEN_MATRIX and self.value.ndim != 2:
            raise ShapeError(
                f"parameter '{self.name}' has role hidden_matrix but ndim "
                f"{self.value.ndim}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.asarray(self.grad, dtype=np.float64)
            if self.grad.shape != self.value.shape:
                raise ShapeError(
                    f"parameter '{self.name}': grad shape {self.grad.shape} "
                    f"!= value shape {self.value.shape}"
                )


@dataclass
class ModelSpec:
    kind: ModelKind
    vocab_size: int
    embed_dim: int
    max_len: int
    ffn_dim: int = 0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = ModelKind(self.kind)
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")
        if self.kind is ModelKind.SASREC_LITE and self.ffn_dim < 1:
            raise ValueError("sasrec_lite requires ffn_dim >= 1")


@dataclass
class Batch:
    """Item-id inputs and next-item targets, both (batch x width).

    Rows are left-padded with id 0; a target of 0 marks a position that is
    padding or has no successor and is excluded from the loss.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.inputs.shape != self.targets.shape:
            raise ShapeError(
                f"inputs shape {self.inputs.shape} != targets shape "
                f"{self.targets.shape}"
            )


def init_model(spec: ModelSpec) -> list:
    """Build the parameter list for `spec`, deterministically from its seed.

    Matrix and embedding entries are Normal(0, 0.02^2); biases and LayerNorm
    biases start at zero, LayerNorm gains at one. The padding row of the
    embedding table is forced to zero.
    """
    rng = np.random.default_rng(spec.seed)
    v, d, L, f = spec.vocab_size, spec.embed_dim, spec.max_len, spec.ffn_dim

    def normal(shape):
        return rng.normal(0.0, INIT_SCALE, size=shape)

    emb = normal((v, d))
    emb[0] = 0.0
    params = [ParamTensor("embedding", Role.EMBEDDING, emb)]

    if spec.kind is ModelKind.SASREC_LITE:
        params.append(ParamTensor("pos_embedding", Role.POSITIONAL_EMBEDDING, normal((L, d))))
        for name in ("w_q", "w_k", "w_v", "w_o"):
            params.append(ParamTensor(name, Role.HIDDEN_MATRIX, normal((d, d))))
        params.append(ParamTensor("ln1_gain", Role.LAYER_NORM_GAIN, np.ones(d)))
        params.append(ParamTensor("ln1_bias", Role.LAYER_NORM_BIAS, np.zeros(d)))
        params.append(ParamTensor("ffn_w1", Role.HIDDEN_MATRIX, normal((d, f))))
        params.append(ParamTensor("ffn_b1", Role.BIAS, np.zeros(f)))
        params.append(ParamTensor("ffn_w2", Role.HIDDEN_MATRIX, normal((f, d))))
        params.append(ParamTensor("ffn_b2", Role.BIAS, np.zeros(d)))
        params.append(ParamTensor("ln2_gain", Role.LAYER_NORM_GAIN, np.ones(d)))
        params.append(ParamTensor("ln2_bias", Role.LAYER_NORM_BIAS, np.zeros(d)))
    elif spec.kind is ModelKind.POOLREC:
        params.append(ParamTensor("w1", Role.HIDDEN_MATRIX, normal((d, d))))
        params.append(ParamTensor("b1", Role.BIAS, np.zeros(d)))
        params.append(ParamTensor("w2", Role.HIDDEN_MATRIX, normal((d, d))))
        params.append(ParamTensor("b2", Role.BIAS, np.zeros(d)))
    elif spec.kind is ModelKind.EMBED_ONLY:
        pass
    else:  # pragma: no cover
        raise ValueError(f"unknown model kind {spec.kind}")
    return params


def param_dict(params) -> dict:
    out = {}
    for p in params:
        if p.name in out:
            raise ValueError(f"duplicate parameter name '{p.name}'")
        out[p.name] = p
    return out


def _validate_ids(ids: np.ndarray, vocab_size: int, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(
            f"{what} contain ids outside [0, {vocab_size}): "
            f"min {ids.min()}, max {ids.max()}"
        )


def _positions(inputs: np.ndarray, max_len: int):
    """Non-pad mask and per-position index among the row's non-pad entries."""
    nonpad = inputs != 0
    pos = np.cumsum(nonpad, axis=1) - 1
    np.clip(pos, 0, None, out=pos)
    n_items = nonpad.sum(axis=1)
    if n_items.size and n_items.max() > max_len:
        raise ShapeError(
            f"a row holds {n_items.max()} items but max_len is {max_len}"
        )
    return nonpad, pos


def _masked_softmax(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Row softmax over allowed entries; fully-masked rows become all zeros."""
    neg = np.where(allowed, scores, -np.inf)
    rowmax = neg.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(neg - rowmax)
    e[~allowed] = 0.0
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.where(denom > 0.0, denom, 1.0)


def _layernorm(r: np.ndarray):
    mu = r.mean(axis=-1, keepdims=True)
    var = ((r - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (r - mu) * inv_std
    return xhat, inv_std


def _layernorm_backward(dout, xhat, inv_std, gain):
    axes = tuple(range(dout.ndim - 1))
    dgain = (dout * xhat).sum(axis=axes)
    dbias = dout.sum(axis=axes)
    dxhat = dout * gain
    dr = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dr, dgain, dbias


def _flat_matmul(a3: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """(B, W, i) @ (i, j) as a single GEMM."""
    bsz, width, inner = a3.shape
    return (a3.reshape(bsz * width, inner) @ b2).reshape(bsz, width, -1)


def _trunk(params, spec: ModelSpec, batch: Batch):
    """Run the model up to (but not including) the tied output projection."""
    p = param_dict(params)
    inputs = batch.inputs
    _validate_ids(inputs, spec.vocab_size, "inputs")
    _validate_ids(batch.targets, spec.vocab_size, "targets")
    nonpad, pos = _positions(inputs, spec.max_len)
    emb_table = p["embedding"].value
    cache = {"inputs": inputs, "nonpad": nonpad, "pos": pos}

    if spec.kind is ModelKind.SASREC_LITE:
        x = (emb_table[inputs] + p["pos_embedding"].value[pos]) * nonpad[:, :, None]
        q = _flat_matmul(x, p["w_q"].value)
        k = _flat_matmul(x, p["w_k"].value)
        vv = _flat_matmul(x, p["w_v"].value)
        inv_sqrt_d = 1.0 / np.sqrt(spec.embed_dim)
        scores = np.matmul(q, k.transpose(0, 2, 1)) * inv_sqrt_d
        width = inputs.shape[1]
        causal = np.tril(np.ones((width, width), dtype=bool))
        allowed = causal[None, :, :] & nonpad[:, None, :]
        attn = _masked_softmax(scores, allowed)
        ctx = np.matmul(attn, vv)
        proj = _flat_matmul(ctx, p["w_o"].value)
        r1 = x + proj
        xhat1, inv_std1 = _layernorm(r1)
        h1 = p["ln1_gain"].value * xhat1 + p["ln1_bias"].value
        a1 = _flat_matmul(h1, p["ffn_w1"].value) + p["ffn_b1"].value
        z = np.maximum(a1, 0.0)
        ffn = _flat_matmul(z, p["ffn_w2"].value) + p["ffn_b2"].value
        r2 = h1 + ffn
        xhat2, inv_std2 = _layernorm(r2)
        h2 = p["ln2_gain"].value * xhat2 + p["ln2_bias"].value
        cache.update(
            x=x, q=q, k=k, v=vv, attn=attn, ctx=ctx, inv_sqrt_d=inv_sqrt_d,
            xhat1=xhat1, inv_std1=inv_std1, h1=h1, a1=a1, z=z,
            xhat2=xhat2, inv_std2=inv_std2, h2=h2,
        )
        final = h2
    else:
        emb = emb_table[inputs] * nonpad[:, :, None]
        counts = np.cumsum(nonpad, axis=1).astype(np.float64)
        denom = np.maximum(counts, 1.0)[:, :, None]
        pool = np.cumsum(emb, axis=1) / denom
        cache.update(pool=pool, denom=denom)
        if spec.kind is ModelKind.POOLREC:
            a1 = _flat_matmul(pool, p["w1"].value) + p["b1"].value
            h1 = np.maximum(a1, 0.0)
            a2 = _flat_matmul(h1, p["w2"].value) + p["b2"].value
            h2 = np.maximum(a2, 0.0)
            cache.update(a1=a1, h1=h1, a2=a2, h2=h2)
            final = h2
        else:
            final = pool

    cache["final"] = final
    return final, cache


def forward(params, spec: ModelSpec, batch: Batch):
    """Compute logits (batch x width x vocab) and an activation cache.

    The batch width may be anything as long as no row holds more than
    `spec.max_len` items; logits at position j depend only on inputs at
    positions <= j.
    """
    final, cache = _trunk(params, spec, batch)
    emb_table = param_dict(params)["embedding"].value
    logits = _flat_matmul(final, emb_table.T)
    return logits, cache


def score_last(params, spec: ModelSpec, batch: Batch) -> np.ndarray:
    """Catalog scores (batch x vocab) for each row's final position only.

    Equal to forward(...)[0][:, -1, :] without materializing the full
    logits tensor; the cheap path for ranking evaluation.
    """
    final, _ = _trunk(params, spec, batch)
    emb_table = param_dict(params)["embedding"].value
    return final[:, -1, :] @ emb_table.T


def _xent_rows(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over rows of a 2D logit matrix, plus its gradient."""
    rowmax = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - rowmax)
    sum_e = e.sum(axis=-1, keepdims=True)
    n = logits.shape[0]
    rows = np.arange(n)
    logp = logits[rows, targets] - rowmax[:, 0] - np.log(sum_e[:, 0])
    loss = -logp.sum() / n
    dlogits = e / (sum_e * n)
    dlogits[rows, targets] -= 1.0 / n
    return float(loss), dlogits


def softmax_xent(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over supervised positions, plus d loss / d logits.

    A position is supervised iff its target id is nonzero. With no
    supervised positions the loss is 0 and the gradient all zeros.
    """
    sup = targets != 0
    if not sup.any():
        return 0.0, np.zeros_like(logits)
    b_idx, w_idx = np.nonzero(sup)
    loss, drows = _xent_rows(logits[b_idx, w_idx], targets[b_idx, w_idx])
    dlogits = np.zeros_like(logits)
    dlogits[b_idx, w_idx] = drows
    return loss, dlogits


def loss_and_backward(params, spec: ModelSpec, batch: Batch) -> float:
    """Compute the loss and write exact gradients into every ParamTensor.

    Gradient buffers are overwritten, not accumulated. The padding row of
    the embedding table always receives zero gradient.
    """
    final, cache = _trunk(params, spec, batch)
    p = param_dict(params)
    for t in params:
        t.grad = np.zeros_like(t.value)

    bsz, width, dim = final.shape
    sup = batch.targets != 0
    if not sup.any():
        return 0.0
    # logits and their gradient are nonzero only at supervised positions,
    # so the wide GEMMs run on that row subset
    emb_table = p["embedding"].value
    sel = sup.ravel()
    final_sup = final.reshape(bsz * width, dim)[sel]
    logits_sup = final_sup @ emb_table.T
    loss, drows = _xent_rows(logits_sup, batch.targets.ravel()[sel])
    if not np.isfinite(loss):
        raise NonFiniteError("training loss is non-finite")
    # logits = final @ E^T: gradient reaches both the trunk and the tied table
    flat_dfinal = np.zeros((bsz * width, dim))
    flat_dfinal[sel] = drows @ emb_table
    dfinal = flat_dfinal.reshape(final.shape)
    p["embedding"].grad += drows.T @ final_sup

    nonpad = cache["nonpad"]
    inputs = cache["inputs"]

    if spec.kind is ModelKind.SASREC_LITE:
        dh2 = dfinal
        dr2, dg2, db2 = _layernorm_backward(
            dh2, cache["xhat2"], cache["inv_std2"], p["ln2_gain"].value
        )
        p["ln2_gain"].grad += dg2
        p["ln2_bias"].grad += db2
        dh1 = dr2.copy()
        dffn = dr2
        flat_dffn = dffn.reshape(bsz * width, -1)
        flat_z = cache["z"].reshape(bsz * width, -1)
        p["ffn_w2"].grad += flat_z.T @ flat_dffn
        p["ffn_b2"].grad += flat_dffn.sum(axis=0)
        dz = _flat_matmul(dffn, p["ffn_w2"].value.T)
        da1 = dz * (cache["a1"] > 0.0)
        flat_da1 = da1.reshape(bsz * width, -1)
        flat_h1 = cache["h1"].reshape(bsz * width, -1)
        p["ffn_w1"].grad += flat_h1.T @ flat_da1
        p["ffn_b1"].grad += flat_da1.sum(axis=0)
        dh1 += _flat_matmul(da1, p["ffn_w1"].value.T)
        dr1, dg1, db1 = _layernorm_backward(
            dh1, cache["xhat1"], cache["inv_std1"], p["ln1_gain"].value
        )
        p["ln1_gain"].grad += dg1
        p["ln1_bias"].grad += db1
        dx = dr1.copy()
        dproj = dr1
        flat_dproj = dproj.reshape(bsz * width, -1)
        flat_ctx = cache["ctx"].reshape(bsz * width, -1)
        p["w_o"].grad += flat_ctx.T @ flat_dproj
        dctx = _flat_matmul(dproj, p["w_o"].value.T)
        attn = cache["attn"]
        dattn = np.matmul(dctx, cache["v"].transpose(0, 2, 1))
        dv = np.matmul(attn.transpose(0, 2, 1), dctx)
        # softmax backward; masked entries have attn == 0 so their grad is 0
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        ds *= cache["inv_sqrt_d"]
        dq = np.matmul(ds, cache["k"])
        dk = np.matmul(ds.transpose(0, 2, 1), cache["q"])
        flat_x = cache["x"].reshape(bsz * width, -1)
        for mat, dmat in (("w_q", dq), ("w_k", dk), ("w_v", dv)):
            flat_d = dmat.reshape(bsz * width, -1)
            p[mat].grad += flat_x.T @ flat_d
            dx += _flat_matmul(dmat, p[mat].value.T)
        dx *= nonpad[:, :, None]
        sel = nonpad.ravel()
        flat_dx = dx.reshape(bsz * width, -1)[sel]
        np.add.at(p["embedding"].grad, inputs.ravel()[sel], flat_dx)
        np.add.at(p["pos_embedding"].grad, cache["pos"].ravel()[sel], flat_dx)
    else:
        if spec.kind is ModelKind.POOLREC:
            dh2 = dfinal
            da2 = dh2 * (cache["a2"] > 0.0)
            flat_da2 = da2.reshape(bsz * width, -1)
            flat_h1 = cache["h1"].reshape(bsz * width, -1)
            p["w2"].grad += flat_h1.T @ flat_da2
            p["b2"].grad += flat_da2.sum(axis=0)
            dh1 = _flat_matmul(da2, p["w2"].value.T)
            da1 = dh1 * (cache["a1"] > 0.0)
            flat_da1 = da1.reshape(bsz * width, -1)
            flat_pool = cache["pool"].reshape(bsz * width, -1)
            p["w1"].grad += flat_pool.T @ flat_da1
            p["b1"].grad += flat_da1.sum(axis=0)
            dpool = _flat_matmul(da1, p["w1"].value.T)
        else:
            dpool = dfinal
        dsums = dpool / cache["denom"]
        demb = np.cumsum(dsums[:, ::-1, :], axis=1)[:, ::-1, :]
        demb = demb * nonpad[:, :, None]
        sel = nonpad.ravel()
        np.add.at(
            p["embedding"].grad,
            inputs.ravel()[sel],
            demb.reshape(bsz * width, -1)[sel],
        )

    p["embedding"].grad[0] = 0.0
    return loss
