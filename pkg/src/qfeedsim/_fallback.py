"""Numpy implementations of the inner loops in ``_kernels.pyx``.

Used when the compiled extension is missing or ``QFEEDSIM_PURE_PYTHON`` is set.
Signatures and return dtypes match the compiled module exactly.
"""
import numpy as np


def sandwich_all(kraus, states):
    kraus = np.asarray(kraus)
    states = np.asarray(states)
    # (N, 1, d, d) against (X, d, d) broadcasts to (N, X, d, d)
    left = np.matmul(kraus[None, :, :, :], states[:, None, :, :])
    return np.ascontiguousarray(np.matmul(left, kraus.conj().transpose(0, 2, 1)[None]))


def select_sandwich(kraus, states, choice):
    ops = np.asarray(kraus)[np.asarray(choice)]
    return np.ascontiguousarray(ops @ np.asarray(states) @ ops.conj().transpose(0, 2, 1))


def apply_kraus(ops, states):
    ops = np.asarray(ops)
    states = np.asarray(states)
    out = ops @ states[:, None, :, :] @ ops.conj().transpose(0, 1, 3, 2)
    return np.ascontiguousarray(out.sum(axis=1))


def scatter_add(contribs, slots, m):
    contribs = np.asarray(contribs)
    out = np.zeros((m,) + contribs.shape[1:], dtype=np.complex128)
    np.add.at(out, np.asarray(slots), contribs)
    return out


def born_batch(effects, states):
    return np.ascontiguousarray(np.einsum("xij,bji->bx", effects, states).real)


def traces(states):
    return np.ascontiguousarray(np.trace(states, axis1=1, axis2=2).real)


def categorical(probs, u):
    probs = np.where(probs > 0.0, probs, 0.0)
    cum = np.cumsum(probs, axis=1)
    target = np.asarray(u) * cum[:, -1]
    hit = (cum > target[:, None]) & (probs > 0.0)
    first = np.argmax(hit, axis=1)
    # rounding can leave no column above the target; take the last live one
    live = probs > 0.0
    last = probs.shape[1] - 1 - np.argmax(live[:, ::-1], axis=1)
    last = np.where(live.any(axis=1), last, -1)
    return np.where(hit.any(axis=1), first, last).astype(np.int64)


def project(raw, mins, steps, counts, tol):
    raw = np.asarray(raw, dtype=np.float64)
    top = mins + (counts - 1) * steps
    clipped = ((raw < mins - tol * steps) | (raw > top + tol * steps)).any(axis=1)
    v = np.clip(raw, mins, top)
    idx = np.ceil((v - mins) / steps - 0.5).astype(np.int64)
    idx = np.clip(idx, 0, counts - 1)
    return np.ascontiguousarray(idx), clipped
