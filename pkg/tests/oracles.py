"""Independent reference implementations used to check the production paths.

Everything here is deliberately naive: nested loops, exhaustive enumeration,
direct formula evaluation, all in float64. None of it shares code with the
package under test.
"""

import math

import numpy as np


def conv3d_loops(x, kernel, bias, stride=(1, 1, 1), padding=(1, 1, 1)):
    """Six-nested-loop 3-D cross-correlation. x: (c_in, s, h, w)."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    c_out, c_in, kt, kh, kw = kernel.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    xp = np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    _, sp, hp, wp = xp.shape
    so = (sp - kt) // st + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    out = np.zeros((c_out, so, ho, wo))
    for o in range(c_out):
        for t in range(so):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c_in):
                        for a in range(kt):
                            for b in range(kh):
                                for c in range(kw):
                                    acc += (
                                        xp[ci, t * st + a, i * sh + b, j * sw + c]
                                        * kernel[o, ci, a, b, c]
                                    )
                    out[o, t, i, j] = acc + bias[o]
    return out


def reduce_loops(x, op, axis):
    """Per-element loop reduction (mean or max) over one axis."""
    x = np.asarray(x, dtype=np.float64)
    out_shape = x.shape[:axis] + x.shape[axis + 1 :]
    out = np.zeros(out_shape)
    for idx in np.ndindex(out_shape):
        full = idx[:axis] + (slice(None),) + idx[axis:]
        vals = [float(v) for v in x[full]]
        if op == "mean":
            out[idx] = sum(vals) / len(vals)
        elif op == "max":
            best = vals[0]
            for v in vals[1:]:
                if v > best:
                    best = v
            out[idx] = best
        else:
            raise ValueError(op)
    return out


def gem_pool_formula(x, p, eps=1e-6):
    """Direct evaluation of (mean_w((max(x,0)+eps)^p))^(1/p) per (c, h)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(x.shape[:-1])
    for idx in np.ndindex(out.shape):
        row = x[idx]
        acc = 0.0
        for v in row:
            acc += (max(float(v), 0.0) + eps) ** p
        out[idx] = (acc / row.size) ** (1.0 / p)
    return out


def matmul_loops(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, p = b.shape
    assert k == k2
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def triplet_enumeration(embeddings, labels, margin):
    """Exhaustive batch-all triplet loss over every valid (a, p, n) triple.

    Returns (loss, active_triples) where active_triples lists the
    (anchor, positive, negative) index tuples with strictly positive loss.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = emb.shape[0]
    active = []
    total = 0.0
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            for q in range(n):
                if labels[q] == labels[a]:
                    continue
                d_ap = math.sqrt(float(((emb[a] - emb[p]) ** 2).sum()))
                d_an = math.sqrt(float(((emb[a] - emb[q]) ** 2).sum()))
                val = d_ap - d_an + margin
                if val > 0:
                    active.append((a, p, q))
                    total += val
    if not active:
        return 0.0, []
    return total / len(active), active


def rank1_bruteforce(gallery, probes):
    """Nearest-neighbour subject match by exhaustive pairwise distances.

    gallery/probes: lists of (subject, descriptor). Ties go to the lowest
    gallery list index. Returns percent of probes whose match shares the
    subject, or None for an empty side.
    """
    if not gallery or not probes:
        return None
    correct = 0
    for subject, desc in probes:
        best_i = -1
        best_d = None
        for i, (g_subj, g_desc) in enumerate(gallery):
            d = math.sqrt(float(((np.asarray(desc, np.float64)
                                  - np.asarray(g_desc, np.float64)) ** 2).sum()))
            if best_d is None or d < best_d:
                best_d = d
                best_i = i
        if gallery[best_i][0] == subject:
            correct += 1
    return 100.0 * correct / len(probes)


def adam_scalar_loop(params, grads, m, v, t, lr, beta1, beta2, eps):
    """Element-at-a-time Adam with bias correction; returns new (p, m, v)."""
    p_new = np.array(params, dtype=np.float64).reshape(-1)
    m_new = np.array(m, dtype=np.float64).reshape(-1)
    v_new = np.array(v, dtype=np.float64).reshape(-1)
    g = np.asarray(grads, dtype=np.float64).reshape(-1)
    for i in range(p_new.size):
        m_new[i] = beta1 * m_new[i] + (1 - beta1) * g[i]
        v_new[i] = beta2 * v_new[i] + (1 - beta2) * g[i] * g[i]
        m_hat = m_new[i] / (1 - beta1**t)
        v_hat = v_new[i] / (1 - beta2**t)
        p_new[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)
    shape = np.asarray(params).shape
    return p_new.reshape(shape), m_new.reshape(shape), v_new.reshape(shape)
