"""Slow reference implementations used to check the vectorized code.

Everything here is plain numpy and explicit Python loops.  Nothing is imported
from the rest of the package; weights come in as dicts of arrays keyed like a
``state_dict``.
"""

from __future__ import annotations

import math

import numpy as np


def naive_attention(q, k, v, visible=None, scale=None):
    """Softmax attention with an explicit double loop.

    ``q`` [Tq, d], ``k`` [Tk, d], ``v`` [Tk, dv]; ``visible`` is either a
    [Tk] key mask or a [Tq, Tk] pair mask.  Returns (output, probabilities).
    Queries with no visible key get a zero output and zero probabilities.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    tq, tk = q.shape[0], k.shape[0]
    scale = 1.0 / math.sqrt(q.shape[1]) if scale is None else scale
    if visible is None:
        allowed = np.ones((tq, tk), dtype=bool)
    else:
        allowed = np.asarray(visible, dtype=bool)
        if allowed.ndim == 1:
            allowed = np.broadcast_to(allowed, (tq, tk))
    probs = np.zeros((tq, tk))
    out = np.zeros((tq, v.shape[1]))
    for i in range(tq):
        logits = []
        for j in range(tk):
            if allowed[i, j]:
                s = 0.0
                for c in range(q.shape[1]):
                    s += q[i, c] * k[j, c]
                logits.append((j, s * scale))
        if not logits:
            continue
        m = max(s for _, s in logits)
        z = sum(math.exp(s - m) for _, s in logits)
        for j, s in logits:
            probs[i, j] = math.exp(s - m) / z
            out[i] += probs[i, j] * v[j]
    return out, probs


def finite_difference(objective, point, h=1e-4):
    """Central-difference gradient of a scalar function of an array."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(objective(x))
        flat[i] = orig - h
        down = float(objective(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def naive_topk(scores, k):
    """Indices of the k largest scores; equal scores keep ascending index order."""
    order = sorted(range(len(scores)), key=lambda i: (-float(scores[i]), i))
    return sorted(order[:k])


def naive_pool(volume, visible=None):
    """Average and max over the visible spatial positions of a [H, W, D] map."""
    h, w, d = volume.shape
    avg, mx = np.zeros(d), np.full(d, -np.inf)
    count = 0
    for i in range(h):
        for j in range(w):
            if visible is not None and not visible[i, j]:
                continue
            count += 1
            for c in range(d):
                avg[c] += volume[i, j, c]
                mx[c] = max(mx[c], volume[i, j, c])
    if count == 0:
        raise ValueError("no visible positions")
    return avg / count, mx


def naive_class_pool(protos):
    """Average and max over the class axis of [N, D] prototypes."""
    n, d = protos.shape
    avg = np.array([sum(protos[i, c] for i in range(n)) / n for c in range(d)])
    mx = np.array([max(protos[i, c] for i in range(n)) for c in range(d)])
    return avg, mx


def naive_reassemble(c_f, c_b, fg_mask, gate=None):
    """Per-token merge of branch volumes [H, W, N, D] under an [HW, N] foreground mask.

    Without ``gate`` the owning branch's value is copied; with a gate [N, D]
    (or a scalar) each token becomes ``g * f + (1 - g) * b``.
    """
    h, w, n, d = c_f.shape
    out = np.zeros_like(c_f, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            t = i * w + j
            for cls in range(n):
                for c in range(d):
                    if gate is None:
                        out[i, j, cls, c] = c_f[i, j, cls, c] if fg_mask[t, cls] else c_b[i, j, cls, c]
                    else:
                        g = gate if np.isscalar(gate) else gate[cls, c if np.shape(gate)[1] > 1 else 0]
                        out[i, j, cls, c] = g * c_f[i, j, cls, c] + (1 - g) * c_b[i, j, cls, c]
    return out


def naive_iou(pred, gt, n_classes):
    """Per-class IoU from explicit pixel sets; classes absent from both are None."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    ious = []
    for c in range(n_classes):
        p = {(i, j) for i in range(pred.shape[0]) for j in range(pred.shape[1]) if pred[i, j] == c}
        g = {(i, j) for i in range(gt.shape[0]) for j in range(gt.shape[1]) if gt[i, j] == c}
        union = p | g
        ious.append(None if not union else len(p & g) / len(union))
    valid = [v for v in ious if v is not None]
    return ious, (sum(valid) / len(valid) if valid else float("nan"))


# ---------------------------------------------------------------------------
# layer-level references
# ---------------------------------------------------------------------------

def _layernorm(x, weight, bias, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((xi - mu) ** 2 for xi in x) / len(x)
    return np.array([(xi - mu) / math.sqrt(var + eps) * weight[i] + bias[i] for i, xi in enumerate(x)])


def _dense(x, weight, bias=None):
    out = np.array([sum(weight[o, i] * x[i] for i in range(len(x))) for o in range(weight.shape[0])])
    return out if bias is None else out + bias


def _gelu(x):
    return np.array([0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))) for v in x])


def _relu(x):
    return np.array([max(v, 0.0) for v in x])


def naive_mlp(x, w1, b1, w2, b2, act="relu"):
    f = _relu if act == "relu" else _gelu
    return _dense(f(_dense(x, w1, b1)), w2, b2)


def _multihead(q, k, v, allowed, n_heads):
    d = q.shape[1]
    dh = d // n_heads
    out = np.zeros((q.shape[0], d))
    probs = []
    for hd in range(n_heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        o, p = naive_attention(q[:, sl], k[:, sl], v[:, sl], allowed)
        out[:, sl] = o
        probs.append(p)
    return out, probs


def naive_cross_attention(weights, image, text, n_heads, n_layers, prefix=""):
    """Attention map [HW, N_C] of the text-query / image-key stack, head-averaged at the last layer.

    ``image`` [HW, D_enc], ``text`` [N_C, D_enc].
    """
    w = {k[len(prefix):]: np.asarray(v, dtype=np.float64) for k, v in weights.items() if k.startswith(prefix)}
    img = np.array([_dense(t, w["embed.weight"]) for t in image])
    x = np.array([_dense(t, w["embed.weight"]) for t in text])
    probs = None
    for layer in range(n_layers):
        p = f"layers.{layer}."
        kv = np.array([_layernorm(t, w[p + "norm_kv.weight"], w[p + "norm_kv.bias"]) for t in img])
        qn = np.array([_layernorm(t, w[p + "norm_q.weight"], w[p + "norm_q.bias"]) for t in x])
        q = np.array([_dense(t, w[p + "q.weight"]) for t in qn])
        k = np.array([_dense(t, w[p + "k.weight"]) for t in kv])
        if layer == n_layers - 1:
            _, probs = _multihead(q, k, k, None, n_heads)
            break
        v = np.array([_dense(t, w[p + "v.weight"]) for t in kv])
        o, _ = _multihead(q, k, v, None, n_heads)
        x = x + np.array([_dense(t, w[p + "o.weight"], w[p + "o.bias"]) for t in o])
        ff = []
        for t in x:
            y = _layernorm(t, w[p + "norm_ff.weight"], w[p + "norm_ff.bias"])
            ff.append(naive_mlp(y, w[p + "ff.0.weight"], w[p + "ff.0.bias"], w[p + "ff.2.weight"],
                                w[p + "ff.2.bias"], act="gelu"))
        x = x + np.array(ff)
    return (sum(probs) / len(probs)).T


def shifted_window_group(i, size, window, shift):
    """Window id along one axis when windows start at offset ``shift`` (rows before it form their own group)."""
    return (i - shift) // window


def naive_window_block(weights, x, visible, window, shift, n_heads, prefix=""):
    """One masked (optionally shifted) window block on a single class map [H, W, D].

    Windows are enumerated directly in grid coordinates: with shift s, rows
    ``[0, s)`` form a group of their own and the rest are tiled from row s.
    Invisible tokens are copied through unchanged.
    """
    w = {k[len(prefix):]: np.asarray(v, dtype=np.float64) for k, v in weights.items() if k.startswith(prefix)}
    h, wd, d = x.shape
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    groups: dict[tuple, list] = {}
    for i in range(h):
        for j in range(wd):
            key = (shifted_window_group(i, h, window, shift), shifted_window_group(j, wd, window, shift))
            groups.setdefault(key, []).append((i, j))
    for cells in groups.values():
        toks = np.array([x[i, j] for i, j in cells])
        vis = np.array([bool(visible[i, j]) for i, j in cells])
        if not vis.any():
            continue
        normed = np.array([_layernorm(t, w["norm1.weight"], w["norm1.bias"]) for t in toks])
        qkv = np.array([_dense(t, w["qkv.weight"], w["qkv.bias"]) for t in normed])
        q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        attn, _ = _multihead(q, k, v, vis, n_heads)
        for idx, (i, j) in enumerate(cells):
            if not vis[idx]:
                continue
            y = toks[idx] + _dense(attn[idx], w["proj.weight"], w["proj.bias"])
            z = _layernorm(y, w["norm2.weight"], w["norm2.bias"])
            out[i, j] = y + naive_mlp(z, w["mlp.0.weight"], w["mlp.0.bias"], w["mlp.2.weight"],
                                      w["mlp.2.bias"], act="gelu")
    return out


def naive_fuse(c_prime, p_c, p_s, w1, b1, w2, b2):
    """Per-class, per-channel gate ``sigmoid(MLP([P^c_i, P^s]))`` applied to a [H, W, N, D] volume."""
    h, wd, n, d = c_prime.shape
    out = np.zeros_like(c_prime, dtype=np.float64)
    for cls in range(n):
        joint = np.concatenate([p_c[cls], p_s])
        pre = naive_mlp(joint, w1, b1, w2, b2, act="relu")
        for c in range(d):
            g = 1.0 / (1.0 + math.exp(-pre[c]))
            for i in range(h):
                for j in range(wd):
                    out[i, j, cls, c] = c_prime[i, j, cls, c] * g
    return out


def linear_probe_predict(embeddings, class_vectors):
    """Nearest-planted-vector probe: label = argmax of the dot product with each class direction."""
    h, w, _ = embeddings.shape
    out = np.zeros((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            scores = [float(np.dot(embeddings[i, j], cv)) for cv in class_vectors]
            out[i, j] = int(np.argmax(scores))
    return out


def fit_linear_probe(features, labels, n_classes, ridge=1e-6):
    """Least-squares linear probe (with bias) from [M, D] features to one-hot labels."""
    x = np.hstack([np.asarray(features, dtype=np.float64), np.ones((len(features), 1))])
    y = np.eye(n_classes)[np.asarray(labels)]
    return np.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y)


def apply_linear_probe(weights, features):
    x = np.hstack([np.asarray(features, dtype=np.float64), np.ones((len(features), 1))])
    return (x @ weights).argmax(1)
