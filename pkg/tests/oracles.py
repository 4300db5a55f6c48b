"""Independent reference implementations used to freeze expected values.

Everything here is written straight-line in numpy (or scalar loops) with no
imports from the package's model classes, so a test comparing package output
against these functions is an actual cross-check rather than a tautology.
"""

import numpy as np


# ---------------------------------------------------------------------------
# Encoder pieces

def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def adjacency_ref(embedding: np.ndarray) -> np.ndarray:
    return softmax_rows(np.maximum(embedding @ embedding.T, 0.0))


def graph_conv_ref(x: np.ndarray, adj: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return adj @ x @ w + b


def agr_cell_ref(x_t, h_prev, adj, w_z, w_r, w_h, b_z, b_r, b_h):
    """One gated recurrent step with graph-conv transforms, per the update
    equations, computed with three separate convolutions."""
    def sigmoid(v):
        return 1.0 / (1.0 + np.exp(-v))

    xh = np.concatenate([x_t, h_prev], axis=-1)
    z = sigmoid(graph_conv_ref(xh, adj, w_z, b_z))
    r = sigmoid(graph_conv_ref(xh, adj, w_r, b_r))
    xrh = np.concatenate([x_t, r * h_prev], axis=-1)
    h_cand = np.tanh(graph_conv_ref(xrh, adj, w_h, b_h))
    return z * h_prev + (1.0 - z) * h_cand


def encoder_ref(window: np.ndarray, embedding: np.ndarray, cells: list[dict]) -> np.ndarray:
    """window [batch, V, T, F] through stacked reference cells -> [batch, V, C]."""
    adj = adjacency_ref(embedding)
    batch, v, t, _ = window.shape
    seq = [window[:, :, step, :] for step in range(t)]
    for cell in cells:
        h = np.zeros((batch, v, cell["w_z"].shape[1]))
        outputs = []
        for x_t in seq:
            h = agr_cell_ref(x_t, h, adj, cell["w_z"], cell["w_r"], cell["w_h"],
                             cell["b_z"], cell["b_r"], cell["b_h"])
            outputs.append(h)
        seq = outputs
    return seq[-1]


# ---------------------------------------------------------------------------
# CLUB pieces (scalar loops, no vectorized shortcuts)

def gaussian_logpdf_ref(sample: np.ndarray, mu: np.ndarray, logvar: np.ndarray) -> float:
    total = 0.0
    for c in range(sample.shape[0]):
        var = np.exp(logvar[c])
        total += -0.5 * ((sample[c] - mu[c]) ** 2 / var + logvar[c] + np.log(2.0 * np.pi))
    return total


def club_ref(samples: np.ndarray, mus: np.ndarray, logvars: np.ndarray) -> float:
    """Positive-pair mean minus all-pairs mean of log q(sample_j | cond_i)."""
    u = samples.shape[0]
    positive = sum(gaussian_logpdf_ref(samples[i], mus[i], logvars[i]) for i in range(u)) / u
    contrast = 0.0
    for i in range(u):
        for j in range(u):
            contrast += gaussian_logpdf_ref(samples[j], mus[i], logvars[i])
    contrast /= u * u
    return positive - contrast


# ---------------------------------------------------------------------------
# Server-side oracles

def cosine_ref(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.sqrt((a * a).sum()))
    nb = float(np.sqrt((b * b).sum()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float((a * b).sum() / (na * nb))


def cps_brute_force(banks: list[np.ndarray], top_k: int, tau: float) -> list[np.ndarray]:
    """Exhaustive pair enumeration of the pattern-sharing rule."""
    m = len(banks)
    o = banks[0].shape[0]
    out = [b.copy() for b in banks]
    for mi in range(m):
        for j in range(o):
            chosen = []
            for ni in range(m):
                if ni == mi:
                    continue
                scored = [(cosine_ref(banks[mi][j], banks[ni][k]), k) for k in range(o)]
                # descending similarity, index order breaking ties
                scored.sort(key=lambda t: (-t[0], t[1]))
                for sim, k in scored[:top_k]:
                    if sim > tau:
                        chosen.append(banks[ni][k])
            if chosen:
                acc = np.zeros_like(banks[mi][j])
                for c in chosen:
                    acc = acc + c
                out[mi][j] = acc / len(chosen)
    return out


def gaf_ref(prototypes: list[np.ndarray], shared_sets: list[dict], temperature: float) -> list[dict]:
    m = len(prototypes)
    sims = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            sims[i, j] = cosine_ref(prototypes[i], prototypes[j])
    weights = softmax_rows(sims / temperature)
    fused = []
    for i in range(m):
        fused.append({
            name: sum(weights[i, j] * shared_sets[j][name] for j in range(m))
            for name in shared_sets[0]
        })
    return fused


def prototype_ref(embedding: np.ndarray, proj_w: np.ndarray, proj_b: np.ndarray,
                  score_vec: np.ndarray) -> np.ndarray:
    scores = np.tanh(embedding @ proj_w.T + proj_b) @ score_vec
    weights = softmax_rows(scores[None, :])[0]
    return weights @ embedding


# ---------------------------------------------------------------------------
# Metrics

def metrics_ref(pred: np.ndarray, truth: np.ndarray, threshold: float):
    err = pred - truth
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    keep = np.abs(truth) > threshold
    if keep.any():
        mape = float(100.0 * np.mean(np.abs(err[keep]) / np.abs(truth[keep])))
    else:
        mape = None
    return mae, rmse, mape
