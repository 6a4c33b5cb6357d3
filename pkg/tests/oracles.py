"""Independent reference implementations used by the tests.

Nothing here imports the engine's math: the oracles are written with plain
Python loops or ``math.fsum`` so that they fail independently of the code
under test.
"""

from __future__ import annotations

import math

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """||a - n|| / max(||a|| + ||n||, 1e-12)."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12))


def elementwise_mean(vectors) -> list[float]:
    """Coordinate-wise mean with exactly rounded sums."""
    rows = [list(map(float, v)) for v in vectors]
    m = len(rows)
    return [math.fsum(r[j] for r in rows) / m for j in range(len(rows[0]))]


def leave_one_out(soft: dict) -> dict:
    """y_dis^k = sum of the other clients' rows divided by |S| - 1, by direct summation."""
    ids = sorted(soft)
    out = {}
    for k in ids:
        rows, cols = soft[k].shape
        t = np.zeros((rows, cols))
        for i in range(rows):
            for j in range(cols):
                t[i, j] = math.fsum(float(soft[o][i, j]) for o in ids if o != k) / (len(ids) - 1)
        out[k] = t
    return out


def softmax_rows(logits) -> np.ndarray:
    out = []
    for row in np.asarray(logits, dtype=np.float64):
        top = max(row)
        e = [math.exp(v - top) for v in row]
        s = math.fsum(e)
        out.append([v / s for v in e])
    return np.array(out)


def kl_direct(teacher, student_logits, temperature: float = 1.0) -> float:
    p = softmax_rows(np.asarray(student_logits) / temperature)
    terms = []
    for q_row, p_row in zip(np.asarray(teacher), p):
        terms.append(math.fsum(q * (math.log(q) - math.log(s)) for q, s in zip(q_row, p_row) if q > 0))
    return math.fsum(terms) / len(terms)


def accuracy_direct(predicted, labels) -> float:
    hits = 0
    for a, b in zip(predicted, labels):
        hits += int(a == b)
    return hits / len(labels)


def toy_overrides(**over) -> dict:
    """Desk-scale 4-class mixture run: K = 4, one class per client, T = 30."""
    base = dict(
        run_id="toy",
        dataset="mixture",
        partition="one_class",
        n_clients=4,
        frac=1.0,
        sampling_ratio=1.0,
        rounds=30,
        z_dim=4,
        generator_hidden=[32, 32],
        discriminator_hidden=[32, 32],
        classifier_hidden=[32, 32],
        distill_sample_count=1000,
        lr_generator=1e-3,
        lr_discriminator=1e-3,
        lr_classifier=1e-3,
        eval_every=30,
    )
    base.update(over)
    return base
