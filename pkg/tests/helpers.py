"""Shared oracles for the test suite."""

from __future__ import annotations

import numpy as np
import torch


def finite_difference_check(loss_fn, params: list[torch.Tensor], n_checks: int = 24, eps: float = 1e-6, seed: int = 0):
    """Compare autograd gradients with central differences on random entries.

    Returns a list of (analytic, numeric, relative error) tuples.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params], dtype=np.float64)
    out = []
    with torch.no_grad():
        for _ in range(n_checks):
            k = int(rng.choice(len(params), p=sizes / sizes.sum()))
            flat = params[k].view(-1)
            i = int(rng.integers(flat.numel()))
            orig = flat[i].item()
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = analytic[k].view(-1)[i].item()
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-7)
            out.append((ana, num, rel))
    return out


def naive_kmmd(a: np.ndarray, b: np.ndarray, sigma: float) -> float:
    def k(x, y):
        d = x - y
        return np.exp(-float(d @ d) / (2 * sigma * sigma))

    m, n = len(a), len(b)
    saa = sum(k(a[i], a[j]) for i in range(m) for j in range(m))
    sbb = sum(k(b[i], b[j]) for i in range(n) for j in range(n))
    sab = sum(k(a[i], b[j]) for i in range(m) for j in range(n))
    return float(np.sqrt(max(saa / m**2 + sbb / n**2 - 2 * sab / (m * n), 0.0)))


def naive_median_sigma(x: np.ndarray) -> float:
    d = [float((x[i] - x[j]) @ (x[i] - x[j])) for i in range(len(x)) for j in range(i + 1, len(x))]
    return float(np.sqrt(np.median(d) / 2))


def brute_force_1nn(real: np.ndarray, synth: np.ndarray) -> float:
    pooled = list(real) + list(synth)
    labels = [0] * len(real) + [1] * len(synth)
    correct = 0
    for i, x in enumerate(pooled):
        best, best_j = np.inf, -1
        for j, y in enumerate(pooled):
            if j == i:
                continue
            d = float(np.sum((x - y) ** 2))
            if d < best:
                best, best_j = d, j
        correct += labels[best_j] == labels[i]
    return correct / len(pooled)


def pair_count_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))
