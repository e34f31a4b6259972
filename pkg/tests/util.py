"""Shared helpers: random raster builders and independent oracles.

The oracles here are deliberately naive (python loops, full sorts, BFS) so
they stay independent of the vectorized implementations they check.
"""

import math

import numpy as np
import torch

from styleless.datamodel import LabelMap, ProbabilityMap


def random_probmap(rng, h, w, k, floor=1e-3):
    raw = rng.random((h, w, k)) + floor
    return ProbabilityMap(raw / raw.sum(axis=2, keepdims=True))


def random_labelmap(rng, h, w, k, unlabeled_frac=0.2):
    idx = rng.integers(0, k, size=(h, w))
    idx[rng.random((h, w)) < unlabeled_frac] = 255
    onehot = np.zeros((h, w, k), dtype=np.uint8)
    valid = idx != 255
    onehot[valid, idx[valid]] = 1
    return LabelMap(onehot)


def mpt_oracle(probs: np.ndarray) -> np.ndarray:
    """Per-pixel-loop pseudo labeling: argmax with lowest-index ties, per-class
    median winning confidence capped at 0.9, strict acceptance."""
    h, w, k = probs.shape
    win = np.zeros((h, w), dtype=np.int64)
    conf = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            best_k, best_p = 0, probs[i, j, 0]
            for c in range(1, k):
                if probs[i, j, c] > best_p:
                    best_k, best_p = c, probs[i, j, c]
            win[i, j], conf[i, j] = best_k, best_p
    thres = []
    for c in range(k):
        vals = sorted(
            (conf[i, j] for i in range(h) for j in range(w) if win[i, j] == c),
            reverse=True,
        )
        thres.append(0.9 if not vals else min(vals[len(vals) // 2], 0.9))
    out = np.zeros((h, w, k), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            if conf[i, j] > thres[win[i, j]]:
                out[i, j, win[i, j]] = 1
    return out


def ce_oracle(probs: np.ndarray, onehot: np.ndarray, weights=None) -> float:
    """Plain-python weighted negative log likelihood over labeled pixels."""
    h, w, k = probs.shape
    if weights is None:
        weights = [1.0] * k
    total, n = 0.0, 0
    for i in range(h):
        for j in range(w):
            for c in range(k):
                if onehot[i, j, c] == 1:
                    total += weights[c] * math.log(max(probs[i, j, c], 1e-8))
                    n += 1
    return 0.0 if n == 0 else -total / n


def component_count_oracle(mask: np.ndarray) -> int:
    """BFS flood fill under 4-connectivity."""
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    count = 0
    for i in range(h):
        for j in range(w):
            if mask[i, j] and not seen[i, j]:
                count += 1
                stack = [(i, j)]
                seen[i, j] = True
                while stack:
                    a, b = stack.pop()
                    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        ni, nj = a + di, b + dj
                        if 0 <= ni < h and 0 <= nj < w and mask[ni, nj] and not seen[ni, nj]:
                            seen[ni, nj] = True
                            stack.append((ni, nj))
    return count


def fd_gradient(fn, x: torch.Tensor, step=1e-5) -> torch.Tensor:
    """Central finite differences of a scalar closure w.r.t. every entry of x.

    ``fn`` must read ``x`` itself; entries are perturbed in place and restored.
    """
    grad = torch.zeros_like(x)
    with torch.no_grad():
        flat, gflat = x.reshape(-1), grad.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = float(fn())
            flat[i] = orig - step
            f_minus = float(fn())
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def autograd_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x.requires_grad_(True)
    loss = fn()
    (grad,) = torch.autograd.grad(loss, x)
    x.requires_grad_(False)
    return grad
