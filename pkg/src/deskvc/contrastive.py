"""Chunk-shuffle negative sampling and the temperature-scaled contrastive
objective aligning text embeddings with speaker embeddings.

Negatives are built by permuting K contiguous chunks of the projected text
embedding; the identity permutation is excluded and permutations are drawn
uniformly without replacement. The loss is the negated log-softmax of the
positive cosine term, so minimizing it maximizes positive-pair similarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InputError

DEFAULT_NEGATIVES = 10  # N
DEFAULT_CHUNKS = 8  # K
TAU_INIT = 0.07
TAU_MIN = 0.01
TAU_MAX = 1.0


@dataclass
class NegativeSet:
    """N chunk-shuffled copies of a source embedding with their permutations."""

    negatives: torch.Tensor  # [N, dim]
    permutations: tuple[tuple[int, ...], ...]
    source: torch.Tensor  # [dim]

    def __post_init__(self):
        if self.negatives.ndim != 2 or self.negatives.shape[0] != len(self.permutations):
            raise InputError("negatives must be [N x dim] with one permutation per row")


class Temperature(torch.nn.Module):
    """Learnable softmax temperature, clamped to [0.01, 1.0] after updates."""

    def __init__(self, init: float = TAU_INIT):
        super().__init__()
        if not (TAU_MIN <= init <= TAU_MAX):
            raise InputError(f"tau init {init} outside [{TAU_MIN}, {TAU_MAX}]")
        self.value = torch.nn.Parameter(torch.tensor(float(init)))

    def clamp_(self):
        with torch.no_grad():
            self.value.clamp_(TAU_MIN, TAU_MAX)


def _draw_permutations(k: int, n: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    identity = tuple(range(k))
    seen: set[tuple[int, ...]] = set()
    out: list[tuple[int, ...]] = []
    while len(out) < n:
        perm = tuple(int(i) for i in rng.permutation(k))
        if perm == identity or perm in seen:
            continue
        seen.add(perm)
        out.append(perm)
    return out


def make_negatives(
    g: torch.Tensor,
    k: int = DEFAULT_CHUNKS,
    n: int = DEFAULT_NEGATIVES,
    rng_seed: int | None = None,
) -> NegativeSet:
    """Build N negatives by reordering the K contiguous chunks of g.

    Permutations are distinct, non-identity, and uniform over the remaining
    K!-1 candidates. Gradients flow from the negatives back into g.
    """
    if g.ndim != 1:
        raise InputError(f"g must be a vector, got shape {tuple(g.shape)}")
    dim = g.shape[0]
    if k < 2:
        raise InputError(f"chunk count K must be >= 2, got {k}")
    if dim % k != 0:
        raise InputError(f"K={k} does not divide embedding dim {dim}")
    if n < 1 or n > math.factorial(k) - 1:
        raise InputError(f"N={n} outside [1, K!-1] for K={k}")

    rng = np.random.default_rng(rng_seed)
    perms = _draw_permutations(k, n, rng)
    chunk = dim // k
    pieces = g.reshape(k, chunk)
    negatives = torch.stack([pieces[list(p)].reshape(dim) for p in perms])
    return NegativeSet(negatives=negatives, permutations=tuple(perms), source=g)


def _unit(v: torch.Tensor, name: str) -> torch.Tensor:
    norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    if torch.any(norm == 0):
        raise InputError(f"{name} has zero norm; cosine undefined")
    return v / norm


def contrastive_loss(
    g: torch.Tensor,
    negatives: NegativeSet,
    s: torch.Tensor,
    tau: torch.Tensor | Temperature | float,
) -> torch.Tensor:
    """-log softmax of cos(g, s)/tau against the negatives' cosines."""
    if isinstance(tau, Temperature):
        tau = tau.value
    elif not isinstance(tau, torch.Tensor):
        tau = torch.tensor(float(tau), dtype=g.dtype)
    if float(tau.detach()) <= 0:
        raise InputError(f"temperature must be positive, got {float(tau.detach())}")
    if g.shape != s.shape or g.ndim != 1:
        raise InputError(f"g and s must be equal-shape vectors, got {g.shape} vs {s.shape}")
    if negatives.negatives.shape[1] != g.shape[0]:
        raise InputError("negatives dimension does not match g")

    s_hat = _unit(s, "s")
    candidates = torch.cat([g.unsqueeze(0), negatives.negatives], dim=0)
    cosines = _unit(candidates, "g or a negative") @ s_hat
    logits = cosines / tau
    return torch.logsumexp(logits, dim=0) - logits[0]
