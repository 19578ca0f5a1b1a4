"""Fixed-dimension vertex features from operation parameters and layer weights."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .arch_graph import VertexRecord, lw_dim, lw_slices
from .search_space import N_OPS, UNWEIGHTED_OPS, WEIGHTED_OPS

VARIANTS = ("op", "lw", "oplw_c", "oplw_w", "oplw_ven")
UPSILON = len(WEIGHTED_OPS)
KAPPA = len(UNWEIGHTED_OPS)
VEN_HIDDEN = 60


class EncodingError(ValueError):
    pass


def feature_dim(variant: str, lw_mode: str) -> int:
    s = lw_dim(lw_mode)
    dims = {"op": N_OPS, "lw": s, "oplw_c": N_OPS + s, "oplw_w": KAPPA + s, "oplw_ven": KAPPA + s}
    if variant not in dims:
        raise EncodingError(f"unknown vertex variant {variant!r}; expected one of {VARIANTS}")
    return dims[variant]


class VEN(nn.Module):
    """Shared MLP from the weighted-op alphas to a weighting of the LW summary."""

    def __init__(self, out_dim: int, hidden: int = VEN_HIDDEN):
        super().__init__()
        self.out_dim = out_dim
        self.net = nn.Sequential(
            nn.Linear(UPSILON, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, alpha_w: torch.Tensor) -> torch.Tensor:
        if alpha_w.shape[-1] != UPSILON:
            raise EncodingError(f"VEN expects {UPSILON} weighted-op alphas, got {alpha_w.shape[-1]}")
        return self.net(alpha_w)


def ven_forward(alpha_w, ven: VEN) -> torch.Tensor:
    return ven(torch.as_tensor(alpha_w, dtype=next(ven.parameters()).dtype))


def _expand_owner(alpha_w: torch.Tensor, lw_mode: str) -> torch.Tensor:
    """Repeat each weighted-op alpha over the LW components it owns."""
    sizes = [sl.stop - sl.start for sl in lw_slices(lw_mode)]
    return torch.repeat_interleave(alpha_w, torch.tensor(sizes), dim=-1)


def encode_vertices(alphas: torch.Tensor, lw: torch.Tensor, variant: str, lw_mode: str, ven: VEN | None = None) -> torch.Tensor:
    """Batched encoding: ``alphas`` (..., 10) and ``lw`` (..., dim S) -> features."""
    if alphas.shape[-1] != N_OPS or lw.shape[-1] != lw_dim(lw_mode):
        raise EncodingError(f"record dims {alphas.shape[-1]}/{lw.shape[-1]} do not match the search space")
    a_w = alphas[..., list(WEIGHTED_OPS)]
    a_u = alphas[..., list(UNWEIGHTED_OPS)]
    if variant == "op":
        return alphas
    if variant == "lw":
        return lw
    if variant == "oplw_c":
        return torch.cat([alphas, lw], dim=-1)
    if variant == "oplw_w":
        return torch.cat([a_u, _expand_owner(a_w, lw_mode) * lw], dim=-1)
    if variant == "oplw_ven":
        if ven is None:
            raise EncodingError("oplw_ven needs a VEN")
        return torch.cat([a_u, ven(a_w) * lw], dim=-1)
    raise EncodingError(f"unknown vertex variant {variant!r}; expected one of {VARIANTS}")


def encode_vertex(record: VertexRecord, ven: VEN | None, variant: str, lw_mode: str | None = None) -> torch.Tensor:
    mode = lw_mode or ("top5" if record.lw.shape[0] == lw_dim("top5") else "hist")
    dtype = next(ven.parameters()).dtype if ven is not None else torch.float64
    a = torch.as_tensor(np.asarray(record.op_alphas), dtype=dtype)
    s = torch.as_tensor(np.asarray(record.lw), dtype=dtype)
    return encode_vertices(a, s, variant, mode, ven)
