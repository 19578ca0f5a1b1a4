"""Edge relationship networks: learned features for adjacent vertex pairs.

An ERN embeds each vertex vector as a short token sequence with a strided
1-D convolution, lets each sequence attend to the other (one head each way),
mixes the two attended sequences with a small self-attention, and projects
the result back to the vertex dimension.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

EDGE_MODES = ("binary", "single_ern", "multi_ern")
SHARED_KEY = "shared"


class EdgeEncodingError(ValueError):
    pass


def _xavier(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class CrossAttention(nn.Module):
    """Single head: ``query_seq`` attends over ``key_seq``."""

    def __init__(self, channels: int):
        super().__init__()
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.scale = 1.0 / math.sqrt(channels)

    def forward(self, query_seq, key_seq):
        att = torch.softmax(self.q(query_seq) @ self.k(key_seq).transpose(-1, -2) * self.scale, dim=-1)
        return att @ self.v(key_seq)


class SelfAttention(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise EdgeEncodingError(f"{channels} channels do not split into {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(channels, 3 * channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x):
        n, t, c = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(n, t, 3, h, c // h).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(c // h), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(n, t, c)
        return self.out(y)


class ERN(nn.Module):
    def __init__(self, dim: int, channels: int = 4, heads: int = 2, kernel_extent: int = 3):
        super().__init__()
        if dim < kernel_extent:
            raise EdgeEncodingError(f"vertex dim {dim} is shorter than the kernel extent {kernel_extent}")
        self.dim = dim
        self.tokens = (dim - kernel_extent) // kernel_extent + 1
        self.conv_a = nn.Conv1d(1, channels, kernel_extent, stride=kernel_extent)
        self.conv_b = nn.Conv1d(1, channels, kernel_extent, stride=kernel_extent)
        self.b_to_a = CrossAttention(channels)
        self.a_to_b = CrossAttention(channels)
        self.mix = SelfAttention(channels, heads)
        self.proj = nn.Linear(2 * self.tokens * channels, dim)
        _xavier(self)

    def forward(self, v_a: torch.Tensor, v_b: torch.Tensor) -> torch.Tensor:
        """``v_a``, ``v_b``: (N, dim) -> (N, dim)."""
        if v_a.shape[-1] != self.dim or v_b.shape[-1] != self.dim:
            raise EdgeEncodingError(f"ERN expects dim {self.dim}, got {v_a.shape[-1]} and {v_b.shape[-1]}")
        f_a = self.conv_a(v_a.unsqueeze(1)).transpose(1, 2)
        f_b = self.conv_b(v_b.unsqueeze(1)).transpose(1, 2)
        r_a = self.b_to_a(f_b, f_a)
        r_b = self.a_to_b(f_a, f_b)
        x = torch.cat([r_a, r_b], dim=1)
        x = x + self.mix(x)
        return self.proj(x.flatten(1))


def ern_forward(v_a, v_b, ern: ERN) -> torch.Tensor:
    single = v_a.dim() == 1
    out = ern(v_a.reshape(1, -1) if single else v_a, v_b.reshape(1, -1) if single else v_b)
    return out[0] if single else out


class ERNBank(nn.Module):
    """ERNs keyed by ``module|cell kind|pair position`` (or ``module|boundary``)."""

    def __init__(self, keys, dim: int, mode: str = "multi_ern", channels: int = 4, heads: int = 2, kernel_extent: int = 3):
        super().__init__()
        if mode not in EDGE_MODES:
            raise EdgeEncodingError(f"edge mode must be one of {EDGE_MODES}, got {mode!r}")
        self.mode = mode
        self.dim = dim
        if mode == "multi_ern":
            names = sorted(set(keys))
        elif mode == "single_ern":
            names = [SHARED_KEY]
        else:
            names = []
        self.erns = nn.ModuleDict({n: ERN(dim, channels, heads, kernel_extent) for n in names})

    def ern_for(self, key: str) -> ERN:
        if self.mode == "single_ern":
            return self.erns[SHARED_KEY]
        if key not in self.erns:
            raise EdgeEncodingError(f"no ERN for pair position {key!r}")
        return self.erns[key]


def encode_edges(h: torch.Tensor, adjacency, keys: list[str], bank: ERNBank) -> torch.Tensor:
    """Edge features for every adjacency pair of a batch of same-census graphs.

    ``h``: (G, V, d) vertex features; ``adjacency``: P pairs (u < v);
    returns (G, P, d). The reverse arc reuses the same feature.
    """
    g, _, d = h.shape
    p = len(keys)
    if bank.mode == "binary":
        return h.new_ones(g, p, d)
    out = h.new_zeros(g, p, d)
    if p == 0:
        return out
    adj = torch.as_tensor(adjacency, dtype=torch.long).reshape(-1, 2)
    groups: dict[str, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(SHARED_KEY if bank.mode == "single_ern" else k, []).append(i)
    for k, idx in groups.items():
        ern = bank.ern_for(k)
        sel = torch.tensor(idx)
        u, v = adj[sel, 0], adj[sel, 1]
        feats = ern(h[:, u].reshape(-1, d), h[:, v].reshape(-1, d)).reshape(g, len(idx), d)
        out = out.index_copy(1, sel, feats)
    return out


def encode_all_edges(graph, vertex_features: torch.Tensor, bank: ERNBank) -> torch.Tensor:
    """Single-graph convenience wrapper: (V, d) -> (P, d)."""
    return encode_edges(vertex_features.unsqueeze(0), graph.adjacency, graph.pair_keys, bank)[0]
