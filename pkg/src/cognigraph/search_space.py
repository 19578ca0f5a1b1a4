"""Searchable multi-modal encoder / fusion / memory / decoder network.

Signals are 1-D temporal maps ``B x C x T``: landmarks enter as 136
channels, log-mel audio as 64. Every searchable edge mixes the candidate
operations with softmax weights over its valid operation parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from itertools import combinations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .signal_ingest import N_CATEGORIES, N_LANDMARKS, N_MELS, MeanFaceTemplate


class ConfigurationError(ValueError):
    pass


class NumericalFailure(FloatingPointError):
    def __init__(self, block: str):
        super().__init__(f"non-finite values produced by block {block!r}")
        self.block = block


@dataclass(frozen=True)
class OperationSpec:
    name: str
    kernel_extent: int | None
    has_weights: bool
    valid_block_kinds: frozenset


OPERATIONS: tuple[OperationSpec, ...] = (
    OperationSpec("max_pool_3", 3, False, frozenset({"regular", "down"})),
    OperationSpec("avg_pool_3", 3, False, frozenset({"regular", "down"})),
    OperationSpec("sep_conv_3", 3, True, frozenset({"regular", "down"})),
    OperationSpec("sep_conv_5", 5, True, frozenset({"regular", "down"})),
    OperationSpec("dil_conv_3", 3, True, frozenset({"regular", "down"})),
    OperationSpec("dil_conv_5", 5, True, frozenset({"regular", "down"})),
    OperationSpec("trans_conv_3", 3, True, frozenset({"regular", "up"})),
    OperationSpec("up_linear", None, False, frozenset({"up"})),
    OperationSpec("up_nearest", None, False, frozenset({"up"})),
    OperationSpec("identity", None, False, frozenset({"regular"})),
)
OP_NAMES = tuple(op.name for op in OPERATIONS)
OP_INDEX = {name: i for i, name in enumerate(OP_NAMES)}
N_OPS = len(OPERATIONS)
WEIGHTED_OPS = tuple(i for i, op in enumerate(OPERATIONS) if op.has_weights)
UNWEIGHTED_OPS = tuple(i for i, op in enumerate(OPERATIONS) if not op.has_weights)
EDGE_KINDS = ("regular", "down", "up")
CELL_KINDS = ("regular", "down", "up")
MODULES = ("visual", "audio", "fusion", "decoder")
MODALITIES = ("audio_face", "face", "face_sentence")


def default_valid_ops() -> dict[str, tuple[str, ...]]:
    return {k: tuple(op.name for op in OPERATIONS if k in op.valid_block_kinds) for k in EDGE_KINDS}


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def apply_op(name: str, x: torch.Tensor, weight: torch.Tensor | None, edge_kind: str) -> torch.Tensor:
    stride = 2 if edge_kind == "down" else 1
    if name == "max_pool_3":
        return F.max_pool1d(x, 3, stride=stride, padding=1)
    if name == "avg_pool_3":
        return F.avg_pool1d(x, 3, stride=stride, padding=1, count_include_pad=False)
    if name in ("sep_conv_3", "sep_conv_5"):
        k = weight.shape[-1]
        return F.conv1d(F.relu(x), weight, stride=stride, padding=k // 2)
    if name in ("dil_conv_3", "dil_conv_5"):
        k = weight.shape[-1]
        return F.conv1d(F.relu(x), weight, stride=stride, padding=k - 1, dilation=2)
    if name == "trans_conv_3":
        s = 2 if edge_kind == "up" else 1
        return F.conv_transpose1d(F.relu(x), weight, stride=s, padding=1, output_padding=s - 1)
    if name == "up_linear":
        return F.interpolate(x, scale_factor=2, mode="linear", align_corners=False)
    if name == "up_nearest":
        return F.interpolate(x, scale_factor=2, mode="nearest")
    if name == "identity":
        return x
    raise KeyError(name)


def mixing_weights(alphas: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the valid entries of ``alphas``; invalid entries get 0."""
    if not bool(mask.any()):
        raise ConfigurationError("every operation on the edge is masked invalid")
    return torch.softmax(alphas.masked_fill(~mask, float("-inf")), dim=-1)


class MixedEdge(nn.Module):
    """One directed edge: the bundle of candidate operations between two nodes.

    The operation parameters live in the owning network (so they can be
    shared across cells); the edge owns the kernels of its weighted ops.
    """

    def __init__(self, kind: str, width: int, valid: tuple[str, ...]):
        super().__init__()
        if kind not in EDGE_KINDS:
            raise ConfigurationError(f"unknown edge kind {kind!r}")
        self.kind = kind
        self.valid = tuple(n for n in OP_NAMES if n in valid)
        if not self.valid:
            raise ConfigurationError(f"no valid operation on {kind} edge")
        self.register_buffer(
            "mask", torch.tensor([n in self.valid for n in OP_NAMES], dtype=torch.bool), persistent=False
        )
        self.weights = nn.ParameterDict()
        for name in self.valid:
            spec = OPERATIONS[OP_INDEX[name]]
            if spec.has_weights:
                shape = (width, width, spec.kernel_extent)
                w = torch.empty(shape)
                nn.init.kaiming_uniform_(w, a=math.sqrt(5))
                self.weights[name] = nn.Parameter(w)

    def forward(self, x: torch.Tensor, alphas: torch.Tensor) -> torch.Tensor:
        mix = mixing_weights(alphas, self.mask)
        out = 0
        for name in self.valid:
            out = out + mix[OP_INDEX[name]] * apply_op(name, x, self.weights[name] if name in self.weights else None, self.kind)
        return out


def mixed_edge_forward(node_feature: torch.Tensor, edge: MixedEdge, alphas: torch.Tensor) -> torch.Tensor:
    return edge(node_feature, alphas)


# ---------------------------------------------------------------------------
# Cells and blocks
# ---------------------------------------------------------------------------


def cell_edges(n_nodes: int) -> list[tuple[int, int]]:
    """Directed edges (i, j), 1-based, nodes 1 and 2 being the cell inputs."""
    return [(i, j) for i, j in combinations(range(1, n_nodes + 3), 2) if (i, j) != (1, 2)]


class Cell(nn.Module):
    def __init__(self, kind: str, width: int, n_nodes: int, valid_ops: dict):
        super().__init__()
        if kind not in CELL_KINDS:
            raise ConfigurationError(f"unknown cell kind {kind!r}")
        self.kind = kind
        self.width = width
        self.n_nodes = n_nodes
        self.edge_list = cell_edges(n_nodes)
        self.edge_kinds = [kind if i <= 2 else "regular" for i, _ in self.edge_list]
        self.edges = nn.ModuleList(
            MixedEdge(ek, width, valid_ops[ek]) for ek in self.edge_kinds
        )
        self.out_proj = nn.Conv1d(n_nodes * width, width, 1, bias=False)
        self.contrib_proj = nn.Conv1d(width, width, 1, bias=False)

    @property
    def mask(self) -> torch.Tensor:
        return torch.stack([e.mask for e in self.edges])

    def nodes(self, prev_prev, prev, alphas):
        if prev_prev.shape != prev.shape:
            raise ValueError(f"cell inputs disagree in shape: {tuple(prev_prev.shape)} vs {tuple(prev.shape)}")
        nodes = [prev_prev, prev]
        for j in range(3, self.n_nodes + 3):
            acc = 0
            for e, (i, jj) in enumerate(self.edge_list):
                if jj == j:
                    acc = acc + self.edges[e](nodes[i - 1], alphas[e])
            nodes.append(acc)
        return nodes

    def forward(self, prev_prev, prev, alphas):
        inter = self.nodes(prev_prev, prev, alphas)[2:]
        nxt = self.out_proj(torch.cat(inter, dim=1))
        return nxt, self.contrib_proj(nxt)


def cell_forward(prev_prev, prev, cell: Cell, alphas):
    return cell(prev_prev, prev, alphas)


class CellBlock(nn.Module):
    """A linear stack of cells; the block output sums the active cells'
    contributions. Down/up blocks hold a single reduction/expansion cell
    behind a 1x1 input projection."""

    def __init__(self, name: str, kind: str, c_in: int, width: int, n_cells: int, n_nodes: int, valid_ops: dict):
        super().__init__()
        self.name = name
        self.kind = kind
        self.capacity = n_cells
        self.active_depth = n_cells
        self.in_proj = nn.Conv1d(c_in, width, 1, bias=False) if (kind != "regular" or c_in != width) else None
        self.cells = nn.ModuleList(Cell(kind, width, n_nodes, valid_ops) for _ in range(n_cells))

    @property
    def searchable(self) -> bool:
        return self.kind == "regular" and self.capacity > 1

    def forward(self, x, alphas: list, x_prev=None, depth: int | None = None, features: dict | None = None):
        depth = self.active_depth if depth is None else depth
        if self.in_proj is not None:
            x = self.in_proj(x)
        s0, s1 = (x if x_prev is None else x_prev), x
        out = None
        for c in range(depth):
            nxt, contrib = self.cells[c](s0, s1, alphas[c])
            out = contrib if out is None else out + contrib
            s0, s1 = s1, nxt
        if out is None:
            out = torch.zeros_like(x)
        if features is not None:
            features[self.name] = out
        return out


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class NetConfig:
    widths: tuple[int, int, int] = (64, 128, 256)
    n_nodes: int = 4
    n_reg: int = 3
    param_mode: str = "ip"
    modality: str = "audio_face"
    lstm_layers: int = 3
    face_scale: float = 0.02
    valid_ops: dict = field(default_factory=default_valid_ops)
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.valid_ops = {k: tuple(v) for k, v in self.valid_ops.items()}

    def validate(self):
        errs = []
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            errs.append("widths must be three positive integers")
        elif any(b % a for a, b in zip(self.widths, self.widths[1:])):
            errs.append(f"each down-block width must divide the next: {self.widths}")
        if self.n_nodes < 1:
            errs.append("n_nodes must be >= 1")
        if self.n_reg < 1:
            errs.append("n_reg must be >= 1")
        if not self.face_scale > 0:
            errs.append("face_scale must be positive")
        if self.param_mode not in ("ip", "ps"):
            errs.append(f"param_mode must be 'ip' or 'ps', got {self.param_mode!r}")
        if self.modality not in MODALITIES:
            errs.append(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        for k in EDGE_KINDS:
            bad = [n for n in self.valid_ops.get(k, ()) if n not in OP_INDEX]
            if bad:
                errs.append(f"unknown operation(s) {bad} for {k} edges")
            if not self.valid_ops.get(k):
                errs.append(f"{k} edges need at least one valid operation")
        if errs:
            raise ConfigurationError("; ".join(errs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["valid_ops"] = {k: list(v) for k, v in self.valid_ops.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


class CognitiveNet(nn.Module):
    """Speaker audio + face -> listener face (80 x 68 x 2)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w1, w2, w3 = cfg.widths
        v = cfg.valid_ops
        nn_, nr = cfg.n_nodes, cfg.n_reg
        self._check_finite = True
        self.modules_used = ["visual"] + (["audio", "fusion"] if cfg.modality == "audio_face" else []) + ["decoder"]

        def encoder(name, c_in):
            return nn.ModuleDict(
                {
                    "stem": nn.Conv1d(c_in, w1, 3, padding=1, bias=False),
                    "blocks": nn.ModuleList(
                        [
                            CellBlock(f"{name}.b1", "down", w1, w1, 1, nn_, v),
                            CellBlock(f"{name}.b2", "down", w1, w2, 1, nn_, v),
                            CellBlock(f"{name}.b3", "down", w2, w3, 1, nn_, v),
                            CellBlock(f"{name}.b4", "regular", w3, w3, nr, nn_, v),
                            CellBlock(f"{name}.b5", "regular", w3, w3, nr, nn_, v),
                        ]
                    ),
                }
            )

        enc_widths = [w1, w2, w3, w3, w3]
        self.visual = encoder("visual", 2 * N_LANDMARKS)
        if cfg.modality == "audio_face":
            self.audio = encoder("audio", N_MELS)
            self.fusion = nn.ModuleDict(
                {
                    "in_a": nn.ModuleList(nn.Conv1d(2 * w, w, 1, bias=False) for w in enc_widths),
                    "in_b": nn.ModuleList(
                        [nn.Identity(), nn.Conv1d(enc_widths[0], enc_widths[1], 1, bias=False)]
                        + [nn.Conv1d(enc_widths[n - 1] + enc_widths[n - 2], enc_widths[n], 1, bias=False) for n in range(2, 5)]
                    ),
                    "blocks": nn.ModuleList(
                        CellBlock(f"fusion.b{n + 1}", "regular", w, w, 1 if n < 3 else nr, nn_, v)
                        for n, w in enumerate(enc_widths)
                    ),
                }
            )
        bottleneck_in = w3 * (3 if cfg.modality == "audio_face" else 1)
        if cfg.modality == "face_sentence":
            bottleneck_in += N_CATEGORIES
        self.bottleneck = nn.Conv1d(bottleneck_in, w3, 1)
        self.memory = nn.LSTM(w3, w3, num_layers=cfg.lstm_layers, batch_first=True)
        self.decoder = nn.ModuleList(
            [
                CellBlock("decoder.b1", "regular", w3, w3, nr, nn_, v),
                CellBlock("decoder.b2", "regular", w3, w3, nr, nn_, v),
                CellBlock("decoder.b3", "up", w3, w2, 1, nn_, v),
                CellBlock("decoder.b4", "up", w2, w1, 1, nn_, v),
                CellBlock("decoder.b5", "up", w1, w1, 1, nn_, v),
            ]
        )
        self.head = nn.Conv1d(w1, 2 * N_LANDMARKS, 1)
        template = torch.tensor(MeanFaceTemplate.default().points.reshape(-1), dtype=torch.float32)
        self.register_buffer("face_offset", template.clone())
        self.face_scale = cfg.face_scale

        # operation parameters: one tensor per cell (ip) or per cell kind (ps)
        self.alphas = nn.ParameterDict()
        self._alpha_keys: dict[str, list[str]] = {}
        for block in self.blocks():
            keys = []
            for c, cell in enumerate(block.cells):
                key = f"{block.name.replace('.', '_')}_c{c + 1}" if cfg.param_mode == "ip" else cell.kind
                if key not in self.alphas:
                    self.alphas[key] = nn.Parameter(torch.zeros(len(cell.edges), N_OPS))
                keys.append(key)
            self._alpha_keys[block.name] = keys

    # -- structure -------------------------------------------------------

    def blocks(self) -> list[CellBlock]:
        out = list(self.visual["blocks"])
        if self.cfg.modality == "audio_face":
            out += list(self.audio["blocks"]) + list(self.fusion["blocks"])
        return out + list(self.decoder)

    def block(self, name: str) -> CellBlock:
        for b in self.blocks():
            if b.name == name:
                return b
        raise KeyError(name)

    def searchable_blocks(self) -> list[CellBlock]:
        return [b for b in self.blocks() if b.searchable]

    def block_alphas(self, block: CellBlock) -> list[torch.Tensor]:
        return [self.alphas[k] for k in self._alpha_keys[block.name]]

    def alpha_key(self, block_name: str, cell_index: int) -> str:
        return self._alpha_keys[block_name][cell_index]

    def alpha_parameters(self) -> list[nn.Parameter]:
        return list(self.alphas.values())

    def weight_parameters(self) -> list[nn.Parameter]:
        ids = {id(p) for p in self.alpha_parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def active_depths(self) -> dict[str, int]:
        return {b.name: b.active_depth for b in self.searchable_blocks()}

    def set_active_depths(self, depths: dict[str, int]):
        for name, d in depths.items():
            b = self.block(name)
            if not 0 <= d <= b.capacity:
                raise ConfigurationError(f"depth {d} outside [0, {b.capacity}] for {name}")
            b.active_depth = int(d)

    def alpha_census(self) -> int:
        """Number of valid (trainable) operation parameters."""
        seen, total = set(), 0
        for b in self.blocks():
            for c, cell in enumerate(b.cells):
                key = self.alpha_key(b.name, c)
                if key in seen:
                    continue
                seen.add(key)
                total += int(cell.mask.sum())
        return total

    # -- forward ---------------------------------------------------------

    def _run_block(self, block, x, x_prev=None, depths=None, features=None):
        d = None if depths is None else depths.get(block.name)
        out = block(x, self.block_alphas(block), x_prev=x_prev, depth=d, features=features)
        if self._check_finite and not torch.isfinite(out).all():
            raise NumericalFailure(block.name)
        return out

    def _encode(self, enc, x, depths, features):
        x = F.relu(enc["stem"](x))
        outs = []
        for block in enc["blocks"]:
            x = self._run_block(block, x, depths=depths, features=features)
            outs.append(x)
        return outs

    def forward(
        self,
        audio: torch.Tensor | None,
        landmarks: torch.Tensor,
        categories: torch.Tensor | None = None,
        depths: dict[str, int] | None = None,
        features: dict | None = None,
        check_finite: bool = True,
    ) -> torch.Tensor:
        """``audio`` B x T x 64, ``landmarks`` B x T x 68 x 2 -> B x T x 68 x 2."""
        self._check_finite = check_finite
        b, t = landmarks.shape[:2]
        face = ((landmarks.reshape(b, t, -1) - self.face_offset) / self.face_scale).transpose(1, 2)
        vis = self._encode(self.visual, face, depths, features)
        parts = [vis[-1]]
        if self.cfg.modality == "audio_face":
            if audio is None:
                raise ValueError("audio_face modality needs an audio stream")
            aud = self._encode(self.audio, audio.transpose(1, 2), depths, features)
            fus = []
            for n, block in enumerate(self.fusion["blocks"]):
                a_in = self.fusion["in_a"][n](torch.cat([vis[n], aud[n]], dim=1))
                tn = a_in.shape[-1]
                if n == 0:
                    b_in = None
                else:
                    earlier = [F.adaptive_avg_pool1d(f, tn) for f in fus[max(0, n - 2) : n][::-1]]
                    b_in = self.fusion["in_b"][n](torch.cat(earlier, dim=1))
                fus.append(self._run_block(block, a_in, x_prev=b_in, depths=depths, features=features))
            parts += [aud[-1], fus[-1]]
        if self.cfg.modality == "face_sentence":
            if categories is None:
                raise ValueError("face_sentence modality needs sentence categories")
            parts.append(F.adaptive_avg_pool1d(categories.transpose(1, 2).to(face.dtype), parts[0].shape[-1]))
        z = self.bottleneck(torch.cat(parts, dim=1))
        z, _ = self.memory(z.transpose(1, 2))
        x = z.transpose(1, 2)
        for block in self.decoder:
            x = self._run_block(block, x, depths=depths, features=features)
        out = self.face_offset[:, None] + self.face_scale * self.head(x)
        if check_finite and not torch.isfinite(out).all():
            raise NumericalFailure("decoder.head")
        return out.transpose(1, 2).reshape(b, t, N_LANDMARKS, 2)


def assemble_network(cfg: NetConfig | None = None, **overrides) -> CognitiveNet:
    """Build and initialise a network; initialisation is seeded by ``cfg.seed``."""
    cfg = cfg or NetConfig(**overrides)
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return CognitiveNet(cfg)


def network_forward(net: CognitiveNet, audio, landmarks, categories=None) -> torch.Tensor:
    return net(audio, landmarks, categories)
