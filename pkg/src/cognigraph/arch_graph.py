"""Cognition graphs: one vertex per directed CNN edge of a searched network.

Vertices carry the edge's raw operation parameters and a fixed-size summary
of its convolution kernels; two vertices are adjacent when their edges share
a CNN node. Variable-depth networks are aligned to a common topology either
by identity-cell padding (encoding only) or by fixed-depth distillation.
"""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, atomic_write_text, load_checkpoint
from .search_space import (
    MODULES,
    OP_INDEX,
    OP_NAMES,
    OPERATIONS,
    UNWEIGHTED_OPS,
    WEIGHTED_OPS,
    CognitiveNet,
    ConfigurationError,
    NetConfig,
    assemble_network,
)

GRAPH_VERSION = 1
LW_MODES = ("top5", "hist")
HIST_BINS = 10
TOP_K = 5
ORDERING_SPEC = "module(visual,audio,fusion,decoder) > block > cell > edge(i,j) lexicographic"
IDENTITY = OP_INDEX["identity"]


class GraphError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Layer-weight summaries
# ---------------------------------------------------------------------------


def _kernels(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim < 1 or w.size == 0:
        raise GraphError("operation has no weights")
    return w.reshape(-1, w.shape[-1])


def extract_lw_top5(weights) -> np.ndarray:
    """Values of the 5 kernels with the largest L1 norm, in descending-L1
    order (ties by kernel index), zero-padded to ``5 * kernel_extent``."""
    if weights is None:
        raise GraphError("weightless operation has no layer weights")
    k = _kernels(weights)
    order = np.argsort(-np.abs(k).sum(axis=1), kind="stable")[:TOP_K]
    out = np.zeros((TOP_K, k.shape[1]))
    out[: len(order)] = k[order]
    return out.reshape(-1)


def extract_lw_hist(weights, bins: int = HIST_BINS) -> np.ndarray:
    """Per kernel position, a ``bins``-bin frequency histogram over all
    kernels, on the symmetric range given by the layer's max |w|."""
    if weights is None:
        raise GraphError("weightless operation has no layer weights")
    if bins < 2:
        raise GraphError("histogram needs at least 2 bins")
    k = _kernels(weights)
    n, extent = k.shape
    m = float(np.abs(k).max())
    hist = np.zeros((extent, bins))
    if m == 0.0:
        hist[:, bins // 2] = 1.0
        return hist.reshape(-1)
    idx = np.clip(np.floor((k + m) / (2 * m) * bins).astype(np.int64), 0, bins - 1)
    for p in range(extent):
        hist[p] = np.bincount(idx[:, p], minlength=bins) / n
    return hist.reshape(-1)


def lw_dim(mode: str) -> int:
    """Length of the concatenated summary over the weighted operations."""
    extents = [OPERATIONS[i].kernel_extent for i in WEIGHTED_OPS]
    if mode == "top5":
        return TOP_K * sum(extents)
    if mode == "hist":
        return HIST_BINS * sum(extents)
    raise GraphError(f"unknown lw mode {mode!r}")


def lw_slices(mode: str) -> list[slice]:
    """Slice of the summary owned by each weighted op, canonical op order."""
    per = TOP_K if mode == "top5" else HIST_BINS
    out, start = [], 0
    for i in WEIGHTED_OPS:
        n = per * OPERATIONS[i].kernel_extent
        out.append(slice(start, start + n))
        start += n
    return out


def summarize_edge(weights: dict, mode: str) -> np.ndarray:
    """Concatenate the per-op summaries; ops absent from the edge give zeros."""
    parts = []
    for i, sl in zip(WEIGHTED_OPS, lw_slices(mode)):
        w = weights.get(OP_NAMES[i])
        if w is None:
            parts.append(np.zeros(sl.stop - sl.start))
        elif mode == "top5":
            parts.append(extract_lw_top5(w))
        else:
            parts.append(extract_lw_hist(w))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Graph types
# ---------------------------------------------------------------------------


@dataclass
class VertexRecord:
    module: str
    block: str
    block_kind: str
    cell: int
    edge: tuple[int, int]
    edge_kind: str
    op_alphas: np.ndarray
    lw: np.ndarray

    @property
    def weighted_alphas(self) -> np.ndarray:
        return self.op_alphas[list(WEIGHTED_OPS)]

    @property
    def unweighted_alphas(self) -> np.ndarray:
        return self.op_alphas[list(UNWEIGHTED_OPS)]

    def to_dict(self) -> dict:
        return {
            "module": self.module,
            "block": self.block,
            "block_kind": self.block_kind,
            "cell": self.cell,
            "edge": list(self.edge),
            "edge_kind": self.edge_kind,
            "op_alphas": [float(a) for a in self.op_alphas],
            "lw": [float(a) for a in self.lw],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VertexRecord":
        return cls(
            d["module"],
            d["block"],
            d["block_kind"],
            int(d["cell"]),
            (int(d["edge"][0]), int(d["edge"][1])),
            d["edge_kind"],
            np.asarray(d["op_alphas"], dtype=np.float64),
            np.asarray(d["lw"], dtype=np.float64),
        )


@dataclass
class CognitionGraph:
    subject_id: str
    lw_mode: str
    heterogeneity_tag: str
    vertices: list[VertexRecord]
    adjacency: list[tuple[int, int]]
    pair_keys: list[str]
    meta: dict = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def census(self) -> tuple:
        """Structure only: vertex tags and adjacency, no weights."""
        tags = tuple((v.module, v.block, v.block_kind, v.cell, v.edge, v.edge_kind) for v in self.vertices)
        return tags, tuple(self.adjacency), tuple(self.pair_keys)

    def arcs(self) -> list[tuple[int, int]]:
        """Both directions of every adjacency pair."""
        return [(u, v) for u, v in self.adjacency] + [(v, u) for u, v in self.adjacency]

    def to_dict(self) -> dict:
        return {
            "version": GRAPH_VERSION,
            "subject_id": self.subject_id,
            "lw_mode": self.lw_mode,
            "heterogeneity_tag": self.heterogeneity_tag,
            "ordering_spec": ORDERING_SPEC,
            "vertices": [v.to_dict() for v in self.vertices],
            "adjacency": [list(p) for p in self.adjacency],
            "pair_keys": list(self.pair_keys),
            "meta": self.meta,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path: str | Path) -> Path:
        return atomic_write_text(path, self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> "CognitionGraph":
        if d.get("version") != GRAPH_VERSION:
            raise GraphError(f"unsupported graph version {d.get('version')}")
        return cls(
            d["subject_id"],
            d["lw_mode"],
            d["heterogeneity_tag"],
            [VertexRecord.from_dict(v) for v in d["vertices"]],
            [(int(a), int(b)) for a, b in d["adjacency"]],
            list(d["pair_keys"]),
            dict(d.get("meta", {})),
        )


def load_graph(path: str | Path) -> CognitionGraph:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise GraphError(f"cannot read graph {path}: {exc}") from exc
    return CognitionGraph.from_dict(d)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def cell_pairs(edges: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Index pairs of edges sharing at least one endpoint node."""
    return [(a, b) for a, b in combinations(range(len(edges)), 2) if set(edges[a]) & set(edges[b])]


def boundary_pairs(prev_edges, prev2_edges, cur_edges):
    """Cross-cell adjacencies inside a block. Cell c reads the outputs of
    cells c-1 and c-2 as its nodes 2 and 1; the output is represented by
    the last intermediate node of the earlier cell."""
    out = []
    for earlier, node in ((prev2_edges, 1), (prev_edges, 2)):
        if earlier is None:
            continue
        last = max(j for _, j in earlier)
        into = [a for a, (_, j) in enumerate(earlier) if j == last]
        out_of = [b for b, (i, _) in enumerate(cur_edges) if i == node]
        out += [(a, b) for a in into for b in out_of]
    return out


def _module_of(block_name: str) -> str:
    return block_name.split(".", 1)[0]


def _edge_alphas(net: CognitiveNet, block, c: int, cell) -> np.ndarray:
    a = net.block_alphas(block)[c].detach().cpu().double().numpy()
    mask = cell.mask.cpu().numpy()
    return np.where(mask, a, 0.0)


def graph_from_network(net: CognitiveNet, lw_mode: str = "top5", subject_id: str = "", meta: dict | None = None) -> CognitionGraph:
    if lw_mode not in LW_MODES:
        raise GraphError(f"unknown lw mode {lw_mode!r}")
    vertices: list[VertexRecord] = []
    adjacency: list[tuple[int, int]] = []
    keys: list[str] = []
    blocks = sorted(net.blocks(), key=lambda b: (MODULES.index(_module_of(b.name)), b.name))
    full_depth = True
    for block in blocks:
        module = _module_of(block.name)
        depth = block.active_depth
        full_depth &= depth == block.capacity
        starts: list[int] = []
        for c in range(depth):
            cell = block.cells[c]
            alphas = _edge_alphas(net, block, c, cell)
            base = len(vertices)
            starts.append(base)
            order = sorted(range(len(cell.edge_list)), key=lambda e: cell.edge_list[e])
            for e in order:
                weights = {n: p.detach().cpu().double().numpy() for n, p in cell.edges[e].weights.items()}
                vertices.append(
                    VertexRecord(
                        module, block.name, block.kind, c + 1, cell.edge_list[e], cell.edge_kinds[e],
                        alphas[e].copy(), summarize_edge(weights, lw_mode),
                    )
                )
            local = [cell.edge_list[e] for e in order]
            for pos, (a, b) in enumerate(cell_pairs(local)):
                adjacency.append((base + a, base + b))
                keys.append(f"{module}|{block.kind}|{pos}")
            if c >= 1:
                prev = [v.edge for v in vertices[starts[c - 1] : base]]
                prev2 = [v.edge for v in vertices[starts[c - 2] : starts[c - 1]]] if c >= 2 else None
                for a, b in boundary_pairs(prev, None, local):
                    adjacency.append((starts[c - 1] + a, base + b))
                    keys.append(f"{module}|boundary")
                if prev2 is not None:
                    for a, b in boundary_pairs(None, prev2, local):
                        adjacency.append((starts[c - 2] + a, base + b))
                        keys.append(f"{module}|boundary")
    tag = "isomorphic" if full_depth else "heterogeneous"
    return CognitionGraph(subject_id, lw_mode, tag, vertices, adjacency, keys, dict(meta or {}))


def build_graph(checkpoint: Checkpoint | str | Path, lw_mode: str = "top5", subject_id: str | None = None) -> CognitionGraph:
    """Encode a checkpoint as a cognition graph (deterministic)."""
    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    net = ckpt.to_network(allow_encoding_only=True)
    sid = subject_id if subject_id is not None else str(ckpt.meta.get("subject_id", ""))
    meta = {"alignment": ckpt.meta.get("alignment", "none")}
    return graph_from_network(net, lw_mode, sid, meta)


def vertex_count(n_nodes: int, n_cells: int = 1) -> int:
    return n_cells * ((n_nodes + 2) * (n_nodes + 1) // 2 - 1)


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


def _to_ip(ckpt: Checkpoint) -> Checkpoint:
    """Give every cell its own operation parameters (copies of the shared ones)."""
    if ckpt.net_config.get("param_mode", "ip") == "ip":
        return ckpt
    shared = ckpt.to_network(allow_encoding_only=True)
    cfg = NetConfig.from_dict({**ckpt.net_config, "param_mode": "ip"})
    net = assemble_network(cfg).to(next(shared.parameters()).dtype)
    sd = {k: v for k, v in shared.state_dict().items() if not k.startswith("alphas.")}
    for block in shared.blocks():
        for c in range(block.capacity):
            sd[f"alphas.{net.alpha_key(block.name, c)}"] = shared.block_alphas(block)[c].detach().clone()
    net.load_state_dict(sd)
    net.set_active_depths(shared.active_depths())
    return Checkpoint.from_network(net, **ckpt.meta)


def align_block_max(ckpt: Checkpoint) -> Checkpoint:
    """Pad every regular block to full depth with identity cells.

    Padded cells get alpha 1 on identity, 0 elsewhere, and zero kernels. The
    result describes a topology for encoding; it is flagged so that it is
    never re-executed as a network.
    """
    net_cfg = ckpt.net_config
    depths = dict(ckpt.active_depths)
    cap = int(net_cfg["n_reg"])
    if any(d > cap for d in depths.values()):
        raise ConfigurationError("active depth exceeds block capacity")
    if all(d == cap for d in depths.values()):
        return ckpt
    ckpt = _to_ip(ckpt)
    state = {k: v.copy() for k, v in ckpt.state.items()}
    net = assemble_network(NetConfig.from_dict(ckpt.net_config))
    for name, d in depths.items():
        block = net.block(name)
        prefix = _state_prefix(net, block)
        for c in range(d, block.capacity):
            key = f"alphas.{net.alpha_key(name, c)}"
            pad = np.zeros_like(state[key])
            pad[:, IDENTITY] = 1.0
            state[key] = pad
            cell_prefix = f"{prefix}.cells.{c}."
            for k in state:
                if k.startswith(cell_prefix) and ".weights." in k:
                    state[k] = np.zeros_like(state[k])
        depths[name] = block.capacity
    meta = dict(ckpt.meta, encoding_only=True, alignment="block_maximization")
    return Checkpoint(copy.deepcopy(ckpt.net_config), state, depths, meta)


def _state_prefix(net: CognitiveNet, block) -> str:
    for name, mod in net.named_modules():
        if mod is block:
            return name
    raise KeyError(block.name)


def _student_from(teacher: CognitiveNet, target_depth: int) -> CognitiveNet:
    cfg = NetConfig.from_dict({**teacher.cfg.to_dict(), "n_reg": target_depth})
    student = assemble_network(cfg).to(next(teacher.parameters()).dtype)
    t_sd, s_sd = teacher.state_dict(), student.state_dict()
    init = {}
    for k, v in s_sd.items():
        if k in t_sd and t_sd[k].shape == v.shape:
            init[k] = t_sd[k].clone()
        else:
            init[k] = v
    # a shallower teacher block has no cell to copy; reuse its last active cell
    for block in student.blocks():
        if block.kind != "regular":
            continue
        tb = teacher.block(block.name)
        depth = max(1, tb.active_depth)
        sp, tp = _state_prefix(student, block), _state_prefix(teacher, tb)
        for c in range(block.capacity):
            src = min(c, depth - 1)
            for k in s_sd:
                if k.startswith(f"{sp}.cells.{c}."):
                    tk = f"{tp}.cells.{src}." + k[len(f"{sp}.cells.{c}.") :]
                    init[k] = t_sd[tk].clone()
            if teacher.cfg.param_mode == "ip":
                init[f"alphas.{student.alpha_key(block.name, c)}"] = teacher.block_alphas(tb)[src].detach().clone()
    student.load_state_dict(init)
    return student


@dataclass
class DistillConfig:
    epochs: int = 300
    batch_size: int = 60
    lr_alpha: float = 0.05
    lr_weight: float = 0.001
    feature_weight: float = 1.0
    bound: float = 0.10
    check_every: int = 5
    seed: int = 0


def align_block_distill(
    ckpt: Checkpoint,
    target_depth: int,
    windows: list,
    mode: str = "distill",
    cfg: DistillConfig | None = None,
    eval_windows: list | None = None,
) -> Checkpoint:
    """Re-express a subject's network with every regular block at ``target_depth``.

    ``distill`` trains a fixed-depth student on the adaptive loss plus a
    per-block regression onto the teacher's block outputs, stopping once its
    adaptive loss is within ``bound`` of the teacher's. ``fixed_depth_search``
    simply re-runs the search with the depth pinned.
    """
    from .nas_engine import (
        AdaptiveLossConfig,
        SearchConfig,
        adaptive_loss,
        evaluate_loss,
        search_subject,
        stack_windows,
    )

    cfg = cfg or DistillConfig()
    if target_depth < 1:
        raise ConfigurationError("target depth must be >= 1")
    teacher = ckpt.to_network()
    dtype = next(teacher.parameters()).dtype
    loss_cfg = AdaptiveLossConfig()
    eval_windows = eval_windows or windows
    if mode == "fixed_depth_search":
        net_cfg = NetConfig.from_dict({**ckpt.net_config, "n_reg": target_depth, "seed": cfg.seed})
        scfg = SearchConfig(
            epochs=cfg.epochs, batch_size=cfg.batch_size, lr_alpha=cfg.lr_alpha, lr_weight=cfg.lr_weight,
            depth_search=False, seed=cfg.seed,
        )
        student, _, _, _ = search_subject(windows, net_cfg, scfg, dtype)
        meta = dict(ckpt.meta, alignment="fixed_depth_search", target_depth=target_depth)
        return Checkpoint.from_network(student, **meta)
    if mode != "distill":
        raise ConfigurationError(f"unknown distillation mode {mode!r}")

    student = _student_from(teacher, target_depth)
    teacher.eval()
    train = stack_windows(windows, dtype)
    held = stack_windows(eval_windows, dtype)
    target, _ = evaluate_loss(teacher, held, loss_cfg)
    with torch.no_grad():
        t_feats: dict = {}
        teacher(train.audio, train.landmarks, train.categories, features=t_feats)
    opt_a = torch.optim.Adam(student.alpha_parameters(), lr=cfg.lr_alpha)
    opt_w = torch.optim.Adam(student.weight_parameters(), lr=cfg.lr_weight)
    rng = np.random.default_rng(cfg.seed)
    best_loss, best_state = evaluate_loss(student, held, loss_cfg)[0], copy.deepcopy(student.state_dict())
    epoch = 0
    while best_loss > (1 + cfg.bound) * target and epoch < cfg.epochs:
        order = rng.permutation(len(train))
        for s in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[s : s + cfg.batch_size])
            feats: dict = {}
            pred = student(
                None if train.audio is None else train.audio[idx],
                train.landmarks[idx],
                None if train.categories is None else train.categories[idx],
                features=feats,
            )
            end, _ = adaptive_loss(pred, train.gt[idx], loss_cfg)
            reg = sum(torch.mean((feats[k] - t_feats[k][idx]) ** 2) for k in feats if k in t_feats)
            loss = end.mean() + cfg.feature_weight * reg
            opt_a.zero_grad()
            opt_w.zero_grad()
            loss.backward()
            opt_w.step()
            opt_a.step()
        epoch += 1
        if epoch % cfg.check_every == 0 or epoch == cfg.epochs:
            cur, _ = evaluate_loss(student, held, loss_cfg)
            if cur < best_loss:
                best_loss, best_state = cur, copy.deepcopy(student.state_dict())
    student.load_state_dict(best_state)
    conforming = best_loss <= (1 + cfg.bound) * target
    if not conforming:
        warnings.warn(
            f"distilled loss {best_loss:.4g} not within {cfg.bound:.0%} of original {target:.4g}",
            RuntimeWarning,
            stacklevel=2,
        )
    meta = dict(
        ckpt.meta,
        alignment="block_distillation",
        target_depth=target_depth,
        distill_loss=float(best_loss),
        teacher_loss=float(target),
        conforming=bool(conforming),
    )
    return Checkpoint.from_network(student, **meta)
