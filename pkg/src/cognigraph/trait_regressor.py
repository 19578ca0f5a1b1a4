"""Residual gated graph convolution regressor from cognition graphs to traits.

Also holds the evaluation metrics and subject-disjoint cross-validation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .arch_graph import CognitionGraph, lw_dim
from .edge_encoder import EDGE_MODES, ERNBank, encode_edges
from .search_space import N_OPS
from .signal_ingest import TRAIT_NAMES
from .vertex_encoder import VARIANTS, VEN, encode_vertices, feature_dim

N_TRAITS = 5


class UndefinedCorrelationError(ValueError):
    pass


class CensusMismatch(ValueError):
    pass


class RegressorDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def pcc(f, y) -> float:
    f = np.asarray(f, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if f.shape != y.shape or f.size < 2:
        raise ValueError("pcc needs two equal-length vectors of length >= 2")
    df, dy = f - f.mean(), y - y.mean()
    vf, vy = (df * df).sum(), (dy * dy).sum()
    if vf == 0.0 or vy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a zero-variance input")
    return float(np.clip((df * dy).sum() / np.sqrt(vf * vy), -1.0, 1.0))


def acc(f, y) -> float:
    f = np.asarray(f, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if f.shape != y.shape or f.size == 0:
        raise ValueError("acc needs two equal-length non-empty vectors")
    if ((f < 0) | (f > 1) | (y < 0) | (y > 1)).any():
        raise ValueError("acc is defined for values in [0, 1]")
    return float(1.0 - np.abs(f - y).mean())


def normalize_labels(labels: np.ndarray) -> np.ndarray:
    """Per-trait min-max scaling to [0, 1] over the dataset."""
    labels = np.asarray(labels, dtype=np.float64)
    lo, hi = labels.min(axis=0), labels.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (labels - lo) / span


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def layer_widths(d_in: int, variant: str) -> list[int]:
    """Output widths of the six graph convolution layers."""
    if variant == "op":
        return [d_in, 10, 10, 10, 5, 5]
    return [d_in] + [max(1, d_in // 2**k) for k in range(1, 6)]


class GatedGCNLayer(nn.Module):
    """h_i' = ReLU(A h_i + sum_j eta_ij * B h_j / (sum_j eta_ij + 1e-6)),
    eta_ij = sigmoid(C e_ij + D h_i + E h_j); residual when widths agree."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.A = nn.Linear(d_in, d_out)
        self.B = nn.Linear(d_in, d_out)
        self.C = nn.Linear(d_in, d_out)
        self.D = nn.Linear(d_in, d_out)
        self.E = nn.Linear(d_in, d_out)
        self.residual = d_in == d_out

    def forward(self, h, e, dst, src):
        """``h`` (G, V, d), ``e`` (G, arcs, d); arc k carries src[k] -> dst[k]."""
        e_hat = self.C(e) + self.D(h)[:, dst] + self.E(h)[:, src]
        eta = torch.sigmoid(e_hat)
        num = torch.zeros_like(self.A(h)).index_add(1, dst, eta * self.B(h)[:, src])
        den = torch.zeros_like(num).index_add(1, dst, eta)
        h_new = torch.relu(self.A(h) + num / (den + 1e-6))
        e_new = torch.relu(e_hat)
        if self.residual:
            h_new, e_new = h + h_new, e + e_new
        return h_new, e_new


@dataclass
class RegressorConfig:
    variant: str = "oplw_ven"
    lw_mode: str = "top5"
    edge_mode: str = "multi_ern"
    edge_channels: int = 4
    edge_heads: int = 2
    edge_kernel_extent: int = 3
    head_hidden: int = 64
    dropout: float = 0.3
    epochs: int = 500
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 0
    standardize: bool = True
    seed: int = 0

    def validate(self):
        errs = []
        if self.variant not in VARIANTS:
            errs.append(f"variant must be one of {VARIANTS}")
        if self.lw_mode not in ("top5", "hist"):
            errs.append("lw_mode must be 'top5' or 'hist'")
        if self.edge_mode not in EDGE_MODES:
            errs.append(f"edge_mode must be one of {EDGE_MODES}")
        if errs:
            raise ValueError("; ".join(errs))


@dataclass
class GraphSet:
    """Stacked raw records of graphs that share one census."""

    alphas: torch.Tensor
    lw: torch.Tensor
    adjacency: list
    keys: list

    @classmethod
    def from_graphs(cls, graphs: list[CognitionGraph], dtype=torch.float32) -> "GraphSet":
        a = np.stack([np.stack([v.op_alphas for v in g.vertices]) if g.vertices else np.zeros((0, N_OPS)) for g in graphs])
        s = np.stack([np.stack([v.lw for v in g.vertices]) if g.vertices else np.zeros((0, lw_dim(g.lw_mode))) for g in graphs])
        g0 = graphs[0]
        return cls(torch.as_tensor(a, dtype=dtype), torch.as_tensor(s, dtype=dtype), list(g0.adjacency), list(g0.pair_keys))

    def __len__(self):
        return self.alphas.shape[0]

    def subset(self, idx) -> "GraphSet":
        return GraphSet(self.alphas[idx], self.lw[idx], self.adjacency, self.keys)


class Standardizer(nn.Module):
    """Centre and scale raw records with statistics from the training graphs.

    Per vertex position when the census is shared, pooled over vertices
    otherwise. Zero-variance columns are only centred.
    """

    def __init__(self, a_mean, a_std, s_mean, s_std):
        super().__init__()
        self.register_buffer("a_mean", a_mean)
        self.register_buffer("a_std", a_std)
        self.register_buffer("s_mean", s_mean)
        self.register_buffer("s_std", s_std)

    @classmethod
    def fit(cls, sets: list[GraphSet], per_position: bool) -> "Standardizer":
        if per_position:
            a = torch.cat([s.alphas for s in sets])
            lw = torch.cat([s.lw for s in sets])
        else:
            a = torch.cat([s.alphas.reshape(-1, 1, s.alphas.shape[-1]) for s in sets])
            lw = torch.cat([s.lw.reshape(-1, 1, s.lw.shape[-1]) for s in sets])

        def stats(x):
            m, sd = x.mean(0), x.std(0, unbiased=False)
            return m, torch.where(sd > 1e-12, sd, torch.ones_like(sd))

        return cls(*stats(a), *stats(lw))

    @classmethod
    def identity(cls, s_dim: int) -> "Standardizer":
        return cls(torch.zeros(1, N_OPS), torch.ones(1, N_OPS), torch.zeros(1, s_dim), torch.ones(1, s_dim))

    def forward(self, alphas, lw):
        return (alphas - self.a_mean) / self.a_std, (lw - self.s_mean) / self.s_std


class PersonalityModel(nn.Module):
    def __init__(self, cfg: RegressorConfig, keys: list[str], n_vertices: int | None):
        """``n_vertices`` fixes the concatenating head (shared census);
        ``None`` selects the mean-pooling head for heterogeneous graphs."""
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.n_vertices = n_vertices
        d = feature_dim(cfg.variant, cfg.lw_mode)
        self.d_in = d
        self.ven = VEN(lw_dim(cfg.lw_mode)) if cfg.variant == "oplw_ven" else None
        self.bank = ERNBank(keys, d, cfg.edge_mode, cfg.edge_channels, cfg.edge_heads, cfg.edge_kernel_extent)
        widths = layer_widths(d, cfg.variant)
        dims = [d] + widths
        self.layers = nn.ModuleList(GatedGCNLayer(a, b) for a, b in zip(dims[:-1], dims[1:]))
        head_in = widths[-1] * (n_vertices if n_vertices is not None else 1)
        self.head = nn.Sequential(
            nn.Linear(head_in, cfg.head_hidden),
            nn.ReLU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.head_hidden, cfg.head_hidden),
            nn.ReLU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.head_hidden, N_TRAITS),
        )
        self.scaler = Standardizer.identity(lw_dim(cfg.lw_mode))

    def forward_set(self, gs: GraphSet) -> torch.Tensor:
        a, s = self.scaler(gs.alphas, gs.lw)
        h = encode_vertices(a, s, self.cfg.variant, self.cfg.lw_mode, self.ven)
        e = encode_edges(h, gs.adjacency, gs.keys, self.bank)
        adj = torch.as_tensor(gs.adjacency, dtype=torch.long).reshape(-1, 2)
        dst = torch.cat([adj[:, 0], adj[:, 1]])
        src = torch.cat([adj[:, 1], adj[:, 0]])
        e = torch.cat([e, e], dim=1)
        for layer in self.layers:
            h, e = layer(h, e, dst, src)
        if self.n_vertices is None:
            z = h.mean(dim=1)
        else:
            if h.shape[1] != self.n_vertices:
                raise CensusMismatch(f"graph has {h.shape[1]} vertices, model expects {self.n_vertices}")
            z = h.flatten(1)
        return self.head(z)


def model_forward(graph: CognitionGraph, model: PersonalityModel) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return model.forward_set(GraphSet.from_graphs([graph], dtype))[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainedRegressor:
    model: PersonalityModel
    census: tuple | None
    history: list[float] = field(default_factory=list)

    def predict(self, graphs: list[CognitionGraph], clamp: bool = True) -> np.ndarray:
        self.model.eval()
        with torch.no_grad():
            out = [self.model.forward_set(s) for s in _sets(graphs, self.census, self.model)]
        pred = torch.cat(out).double().numpy() if out else np.zeros((0, N_TRAITS))
        return np.clip(pred, 0.0, 1.0) if clamp else pred

    def save(self, path: str | Path):
        payload = {
            "config": asdict(self.model.cfg),
            "keys": list(self.model.bank.erns.keys()) if self.model.cfg.edge_mode == "multi_ern" else [],
            "n_vertices": -1 if self.model.n_vertices is None else self.model.n_vertices,
            "state": self.model.state_dict(),
            "history": list(self.history),
            "census": _census_to_json(self.census),
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)


def _census_to_json(census):
    if census is None:
        return None
    tags, adj, keys = census
    return {"tags": [list(map(_plain, t)) for t in tags], "adjacency": [list(p) for p in adj], "keys": list(keys)}


def _plain(x):
    return list(x) if isinstance(x, tuple) else x


def _census_from_json(d):
    if d is None:
        return None
    tags = tuple(tuple(tuple(x) if isinstance(x, list) else x for x in t) for t in d["tags"])
    return tags, tuple(tuple(p) for p in d["adjacency"]), tuple(d["keys"])


def load_regressor(path: str | Path) -> TrainedRegressor:
    payload = torch.load(path, weights_only=True)
    cfg = RegressorConfig(**payload["config"])
    n_v = payload["n_vertices"]
    model = PersonalityModel(cfg, payload["keys"], None if n_v < 0 else n_v)
    model.scaler = Standardizer(*(payload["state"][f"scaler.{k}"] for k in ("a_mean", "a_std", "s_mean", "s_std")))
    model.load_state_dict(payload["state"])
    return TrainedRegressor(model, _census_from_json(payload["census"]), list(payload["history"]))


def shared_census(graphs: list[CognitionGraph]) -> tuple | None:
    """The common census when every graph is isomorphic and alike, else None."""
    if not graphs or any(g.heterogeneity_tag != "isomorphic" for g in graphs):
        return None
    c0 = graphs[0].census()
    return c0 if all(g.census() == c0 for g in graphs[1:]) else None


def _sets(graphs, census, model) -> list[GraphSet]:
    dtype = next(model.parameters()).dtype
    if model.n_vertices is not None:
        for g in graphs:
            if g.census() != census:
                raise CensusMismatch(f"graph {g.subject_id!r} does not match the training census")
        return [GraphSet.from_graphs(graphs, dtype)] if graphs else []
    return [GraphSet.from_graphs([g], dtype) for g in graphs]


def train_regressor(graphs: list[CognitionGraph], labels, cfg: RegressorConfig | None = None) -> TrainedRegressor:
    """Fit model, VEN and ERNs jointly on the mean squared trait error."""
    cfg = cfg or RegressorConfig()
    cfg.validate()
    labels = np.asarray(labels, dtype=np.float64)
    if len(graphs) < 2 or labels.shape != (len(graphs), N_TRAITS):
        raise ValueError("need >= 2 graphs and one 5-trait label row per graph")
    census = shared_census(graphs)
    keys = sorted({k for g in graphs for k in g.pair_keys})
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = PersonalityModel(cfg, keys, None if census is None else len(graphs[0].vertices))
        sets = _sets(graphs, census, model)
        if cfg.standardize:
            model.scaler = Standardizer.fit(sets, per_position=census is not None)
        y = torch.as_tensor(labels, dtype=torch.float32)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        rng = np.random.default_rng(cfg.seed)
        history = []
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(len(graphs))
            bs = cfg.batch_size or len(graphs)
            total = 0.0
            for start in range(0, len(order), bs):
                idx = order[start : start + bs]
                if census is not None:
                    pred = model.forward_set(sets[0].subset(torch.as_tensor(idx)))
                else:
                    pred = torch.cat([model.forward_set(sets[i]) for i in idx])
                loss = torch.mean((pred - y[idx]) ** 2)
                if not torch.isfinite(loss):
                    raise RegressorDiverged(f"non-finite training loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            history.append(total / len(graphs))
    return TrainedRegressor(model, census, history)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


def make_folds(subject_ids: list[str], k: int | str, seed: int = 0) -> list[list[str]]:
    """Subject-disjoint test groups; ``k='loso'`` leaves one subject out."""
    subjects = sorted(set(subject_ids))
    if k == "loso":
        k = len(subjects)
    k = int(k)
    if k < 2 or k > len(subjects):
        raise ValueError(f"cannot split {len(subjects)} subjects into {k} folds with at least one test subject each")
    order = np.random.default_rng(seed).permutation(len(subjects))
    return [[subjects[i] for i in sorted(part)] for part in np.array_split(order, k)]


@dataclass
class CVResult:
    pcc: dict[str, float]
    acc: dict[str, float]
    pooled_pcc: dict[str, float]
    fold_pcc: list[dict[str, float]]
    predictions: np.ndarray

    def summary(self) -> dict:
        return {"pcc": self.pcc, "acc": self.acc, "pooled_pcc": self.pooled_pcc}


def _safe_pcc(f, y) -> float:
    try:
        return pcc(f, y)
    except (UndefinedCorrelationError, ValueError):
        return float("nan")


def cross_validate(graphs, labels, subject_ids, k: int | str = 5, cfg: RegressorConfig | None = None, fold_seed: int = 0) -> CVResult:
    """Train a fresh model per fold; average per-trait metrics over folds.

    Per-fold PCC needs at least two test subjects; folds where it is
    undefined are left out of the average and the pooled PCC over all
    held-out predictions is reported alongside.
    """
    cfg = cfg or RegressorConfig()
    labels = np.asarray(labels, dtype=np.float64)
    folds = make_folds(subject_ids, k, fold_seed)
    preds = np.full(labels.shape, np.nan)
    fold_pcc, fold_acc = [], []
    for test in folds:
        test_set = set(test)
        tr = [i for i, s in enumerate(subject_ids) if s not in test_set]
        te = [i for i, s in enumerate(subject_ids) if s in test_set]
        fit = train_regressor([graphs[i] for i in tr], labels[tr], cfg)
        p = fit.predict([graphs[i] for i in te])
        preds[te] = p
        fold_pcc.append({t: _safe_pcc(p[:, j], labels[te, j]) for j, t in enumerate(TRAIT_NAMES)})
        fold_acc.append({t: acc(p[:, j], labels[te, j]) for j, t in enumerate(TRAIT_NAMES)})
    mean_pcc = {t: float(np.nanmean([f[t] for f in fold_pcc])) if any(np.isfinite(f[t]) for f in fold_pcc) else float("nan") for t in TRAIT_NAMES}
    mean_acc = {t: float(np.mean([f[t] for f in fold_acc])) for t in TRAIT_NAMES}
    pooled = {t: _safe_pcc(preds[:, j], labels[:, j]) for j, t in enumerate(TRAIT_NAMES)}
    return CVResult(mean_pcc, mean_acc, pooled, fold_pcc, preds)


def train_pcc(fit: TrainedRegressor, graphs, labels) -> dict[str, float]:
    p = fit.predict(graphs, clamp=False)
    labels = np.asarray(labels)
    return {t: _safe_pcc(p[:, j], labels[:, j]) for j, t in enumerate(TRAIT_NAMES)}
