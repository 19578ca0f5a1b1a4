"""Person-specific search: delay-adaptive loss, single-level co-optimisation
of operation parameters and layer weights, and per-block depth search."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, atomic_write_text
from .search_space import CognitiveNet, NetConfig, NumericalFailure, assemble_network
from .signal_ingest import CANDIDATE_FRAMES, INPUT_FRAMES, MAX_DELAY, DyadWindow

logger = logging.getLogger(__name__)

N_DELAYS = MAX_DELAY + 1


class SearchDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class AdaptiveLossConfig:
    epsilon: float = 0.01
    R: int = N_DELAYS

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.R != N_DELAYS:
            raise ValueError(f"R must be {N_DELAYS}")


def adaptive_loss(pred: torch.Tensor, gt_candidates: torch.Tensor, cfg: AdaptiveLossConfig = AdaptiveLossConfig()):
    """Clamped squared landmark error minimised over the reaction delay.

    ``pred`` is ``[B x] 80 x 68 x 2`` and ``gt_candidates`` ``[B x] 105 x 68 x 2``.
    For each delay tau in 0..25 the prediction is compared with candidate
    frames ``[tau, tau + 80)``; each frame/landmark term
    ``(dx^2 + dy^2)`` is capped at ``epsilon``. Returns the per-window minimum
    and its argmin (smallest tau on ties).
    """
    single = pred.dim() == 3
    if single:
        pred, gt_candidates = pred[None], gt_candidates[None]
    if pred.shape[1:] != (INPUT_FRAMES, 68, 2) or gt_candidates.shape[1:] != (CANDIDATE_FRAMES, 68, 2):
        raise ValueError(f"bad shapes {tuple(pred.shape)} / {tuple(gt_candidates.shape)}")
    if not torch.isfinite(pred).all():
        raise NumericalFailure("prediction")
    cand = gt_candidates.unfold(1, INPUT_FRAMES, 1).permute(0, 1, 4, 2, 3)
    err = ((pred[:, None] - cand) ** 2).sum(-1)
    per_delay = torch.clamp(err, max=cfg.epsilon).sum(dim=(2, 3))
    loss, tau = per_delay.min(dim=1)
    if single:
        return loss[0], int(tau[0])
    return loss, tau


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class DyadBatch:
    audio: torch.Tensor | None
    landmarks: torch.Tensor
    gt: torch.Tensor
    categories: torch.Tensor | None = None

    def __len__(self):
        return self.landmarks.shape[0]

    def to(self, dtype) -> "DyadBatch":
        f = lambda t: None if t is None else t.to(dtype)
        return DyadBatch(f(self.audio), f(self.landmarks), f(self.gt), f(self.categories))


def stack_windows(windows: list[DyadWindow], dtype=torch.float32) -> DyadBatch:
    if not windows:
        raise ValueError("empty window list")

    def stack(attr):
        vals = [getattr(w, attr) for w in windows]
        if any(v is None for v in vals):
            return None
        return torch.as_tensor(np.stack(vals), dtype=dtype)

    return DyadBatch(stack("speaker_audio"), stack("speaker_landmarks"), stack("listener_gt_candidates"), stack("speaker_categories"))


def net_predict(net: CognitiveNet, batch: DyadBatch, depths=None) -> torch.Tensor:
    return net(batch.audio, batch.landmarks, batch.categories, depths=depths)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class SearchConfig:
    epochs: int = 300
    batch_size: int = 60
    lr_alpha: float = 0.05
    lr_weight: float = 0.001
    epsilon: float = 0.01
    depth_search: bool = True
    eval_fraction: float = 0.2
    mask_rule: str = "exclusive"
    tol: float = 1e-4
    patience: int = 10
    divergence_factor: float = 10.0
    divergence_epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.mask_rule not in ("exclusive", "inclusive"):
            raise ValueError(f"mask_rule must be 'exclusive' or 'inclusive', got {self.mask_rule!r}")

    @property
    def loss_cfg(self) -> AdaptiveLossConfig:
        return AdaptiveLossConfig(epsilon=self.epsilon)


@dataclass
class SearchState:
    net: CognitiveNet
    alpha_optimizer: torch.optim.Optimizer
    weight_optimizer: torch.optim.Optimizer
    loss_cfg: AdaptiveLossConfig = field(default_factory=AdaptiveLossConfig)
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    tau_history: list[list[int]] = field(default_factory=list)
    incidents: list[str] = field(default_factory=list)
    last_loss: float | None = None
    last_taus: list[int] = field(default_factory=list)

    @classmethod
    def create(cls, net: CognitiveNet, lr_alpha=0.05, lr_weight=0.001, loss_cfg=None) -> "SearchState":
        return cls(
            net=net,
            alpha_optimizer=torch.optim.Adam(net.alpha_parameters(), lr=lr_alpha),
            weight_optimizer=torch.optim.Adam(net.weight_parameters(), lr=lr_weight),
            loss_cfg=loss_cfg or AdaptiveLossConfig(),
        )


def search_step(state: SearchState, batch: DyadBatch) -> SearchState:
    """One gradient evaluation on ``batch``; layer weights and operation
    parameters are both stepped from it by their own Adam optimisers."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    net = state.net
    net.train()
    state.alpha_optimizer.zero_grad(set_to_none=True)
    state.weight_optimizer.zero_grad(set_to_none=True)
    try:
        loss_vec, tau = adaptive_loss(net_predict(net, batch), batch.gt, state.loss_cfg)
    except NumericalFailure as exc:
        state.incidents.append(f"epoch {state.epoch}: {exc}")
        logger.warning("skipping step: %s", exc)
        return state
    loss = loss_vec.mean()
    loss.backward()
    grads = [p.grad for p in net.parameters() if p.grad is not None]
    if not all(bool(torch.isfinite(g).all()) for g in grads):
        state.incidents.append(f"epoch {state.epoch}: non-finite gradient, step skipped")
        logger.warning("non-finite gradient at epoch %d; step skipped", state.epoch)
        state.alpha_optimizer.zero_grad(set_to_none=True)
        state.weight_optimizer.zero_grad(set_to_none=True)
        return state
    state.weight_optimizer.step()
    state.alpha_optimizer.step()
    state.last_loss = float(loss.detach())
    state.last_taus = tau.tolist()
    return state


@torch.no_grad()
def evaluate_loss(net: CognitiveNet, batch: DyadBatch, loss_cfg: AdaptiveLossConfig, depths=None):
    net.eval()
    loss, tau = adaptive_loss(net_predict(net, batch, depths), batch.gt, loss_cfg)
    return float(loss.mean()), tau.tolist()


# ---------------------------------------------------------------------------
# Depth search
# ---------------------------------------------------------------------------


@dataclass
class DepthSearchResult:
    per_block: dict[str, dict]

    def depths(self) -> dict[str, int]:
        return {k: v["depth"] for k, v in self.per_block.items()}


def kept_cells(m: int, mask_rule: str) -> int:
    """Cells surviving when cell ``m`` (1-based) is masked out."""
    return m - 1 if mask_rule == "exclusive" else m


def mask_loss_table(net: CognitiveNet, batch: DyadBatch, loss_cfg: AdaptiveLossConfig, mask_rule: str = "exclusive"):
    full_depths = {b.name: b.capacity for b in net.searchable_blocks()}
    full, _ = evaluate_loss(net, batch, loss_cfg, full_depths)
    table = {}
    for block in net.searchable_blocks():
        losses = {}
        for m in range(1, block.capacity + 1):
            depths = dict(full_depths)
            depths[block.name] = kept_cells(m, mask_rule)
            losses[m], _ = evaluate_loss(net, batch, loss_cfg, depths)
        table[block.name] = losses
    return full, table


def search_depth(
    net: CognitiveNet,
    eval_windows: list[DyadWindow] | DyadBatch,
    loss_cfg: AdaptiveLossConfig = AdaptiveLossConfig(),
    mask_rule: str = "exclusive",
) -> DepthSearchResult:
    """Per regular block, mask trailing cells and keep the depth whose
    masking hurts the mean adaptive loss the most (smaller depth on ties)."""
    if isinstance(eval_windows, DyadBatch):
        batch = eval_windows
    else:
        if not eval_windows:
            raise ValueError("depth search needs at least one evaluation window")
        batch = stack_windows(eval_windows, dtype=next(net.parameters()).dtype)
    full, table = mask_loss_table(net, batch, loss_cfg, mask_rule)
    result = {}
    for name, losses in table.items():
        drops = {m: losses[m] - full for m in losses}
        best = max(drops.values())
        depth = min(m for m, d in drops.items() if d == best)
        result[name] = {"depth": depth, "losses": losses, "full_loss": full, "drops": drops}
    net.set_active_depths({k: v["depth"] for k, v in result.items()})
    return DepthSearchResult(result)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def modal_tau(taus: list[int]) -> int:
    counts = Counter(taus)
    top = max(counts.values())
    return min(t for t, c in counts.items() if c == top)


def split_windows(windows: list[DyadWindow], cfg: SearchConfig):
    if not cfg.depth_search or len(windows) < 2:
        return windows, []
    n_eval = max(1, int(round(cfg.eval_fraction * len(windows))))
    return windows[:-n_eval], windows[-n_eval:]


def write_loss_curve(path: str | Path, history: list[dict]) -> Path:
    lines = ["epoch,loss,modal_tau"] + [f"{h['epoch']},{h['loss']!r},{h['modal_tau']}" for h in history]
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_loss_curve(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [{"epoch": int(r["epoch"]), "loss": float(r["loss"]), "modal_tau": int(r["modal_tau"])} for r in csv.DictReader(f)]


def search_subject(
    windows: list[DyadWindow],
    net_cfg: NetConfig,
    cfg: SearchConfig,
    dtype=torch.float32,
) -> tuple[CognitiveNet, list[dict], DepthSearchResult | None, list[str]]:
    """Run the full per-subject search in memory."""
    if not windows:
        raise ValueError("subject has no usable windows")
    train_w, eval_w = split_windows(windows, cfg)
    net = assemble_network(net_cfg).to(dtype)
    state = SearchState.create(net, cfg.lr_alpha, cfg.lr_weight, cfg.loss_cfg)
    data = stack_windows(train_w, dtype=dtype)

    init_loss, init_taus = evaluate_loss(net, data, cfg.loss_cfg)
    history = [{"epoch": 0, "loss": init_loss, "modal_tau": modal_tau(init_taus)}]
    rng = np.random.default_rng(cfg.seed)
    above = 0
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        losses, taus, sizes = [], [], []
        for idx in _batches(len(train_w), cfg.batch_size, rng):
            batch = DyadBatch(
                None if data.audio is None else data.audio[idx],
                data.landmarks[idx],
                data.gt[idx],
                None if data.categories is None else data.categories[idx],
            )
            state.last_loss = None
            search_step(state, batch)
            if state.last_loss is not None:
                losses.append(state.last_loss)
                sizes.append(len(idx))
                taus += state.last_taus
        if not losses:
            raise SearchDiverged(f"every step of epoch {epoch} was skipped: {state.incidents[-1]}")
        ep_loss = float(np.average(losses, weights=sizes))
        state.loss_history.append(ep_loss)
        history.append({"epoch": epoch, "loss": ep_loss, "modal_tau": modal_tau(taus)})
        above = above + 1 if ep_loss > cfg.divergence_factor * init_loss else 0
        if above >= cfg.divergence_epochs:
            raise SearchDiverged(
                f"loss {ep_loss:.4g} exceeded {cfg.divergence_factor}x the initial {init_loss:.4g} "
                f"for {above} consecutive epochs (epoch {epoch})"
            )
        if epoch > cfg.patience:
            ref = history[epoch - cfg.patience]["loss"]
            if ref > 0 and (ref - ep_loss) / ref < cfg.tol:
                logger.info("converged at epoch %d", epoch)
                break
            if ep_loss == 0:
                break

    depth_result = None
    if cfg.depth_search and eval_w and net.searchable_blocks():
        depth_result = search_depth(net, stack_windows(eval_w, dtype=dtype), cfg.loss_cfg, cfg.mask_rule)
    return net, history, depth_result, state.incidents


def run_search(
    windows: list[DyadWindow],
    net_cfg: NetConfig,
    cfg: SearchConfig,
    out_dir: str | Path,
    subject_id: str,
    config_hash: str = "",
) -> Path:
    """Search one subject and persist ``<subject>.ckpt.npz`` plus its loss curve."""
    net, history, depth, incidents = search_subject(windows, net_cfg, cfg)
    out_dir = Path(out_dir)
    ckpt = Checkpoint.from_network(
        net,
        subject_id=subject_id,
        seed=net_cfg.seed,
        search_config=asdict(cfg),
        config_hash=config_hash,
        history=history,
        depth_search=None if depth is None else {
            k: {"depth": v["depth"], "losses": {str(m): l for m, l in v["losses"].items()}, "full_loss": v["full_loss"]}
            for k, v in depth.per_block.items()
        },
        incidents=incidents,
    )
    path = out_dir / f"{subject_id}.ckpt.npz"
    digest = ckpt.save(path)
    write_loss_curve(out_dir / f"{subject_id}.loss.csv", history)
    logger.info("subject %s: checkpoint %s (%s)", subject_id, path, digest[:12])
    return path
