"""Stage functions and the cached end-to-end pipeline.

Each stage records the content hashes of what it read and wrote in
``manifest.json``. On re-run a stage is skipped when its parameters, input
hashes and output hashes all still match and no stage it depends on ran.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .arch_graph import align_block_distill, align_block_max, build_graph, load_graph
from .arch_graph import DistillConfig
from .checkpoint import artifact_hash, atomic_write_text, load_checkpoint, load_npz, save_npz
from .config import config_hash
from .nas_engine import SearchConfig, run_search
from .search_space import NetConfig
from .signal_ingest import (
    TRAIT_NAMES,
    DyadWindow,
    SynthConfig,
    load_landmarks,
    load_wav,
    one_hot_categories,
    preprocess_dyad,
    save_landmarks,
    save_wav,
    synth_dyad,
)
from .trait_regressor import (
    RegressorConfig,
    cross_validate,
    load_regressor,
    normalize_labels,
    train_regressor,
)

logger = logging.getLogger(__name__)


class StageFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Config adapters
# ---------------------------------------------------------------------------


def net_config(cfg: dict, seed: int | None = None) -> NetConfig:
    n = cfg["network"]
    return NetConfig(
        widths=tuple(n["widths"]), n_nodes=n["n_nodes"], n_reg=n["n_reg"], param_mode=n["param_mode"],
        modality=n["modality"], lstm_layers=n["lstm_layers"], face_scale=n["face_scale"],
        seed=cfg["seed"] if seed is None else seed,
    )


def search_config(cfg: dict) -> SearchConfig:
    return SearchConfig(**cfg["search"], seed=cfg["seed"])


def regressor_config(cfg: dict) -> RegressorConfig:
    t, e, v = cfg["train"], cfg["edge"], cfg["vertex"]
    return RegressorConfig(
        variant=v["variant"], lw_mode=v["lw_mode"], edge_mode=e["mode"], edge_channels=e["channels"],
        edge_heads=e["heads"], edge_kernel_extent=e["kernel_extent"], head_hidden=t["head_hidden"],
        dropout=t["dropout"], epochs=t["epochs"], lr=t["lr"], weight_decay=t["weight_decay"],
        batch_size=t["batch_size"], standardize=t["standardize"], seed=cfg["seed"],
    )


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def subject_ids(n: int) -> list[str]:
    return [f"s{i + 1:03d}" for i in range(n)]


def subject_seed(seed: int, index: int) -> int:
    return 10007 * seed + index + 1


def synth_dataset(cfg: dict, data_dir: str | Path) -> list[Path]:
    """Write a synthetic dyadic corpus plus ``labels.csv``; returns all files."""
    d = cfg["dataset"]
    fr = cfg["preprocess"]["frame_rate"]
    scfg = SynthConfig(
        frames=d["frames"], delay=d["delay"], noise=d["noise"], frame_rate=fr,
        world_seed=d["world_seed"], with_categories=d["with_categories"],
    )
    data_dir = Path(data_dir)
    files, rows = [], []
    for i, sid in enumerate(subject_ids(d["n_subjects"])):
        dy = synth_dyad(scfg, subject_seed(cfg["seed"], i))
        sub = data_dir / sid
        sub.mkdir(parents=True, exist_ok=True)
        for role, pts in (("speaker", dy.speaker_landmarks), ("listener", dy.listener_landmarks)):
            meta = {"frame_rate": fr, "subject_id": sid, "role": role}
            files.append(save_landmarks(sub / role, pts, meta))
            files.append(sub / f"{role}.meta.json")
        save_wav(sub / "speaker.wav", dy.speaker_waveform, dy.sample_rate)
        files.append(sub / "speaker.wav")
        if dy.speaker_categories is not None:
            np.save(sub / "speaker.categories.npy", dy.speaker_categories.argmax(axis=1).astype(np.int64))
            files.append(sub / "speaker.categories.npy")
        rows.append([sid] + [repr(float(x)) for x in dy.traits])
    labels = data_dir / "labels.csv"
    atomic_write_text(labels, "\n".join([",".join(["subject_id", *TRAIT_NAMES])] + [",".join(r) for r in rows]) + "\n")
    files.append(labels)
    return files


def subject_files(subject_dir: Path, optional: tuple[str, ...] | None = None) -> list[Path]:
    """Input files of one subject. ``optional`` names the optional streams
    expected; by default they are discovered on disk."""
    names = ["speaker.landmarks.npy", "speaker.meta.json", "listener.landmarks.npy", "listener.meta.json"]
    if optional is None:
        optional = tuple(n for n in ("speaker.wav", "speaker.categories.npy") if (subject_dir / n).exists())
    return [subject_dir / n for n in names + list(optional)]


def read_labels(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or row[0] == "subject_id":
                continue
            if len(row) != 1 + len(TRAIT_NAMES):
                raise ValueError(f"{path}: expected subject_id plus 5 trait values, got {row}")
            out[row[0]] = np.array([float(x) for x in row[1:]])
    return out


def preprocess_subject(subject_dir: str | Path, out_path: str | Path, cfg: dict) -> Path:
    subject_dir = Path(subject_dir)
    spk, meta = load_landmarks(subject_dir / "speaker")
    lst, _ = load_landmarks(subject_dir / "listener")
    wav_path = subject_dir / "speaker.wav"
    wav, sr = load_wav(wav_path) if wav_path.exists() else (None, None)
    cat_path = subject_dir / "speaker.categories.npy"
    cats = one_hot_categories(np.load(cat_path)) if cat_path.exists() else None
    windows = preprocess_dyad(
        spk, lst, wav, sr, frame_rate=float(meta["frame_rate"]), categories=cats, stride=cfg["preprocess"]["stride"]
    )
    save_windows(out_path, windows, {"subject_id": meta["subject_id"]})
    return Path(out_path)


def save_windows(path: str | Path, windows: list[DyadWindow], meta: dict) -> str:
    arrays = {
        "landmarks": np.stack([w.speaker_landmarks for w in windows]).astype(np.float32),
        "gt": np.stack([w.listener_gt_candidates for w in windows]).astype(np.float32),
        "start": np.array([w.start_frame for w in windows], dtype=np.int64),
    }
    if windows[0].speaker_audio is not None:
        arrays["audio"] = np.stack([w.speaker_audio for w in windows]).astype(np.float32)
    if windows[0].speaker_categories is not None:
        arrays["categories"] = np.stack([w.speaker_categories for w in windows]).astype(np.float32)
    return save_npz(path, arrays, dict(meta, n_windows=len(windows)))


def load_windows(path: str | Path) -> list[DyadWindow]:
    arrays, _ = load_npz(path)
    n = arrays["landmarks"].shape[0]
    get = lambda k, i: arrays[k][i] if k in arrays else None
    return [
        DyadWindow(get("audio", i), arrays["landmarks"][i], arrays["gt"][i], int(arrays["start"][i]), get("categories", i))
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# Per-subject stages
# ---------------------------------------------------------------------------


def search_from_file(windows_path, out_dir, sid: str, cfg: dict, cfg_digest: str = "") -> Path:
    torch.set_num_threads(1)
    windows = load_windows(windows_path)
    return run_search(windows, net_config(cfg), search_config(cfg), out_dir, sid, cfg_digest)


def encode_subject(ckpt_path, graph_path, cfg: dict, windows_path=None) -> Path:
    ckpt = load_checkpoint(ckpt_path)
    g = cfg["graph"]
    if g["alignment"] == "block_maximization":
        ckpt = align_block_max(ckpt)
    elif g["alignment"] == "block_distillation":
        if windows_path is None:
            raise StageFailed("block distillation needs the subject's windows")
        dcfg = DistillConfig(
            epochs=g["distill_epochs"], batch_size=cfg["search"]["batch_size"], lr_alpha=cfg["search"]["lr_alpha"],
            lr_weight=cfg["search"]["lr_weight"], seed=cfg["seed"],
        )
        ckpt = align_block_distill(ckpt, g["target_depth"], load_windows(windows_path), g["distill_mode"], dcfg)
    graph = build_graph(ckpt, cfg["vertex"]["lw_mode"])
    graph.save(graph_path)
    return Path(graph_path)


def load_graph_dir(graph_dir: str | Path):
    paths = sorted(Path(graph_dir).glob("*.graph.json"))
    return [load_graph(p) for p in paths]


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def train_stage(graph_dir, labels_path, model_path, cfg: dict) -> Path:
    graphs = load_graph_dir(graph_dir)
    labels = read_labels(labels_path)
    missing = [g.subject_id for g in graphs if g.subject_id not in labels]
    if missing:
        raise StageFailed(f"no labels for subjects {missing}")
    y = normalize_labels(np.stack([labels[g.subject_id] for g in graphs]))
    fit = train_regressor(graphs, y, regressor_config(cfg))
    fit.save(model_path)
    return Path(model_path)


def evaluate_stage(model_path, graph_dir, labels_path, report_path, cfg: dict | None) -> Path:
    """Predict with the trained model; with a config, also cross-validate."""
    graphs = load_graph_dir(graph_dir)
    fit = load_regressor(model_path)
    pred = fit.predict(graphs)
    report = {
        "predictions": {g.subject_id: dict(zip(TRAIT_NAMES, map(float, p))) for g, p in zip(graphs, pred)},
    }
    if labels_path is not None and cfg is not None:
        labels = read_labels(labels_path)
        y = normalize_labels(np.stack([labels[g.subject_id] for g in graphs]))
        n = len(graphs)
        folds = n if cfg["cv"]["folds"] == "loso" else min(int(cfg["cv"]["folds"]), n)
        # every fold must leave at least two subjects to train on
        if folds >= 2 and n - math.ceil(n / folds) >= 2:
            cv = cross_validate(graphs, y, [g.subject_id for g in graphs], folds, regressor_config(cfg), cfg["cv"]["seed"])
            report["cross_validation"] = dict(cv.summary(), folds=folds)
        else:
            report["cross_validation"] = {"skipped": f"{n} subjects are too few for {folds}-fold cross-validation"}
    atomic_write_text(report_path, json.dumps(_json_safe(report), sort_keys=True, indent=1) + "\n")
    return Path(report_path)


# ---------------------------------------------------------------------------
# Manifest-driven pipeline
# ---------------------------------------------------------------------------


def code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5
        )
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _hash_or_none(path: Path) -> str | None:
    try:
        return artifact_hash(path)
    except Exception:
        return None


@dataclass
class Stage:
    name: str
    inputs: list[Path]
    outputs: list[Path]
    params: str
    deps: list[str]
    run: object
    parallel_key: str | None = None
    record: dict = field(default_factory=dict)


class Manifest:
    def __init__(self, path: Path, cfg_digest: str):
        self.path = path
        self.old = {}
        if path.exists():
            try:
                self.old = {s["name"]: s for s in json.loads(path.read_text()).get("stages", [])}
            except (OSError, ValueError):
                self.old = {}
        self.data = {"config_hash": cfg_digest, "code_version": code_version(), "stages": []}

    def rel(self, p: Path) -> str:
        return str(Path(p).resolve().relative_to(self.path.parent.resolve()))

    def up_to_date(self, st: Stage) -> bool:
        prev = self.old.get(st.name)
        if not prev or prev.get("status") != "done" or prev.get("params") != st.params:
            return False
        for kind, paths in (("inputs", st.inputs), ("outputs", st.outputs)):
            rec = prev.get(kind, {})
            if set(rec) != {self.rel(p) for p in paths}:
                return False
            for p in paths:
                if not p.exists() or _hash_or_none(p) != rec[self.rel(p)]:
                    return False
        return True

    def add(self, record: dict):
        self.data["stages"].append(record)
        self.write()

    def write(self):
        atomic_write_text(self.path, json.dumps(self.data, sort_keys=True, indent=1) + "\n")


def _stage_record(man: Manifest, st: Stage, status: str, started: float, skipped: bool, error: str | None = None):
    rec = {
        "name": st.name,
        "params": st.params,
        "status": status,
        "skipped": skipped,
        "started": started,
        "finished": time.time(),
        "inputs": {man.rel(p): _hash_or_none(p) for p in st.inputs},
        "outputs": {man.rel(p): _hash_or_none(p) for p in st.outputs} if status == "done" else {},
    }
    if error:
        rec["error"] = error
    return rec


def _call(fn_args):
    fn, args = fn_args
    return fn(*args)


def plan_stages(cfg: dict, out: Path) -> list[Stage]:
    d = cfg["dataset"]
    data_dir = out / "data" if d["kind"] == "synthetic" else Path(d["root"])
    if d["kind"] == "synthetic":
        sids = subject_ids(d["n_subjects"])
    else:
        sids = sorted(p.name for p in data_dir.iterdir() if (p / "speaker.landmarks.npy").exists())
    labels = data_dir / "labels.csv"
    h = lambda *sections: config_hash(cfg, ("seed",) + sections)
    stages: list[Stage] = []
    if d["kind"] == "synthetic":
        synth_outputs = [labels]
        for sid in sids:
            sub = data_dir / sid
            synth_outputs += [sub / f"{r}.{x}" for r in ("speaker", "listener") for x in ("landmarks.npy", "meta.json")]
            synth_outputs.append(sub / "speaker.wav")
            if d["with_categories"]:
                synth_outputs.append(sub / "speaker.categories.npy")
        stages.append(Stage("synth-data", [], synth_outputs, h("dataset", "preprocess"), [], (synth_dataset, (cfg, data_dir))))
    digest = config_hash(cfg)
    phases: dict[str, list[Stage]] = {"preprocess": [], "search": [], "encode": []}
    for sid in sids:
        sub = data_dir / sid
        win = out / "windows" / f"{sid}.windows.npz"
        ckpt = out / "checkpoints" / f"{sid}.ckpt.npz"
        curve = out / "checkpoints" / f"{sid}.loss.csv"
        graph = out / "graphs" / f"{sid}.graph.json"
        deps0 = ["synth-data"] if d["kind"] == "synthetic" else []
        optional = None
        if d["kind"] == "synthetic":
            optional = ("speaker.wav",) + (("speaker.categories.npy",) if d["with_categories"] else ())
        phases["preprocess"].append(Stage(f"preprocess:{sid}", subject_files(sub, optional), [win], h("preprocess"), deps0, (preprocess_subject, (sub, win, cfg))))
        phases["search"].append(
            Stage(
                f"search:{sid}", [win], [ckpt, curve], h("network", "search"), [f"preprocess:{sid}"],
                (search_from_file, (win, out / "checkpoints", sid, cfg, digest)), parallel_key="search",
            )
        )
        enc_in = [ckpt] + ([win] if cfg["graph"]["alignment"] == "block_distillation" else [])
        phases["encode"].append(
            Stage(
                f"encode:{sid}", enc_in, [graph], h("graph", "vertex", "search"), [f"search:{sid}"],
                (encode_subject, (ckpt, graph, cfg, win)),
            )
        )
    for phase in phases.values():
        stages += phase
    graphs = [out / "graphs" / f"{sid}.graph.json" for sid in sids]
    model = out / "model" / "model.pt"
    report = out / "evaluation.json"
    enc = [f"encode:{sid}" for sid in sids]
    stages.append(Stage("train", graphs + [labels], [model], h("vertex", "edge", "train"), enc + (["synth-data"] if d["kind"] == "synthetic" else []), (train_stage, (out / "graphs", labels, model, cfg))))
    stages.append(Stage("evaluate", [model] + graphs + [labels], [report], h("vertex", "edge", "train", "cv"), ["train"], (evaluate_stage, (model, out / "graphs", labels, report, cfg))))
    return stages


def run_pipeline(cfg: dict, out: str | Path | None = None) -> dict:
    """Run every stage in order, reusing cached outputs; returns the manifest."""
    out = Path(out or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(out / "manifest.json", config_hash(cfg))
    stages = plan_stages(cfg, out)
    ran: set[str] = set()
    i = 0
    while i < len(stages):
        st = stages[i]
        # fan out consecutive-by-key stages (subject searches) over a process pool
        group = [st]
        if st.parallel_key and cfg["workers"] > 1:
            group = [s for s in stages[i:] if s.parallel_key == st.parallel_key]
        todo, started = [], time.time()
        for s in group:
            if not any(dep in ran for dep in s.deps) and man.up_to_date(s):
                man.add(_stage_record(man, s, "done", started, True))
            else:
                todo.append(s)
        try:
            if len(todo) > 1:
                for s in todo:
                    for p in s.outputs:
                        p.parent.mkdir(parents=True, exist_ok=True)
                with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
                    list(pool.map(_call, [s.run for s in todo]))
            elif todo:
                fn, args = todo[0].run
                for p in todo[0].outputs:
                    p.parent.mkdir(parents=True, exist_ok=True)
                fn(*args)
        except Exception as exc:
            for s in todo:
                man.add(_stage_record(man, s, "failed", started, False, f"{type(exc).__name__}: {exc}"))
            raise StageFailed(f"stage {todo[0].name} failed: {exc}") from exc
        for s in todo:
            logger.info("ran %s", s.name)
            ran.add(s.name)
            man.add(_stage_record(man, s, "done", started, False))
        i += len(group)
    return man.data
