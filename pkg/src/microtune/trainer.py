"""Self-training loop: pseudo-label, strongly augment, fuse, descend.

Each batch first receives pseudo-labels outside the gradient path (multi-view
scores against the frozen head blended with the current fused logits), then
the strongly augmented views run through the differentiable fusion graph.
The loss is pseudo-label cross-entropy plus the batch fairness term, both on
temperature-scaled softmax probabilities. Updates use decoupled weight decay
with adaptive moments and a cosine-decayed learning rate. Only the small
trainable set moves: LayerNorm affines (image mode), the learnable classifier
rows, the pooling projections, and the empty token.

All randomness is drawn from streams derived from (seed, purpose, image id,
epoch), so reruns with one config are byte-identical.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .autodiff import PROB_FLOOR, loss_head, loss_head_backward
from .classifier import ClassifierBank, init_classifiers, load_descriptions
from .encoder import (
    EncoderConfig,
    EncoderWeights,
    PatchTokenGrid,
    init_encoder,
    init_layernorm_params,
    load_feature_grid,
)
from .linalg import row_softmax
from .pseudolabel import (
    PseudoLabelDecision,
    aggregate_views,
    center_crop,
    clip_pseudo_logits,
    crop_weights,
    derive_rng,
    dynamic_aggregate,
    multi_crop,
)
from .tokenfusion import init_pooling_params
from .traingraph import Pipeline, fusion_backward, fusion_forward

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingDiverged",
    "DeskDataset",
    "load_dataset",
    "strong_augment",
    "self_training_loss",
    "fairness_loss",
    "cosine_lr",
    "init_train_state",
    "pseudo_label_batch",
    "pseudo_label_dataset",
    "pl_accuracy",
    "train_epoch",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "run_training",
    "RunResult",
]


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    gamma: float = 0.5
    n_crops: int = 8
    crop_scale_min: float = 0.5
    crop_scale_max: float = 0.9
    temperature: float = 0.01
    fusion_mode: str = "symmetric"
    pl_source: str = "frozen"  # frozen | learnable classifier rows for pseudo-logits
    pl_view: str = "multi"  # multi | single view alignment
    affinity_mode: str = "auto"  # auto | dense | grid
    affinity_tau: float = 0.2
    affinity_eps: float = 1e-5
    select_rule: str = "max_abs"
    detach_query: bool = False
    blend_softmax: bool = False  # blend softmaxed scores instead of raw cosines
    fairness: bool = True
    dataset_mode: str = "image"  # image | feature
    encoder_seed: int = 7

    def validate(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr < 0:
            raise ValueError("epochs and batch size must be positive, lr nonnegative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.n_crops < 1:
            raise ValueError("need at least one crop")
        if self.fusion_mode not in ("symmetric", "global-only", "local-only"):
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.dataset_mode not in ("image", "feature"):
            raise ValueError(f"unknown dataset mode {self.dataset_mode!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_checkpoint: str | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


# --- data ---------------------------------------------------------------------


@dataclass
class Record:
    image_id: str
    path: Path
    label: int


@dataclass
class DeskDataset:
    records: list[Record]
    mode: str
    images: list[np.ndarray] | None = None
    grids: list[PatchTokenGrid] | None = None

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def has_labels(self) -> bool:
        return bool(self.records) and all(r.label >= 0 for r in self.records)


def load_dataset(manifest_path, mode: str = "image") -> DeskDataset:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records = [
        Record(image_id, root / rel_path, label)
        for image_id, rel_path, label in formats.read_manifest(manifest_path)
    ]
    if mode == "image":
        images = [formats.read_pgm(r.path) for r in records]
        return DeskDataset(records, mode, images=images)
    if mode == "feature":
        grids = [load_feature_grid(r.path) for r in records]
        return DeskDataset(records, mode, grids=grids)
    raise ValueError(f"unknown dataset mode {mode!r}")


def _sibling_record(record: Record, suffix: str) -> Path:
    return record.path.with_name(record.path.stem + suffix + record.path.suffix)


def feature_strong_grid(record: Record) -> PatchTokenGrid:
    path = _sibling_record(record, ".strong")
    if not path.exists():
        raise FileNotFoundError(f"feature mode without precomputed strong view: {path}")
    return load_feature_grid(path)


def feature_crop_grids(record: Record, n_crops: int) -> list[PatchTokenGrid]:
    grids = []
    for i in range(n_crops):
        path = _sibling_record(record, f".crop{i}")
        if not path.exists():
            raise FileNotFoundError(f"feature mode without precomputed crop view: {path}")
        grids.append(load_feature_grid(path))
    return grids


# --- augmentation ----------------------------------------------------------------


def strong_augment(
    image: np.ndarray,
    rng: np.random.Generator,
    out_side: int,
    scale_min: float = 0.6,
    scale_max: float = 1.0,
    flip_p: float = 0.5,
    noise_sigma: float = 0.05,
) -> np.ndarray:
    """Random resized crop + horizontal flip + additive pixel noise.

    The draw order (scale, position, flip, noise) is fixed so a seeded
    generator reproduces the view exactly. Output pixels stay in [0, 1].
    """
    from .pseudolabel import resize_bilinear

    h, w = image.shape
    base = min(h, w)
    lam = float(rng.uniform(scale_min, scale_max))
    side = min(base, max(2, int(round(lam * base))))
    r0 = int(rng.integers(0, h - side + 1))
    c0 = int(rng.integers(0, w - side + 1))
    view = resize_bilinear(image[r0 : r0 + side, c0 : c0 + side], out_side)
    if float(rng.uniform()) < flip_p:
        view = view[:, ::-1].copy()
    noise = rng.standard_normal(view.shape)
    if noise_sigma > 0:
        view = view + noise_sigma * noise
    return np.clip(view, 0.0, 1.0)


# --- losses (single-instance spec surface; the loop uses the batched head) -------


def self_training_loss(fused_softmax: np.ndarray, label: int) -> float:
    """Negative log-probability of the assigned pseudo-label."""
    p = float(fused_softmax[label])
    if p <= PROB_FLOOR:
        warnings.warn("pseudo-label probability clamped at floor", RuntimeWarning)
        p = PROB_FLOOR
    return -math.log(p)


def fairness_loss(batch_probs: np.ndarray) -> float:
    """Penalty on the batch-mean class distribution, minimized at uniform."""
    batch_probs = np.asarray(batch_probs, dtype=np.float64)
    if np.any(np.abs(batch_probs.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("rows must be probability vectors")
    pbar = batch_probs.mean(axis=0)
    return float(-np.log(np.maximum(pbar, PROB_FLOOR)).mean())


def cosine_lr(base_lr: float, step: int, horizon: int) -> float:
    """base * (1 + cos(pi * t / T)) / 2; full rate at 0, zero at the horizon."""
    t = min(max(step, 0), horizon)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / max(horizon, 1)))


# --- state ------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    pipe: Pipeline
    params: dict[str, np.ndarray]
    moment1: dict[str, np.ndarray]
    moment2: dict[str, np.ndarray]
    step: int
    horizon: int
    frozen_snapshot: dict[str, bytes] = field(default_factory=dict)

    @property
    def weights(self) -> EncoderWeights:
        return self.pipe.weights

    @property
    def bank(self) -> ClassifierBank:
        return self.pipe.bank


def _encoder_config(cfg: TrainConfig) -> EncoderConfig:
    return EncoderConfig(seed=cfg.encoder_seed)


def init_train_state(
    cfg: TrainConfig,
    bank: ClassifierBank,
    weights: EncoderWeights | None = None,
    n_train: int = 0,
) -> TrainState:
    cfg.validate()
    if weights is None:
        weights = init_encoder(_encoder_config(cfg))
    params: dict[str, np.ndarray] = {}
    if cfg.dataset_mode == "image":
        # ingested features sit upstream of the encoder, so LayerNorm affines
        # train only in image mode
        params.update(init_layernorm_params(weights.config))
    params.update(init_pooling_params(weights.config.dim, seed=cfg.seed + 101).as_dict())
    params["head.learnable"] = bank.learnable  # shared storage with the bank
    pipe = Pipeline(
        weights=weights,
        params=params,
        bank=bank,
        fusion_mode=cfg.fusion_mode,
        affinity_mode=None if cfg.affinity_mode == "auto" else cfg.affinity_mode,
        affinity_tau=cfg.affinity_tau,
        affinity_eps=cfg.affinity_eps,
        select_rule=cfg.select_rule,
        detach_query=cfg.detach_query,
        feature_mode=cfg.dataset_mode == "feature",
    )
    steps_per_epoch = max(1, math.ceil(n_train / cfg.batch_size))
    state = TrainState(
        config=cfg,
        pipe=pipe,
        params=params,
        moment1={k: np.zeros_like(v) for k, v in params.items()},
        moment2={k: np.zeros_like(v) for k, v in params.items()},
        step=0,
        horizon=cfg.epochs * steps_per_epoch,
    )
    state.frozen_snapshot = frozen_checksums(state)
    return state


def frozen_checksums(state: TrainState) -> dict[str, bytes]:
    """Raw byte snapshots of every tensor that must never change."""
    import hashlib

    out = {}
    for name, arr in state.weights.frozen_tensors().items():
        out[name] = hashlib.sha256(np.ascontiguousarray(arr).tobytes()).digest()
    out["head.frozen"] = hashlib.sha256(
        np.ascontiguousarray(state.bank.frozen).tobytes()
    ).digest()
    return out


# --- pseudo-labeling ----------------------------------------------------------------


def _weak_views(state: TrainState, dataset: DeskDataset, indices) -> object:
    side = state.weights.config.image_side
    if dataset.mode == "image":
        return np.stack([center_crop(dataset.images[i], side) for i in indices])
    return [dataset.grids[i] for i in indices]


def _encode_cls_shared(state: TrainState, images: np.ndarray) -> np.ndarray:
    from .encoder import encode_batch

    _, _, v_cls = encode_batch(images, state.weights, state.params)
    return v_cls @ state.weights.p_clip


def pseudo_label_batch(
    state: TrainState,
    dataset: DeskDataset,
    indices,
    epoch: int,
    gamma: float | None = None,
) -> list[PseudoLabelDecision]:
    """Assign pseudo-labels to a batch; nothing here carries gradients.

    At the gamma endpoints the unused branch is skipped: its scores enter
    the blend with coefficient zero, so zeros stand in exactly.
    """
    cfg = state.config
    gamma = cfg.gamma if gamma is None else gamma
    n_classes = state.bank.n_classes
    batch_n = len(indices)
    side = state.weights.config.image_side

    weak = _weak_views(state, dataset, indices)

    # evolving branch: fused logits of the weak views under current params
    if gamma < 1.0:
        t_logits, _ = fusion_forward(weak, state.pipe)
    else:
        t_logits = np.zeros((batch_n, n_classes))

    # stable branch: multi-view scores against the pseudo-labeling head
    if gamma > 0.0:
        if dataset.mode == "image":
            weak_shared = _encode_cls_shared(state, weak)
            if cfg.pl_view == "single":
                p_logits = np.stack(
                    [
                        clip_pseudo_logits(weak_shared[b], state.bank, cfg.pl_source)
                        for b in range(batch_n)
                    ]
                )
            else:
                crop_stacks = []
                for b, i in enumerate(indices):
                    rec = dataset.records[i]
                    rng = derive_rng(cfg.seed, "crops", rec.image_id, epoch)
                    crop_stacks.append(
                        multi_crop(
                            dataset.images[i],
                            cfg.n_crops,
                            cfg.crop_scale_min,
                            cfg.crop_scale_max,
                            rng,
                            side,
                        ).crops
                    )
                all_crops = np.concatenate(crop_stacks, axis=0)
                crops_shared = _encode_cls_shared(state, all_crops).reshape(
                    batch_n, cfg.n_crops, -1
                )
                p_logits = np.empty((batch_n, n_classes))
                for b in range(batch_n):
                    w = crop_weights(weak_shared[b], crops_shared[b])
                    f_agg = aggregate_views(crops_shared[b], w)
                    p_logits[b] = clip_pseudo_logits(f_agg, state.bank, cfg.pl_source)
        else:
            p_logits = np.empty((batch_n, n_classes))
            for b, i in enumerate(indices):
                rec = dataset.records[i]
                weak_shared = dataset.grids[i].v_cls @ state.weights.p_clip
                if cfg.pl_view == "single":
                    p_logits[b] = clip_pseudo_logits(weak_shared, state.bank, cfg.pl_source)
                    continue
                crop_grids = feature_crop_grids(rec, cfg.n_crops)
                crops_shared = np.stack([g.v_cls @ state.weights.p_clip for g in crop_grids])
                w = crop_weights(weak_shared, crops_shared)
                f_agg = aggregate_views(crops_shared, w)
                p_logits[b] = clip_pseudo_logits(f_agg, state.bank, cfg.pl_source)
    else:
        p_logits = np.zeros((batch_n, n_classes))

    decisions = []
    for b in range(batch_n):
        p, t = p_logits[b], t_logits[b]
        if cfg.blend_softmax:
            p = row_softmax(p / cfg.temperature) if gamma > 0.0 else p
            t = row_softmax(t / cfg.temperature) if gamma < 1.0 else t
        decisions.append(dynamic_aggregate(p, t, gamma))
    return decisions


def pseudo_label_dataset(
    state: TrainState, dataset: DeskDataset, epoch: int = 0, gamma: float | None = None
) -> list[PseudoLabelDecision]:
    decisions = []
    for start in range(0, len(dataset), state.config.batch_size):
        indices = range(start, min(start + state.config.batch_size, len(dataset)))
        decisions.extend(pseudo_label_batch(state, dataset, indices, epoch, gamma))
    return decisions


def pl_accuracy(decisions: list[PseudoLabelDecision], labels: np.ndarray) -> float:
    assigned = np.array([d.label for d in decisions])
    return float((assigned == labels).mean())


# --- optimizer -------------------------------------------------------------------


def adamw_update(state: TrainState, grads, lr: float) -> None:
    cfg = state.config
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = state.step + 1
    for name, p in state.params.items():
        g = grads[name]
        m = state.moment1[name]
        v = state.moment2[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p -= lr * (mhat / (np.sqrt(vhat) + eps) + cfg.weight_decay * p)


# --- training loop ------------------------------------------------------------------


def _strong_views(state: TrainState, dataset: DeskDataset, indices, epoch: int):
    cfg = state.config
    side = state.weights.config.image_side
    if dataset.mode == "image":
        views = []
        for i in indices:
            rec = dataset.records[i]
            rng = derive_rng(cfg.seed, "strong", rec.image_id, epoch)
            views.append(strong_augment(dataset.images[i], rng, side))
        return np.stack(views)
    return [feature_strong_grid(dataset.records[i]) for i in indices]


def train_epoch(
    state: TrainState,
    dataset: DeskDataset,
    epoch: int,
    metrics_writer=None,
    audit_writer=None,
) -> dict:
    """One pass over the dataset; returns epoch-mean losses and PL accuracy."""
    cfg = state.config
    order = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(dataset))
    losses_st, losses_reg = [], []
    assigned = np.full(len(dataset), -1, dtype=np.int64)
    lr = cosine_lr(cfg.lr, state.step, state.horizon)
    for start in range(0, len(dataset), cfg.batch_size):
        indices = order[start : start + cfg.batch_size]
        decisions = pseudo_label_batch(state, dataset, indices, epoch)
        labels = np.array([d.label for d in decisions], dtype=np.int64)
        assigned[indices] = labels
        if audit_writer is not None:
            for i, d in zip(indices, decisions):
                audit_writer.row(epoch, dataset.records[i].image_id, d.label, d.margin, d.gamma)

        views = _strong_views(state, dataset, indices, epoch)
        fused, cache = fusion_forward(views, state.pipe)
        loss_st, loss_reg, lcache = loss_head(fused, labels, cfg.temperature)
        if not cfg.fairness:
            loss_reg = 0.0
        total = loss_st + loss_reg
        if not math.isfinite(total):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", None)
        dlogits = loss_head_backward(lcache, include_reg=cfg.fairness)
        grads = fusion_backward(dlogits, cache, state.pipe)
        lr = cosine_lr(cfg.lr, state.step, state.horizon)
        adamw_update(state, grads, lr)
        state.step += 1

        losses_st.append(loss_st)
        losses_reg.append(loss_reg)
        if metrics_writer is not None:
            batch_true = dataset.labels()[indices]
            batch_acc = float((labels == batch_true).mean()) if dataset.has_labels else None
            metrics_writer.row(epoch, state.step - 1, loss_st, loss_reg, lr, batch_acc, None)

    epoch_pl = (
        float((assigned == dataset.labels()).mean()) if dataset.has_labels else None
    )
    return {
        "loss_st": float(np.mean(losses_st)),
        "loss_reg": float(np.mean(losses_reg)),
        "lr": lr,
        "pl_accuracy": epoch_pl,
    }


def evaluate(dataset: DeskDataset, state: TrainState, chunk: int = 64) -> float:
    """Fused top-1 accuracy on weak (center-crop) views."""
    if len(dataset) == 0:
        raise ValueError("empty evaluation split")
    if not dataset.has_labels:
        raise ValueError("evaluation split has no labels")
    hits = 0
    for start in range(0, len(dataset), chunk):
        indices = range(start, min(start + chunk, len(dataset)))
        views = _weak_views(state, dataset, indices)
        fused, _ = fusion_forward(views, state.pipe)
        pred = fused.argmax(axis=1)
        hits += int((pred == dataset.labels()[list(indices)]).sum())
    return hits / len(dataset)


# --- checkpointing -------------------------------------------------------------------


def save_checkpoint(path, state: TrainState, epoch: int) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.params.items():
        tensors[f"param.{name}"] = p
        tensors[f"m1.{name}"] = state.moment1[name]
        tensors[f"m2.{name}"] = state.moment2[name]
    tensors["head.frozen"] = state.bank.frozen
    tensors["meta.step"] = np.array(float(state.step))
    tensors["meta.epoch"] = np.array(float(epoch))
    tensors["meta.seed"] = np.array(float(state.config.seed))
    tensors["meta.gamma"] = np.array(float(state.config.gamma))
    tensors["meta.n_crops"] = np.array(float(state.config.n_crops))
    formats.write_checkpoint(path, tensors)


def load_checkpoint(path, state: TrainState) -> int:
    """Restore trainables, moments, and counters in place; returns the epoch."""
    tensors = formats.read_checkpoint(path)
    for name, p in state.params.items():
        p[...] = tensors[f"param.{name}"]
        state.moment1[name][...] = tensors[f"m1.{name}"]
        state.moment2[name][...] = tensors[f"m2.{name}"]
    state.bank.frozen[...] = tensors["head.frozen"]
    state.step = int(tensors["meta.step"])
    return int(tensors["meta.epoch"])


# --- orchestration -------------------------------------------------------------------


class _CsvWriter:
    def __init__(self, path, header: str):
        self._fh = open(path, "w", encoding="utf-8", newline="\n")
        self._fh.write(header + "\n")

    @staticmethod
    def _fmt(value) -> str:
        if value is None:
            return ""
        if isinstance(value, float):
            return f"{value:.10g}"
        return str(value)

    def row(self, *values) -> None:
        self._fh.write(",".join(self._fmt(v) for v in values) + "\n")

    def close(self) -> None:
        self._fh.close()


@dataclass
class RunResult:
    out_dir: Path
    baseline_top1: float
    final_top1: float
    final_pl_accuracy: float | None
    metrics_path: Path
    audit_path: Path
    checkpoints: list[Path]
    epoch_history: list[dict]


def run_training(cfg, train_manifest, test_manifest, descriptions_path, out_dir) -> RunResult:
    """Full training run with metrics, audit log, and per-epoch checkpoints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set = load_dataset(train_manifest, cfg.dataset_mode)
    test_set = load_dataset(test_manifest, cfg.dataset_mode)
    descriptions = load_descriptions(descriptions_path)
    bank = init_classifiers(descriptions)
    state = init_train_state(cfg, bank, n_train=len(train_set))

    metrics = _CsvWriter(
        out_dir / "metrics.csv", "epoch,step,loss_st,loss_reg,lr,pl_accuracy,eval_top1"
    )
    audit = _CsvWriter(out_dir / "audit.csv", "epoch,image_id,label,blended_margin,gamma")
    checkpoints: list[Path] = []
    history: list[dict] = []
    try:
        baseline_top1 = evaluate(test_set, state)
        metrics.row(0, -1, None, None, cfg.lr, None, baseline_top1)
        final_pl = None
        for epoch in range(1, cfg.epochs + 1):
            try:
                stats = train_epoch(state, train_set, epoch, metrics, audit)
            except TrainingDiverged as exc:
                last = str(checkpoints[-1]) if checkpoints else None
                raise TrainingDiverged(str(exc), last) from None
            top1 = evaluate(test_set, state)
            ckpt = out_dir / f"ckpt_epoch{epoch:02d}.mcck"
            save_checkpoint(ckpt, state, epoch)
            checkpoints.append(ckpt)
            metrics.row(
                epoch, -1, stats["loss_st"], stats["loss_reg"], stats["lr"],
                stats["pl_accuracy"], top1,
            )
            stats["eval_top1"] = top1
            history.append(stats)
            final_pl = stats["pl_accuracy"]
    finally:
        metrics.close()
        audit.close()

    return RunResult(
        out_dir=out_dir,
        baseline_top1=baseline_top1,
        final_top1=history[-1]["eval_top1"] if history else baseline_top1,
        final_pl_accuracy=final_pl,
        metrics_path=out_dir / "metrics.csv",
        audit_path=out_dir / "audit.csv",
        checkpoints=checkpoints,
        epoch_history=history,
    )
