"""Training loop: weighted segmentation losses, alternating adversarial
updates, the round schedule with confidence-thresholded self-training, and
deterministic bookkeeping (metrics log, checkpoints, pseudo-label stores).

Round 1 trains on labeled source images plus the adversarial term; rounds 2
and up additionally supervise the target branch with pseudo labels produced
at the end of the previous round. All shuffling is counter-based (derived
from the config seed, round, and epoch), so resuming from a checkpoint
continues the exact same trajectory.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import dataio, metrics
from .alignment import downsample_attention, generator_fool_loss, select_foreground
from .alignment import adversarial_objective
from .dataio import DatasetLayout, PseudoLabelRecord, TrainConfig
from .errors import ConfigError, NumericError, StateError
from .networks import AdaptationModel, SegOutput, build_model
from .seeding import int_seed_for, rng_for

IGNORE_INDEX = -1


# ---------------------------------------------------------------------------
# losses


def seg_loss(out: SegOutput, target: torch.Tensor) -> torch.Tensor:
    """Mean cross entropy of a 2-class prediction against {0, 1} labels.

    `target` may contain -1 for pixels excluded from the loss. If every
    pixel is excluded the result is an exact zero that still participates in
    the autograd graph.
    """
    if target.ndim != 3 or target.shape != out.logits.shape[:1] + out.logits.shape[2:]:
        raise ConfigError(
            f"label shape {tuple(target.shape)} does not match logits "
            f"{tuple(out.logits.shape)}"
        )
    if target.dtype != torch.long:
        raise ConfigError(f"labels must be int64, got {target.dtype}")
    if target.numel() and (int(target.min()) < -1 or int(target.max()) > 1):
        raise ConfigError("labels must contain only -1 (ignored), 0, or 1")
    if int((target != IGNORE_INDEX).sum()) == 0:
        return out.logits.sum() * 0.0
    return F.cross_entropy(out.logits, target, ignore_index=IGNORE_INDEX)


@dataclasses.dataclass
class LossBreakdown:
    """Weighted-loss components of one generator step. Absent terms are None."""

    main_source: torch.Tensor | float | None = None
    rgb_aux_source: torch.Tensor | float | None = None
    sn_aux_source: torch.Tensor | float | None = None
    main_target: torch.Tensor | float | None = None
    rgb_aux_target: torch.Tensor | float | None = None
    sn_aux_target: torch.Tensor | float | None = None
    adversarial: torch.Tensor | float | None = None
    total: torch.Tensor | float = 0.0

    def scalars(self) -> dict[str, float]:
        values = {}
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, torch.Tensor):
                value = value.detach()
            if value is not None:
                values[field.name] = float(value)
        return values


def total_loss(
    round_index: int,
    cfg: TrainConfig,
    *,
    main_source: torch.Tensor | float | None = None,
    rgb_aux_source: torch.Tensor | float | None = None,
    sn_aux_source: torch.Tensor | float | None = None,
    main_target: torch.Tensor | float | None = None,
    rgb_aux_target: torch.Tensor | float | None = None,
    sn_aux_target: torch.Tensor | float | None = None,
    adversarial: torch.Tensor | float | None = None,
) -> LossBreakdown:
    """Combine loss terms with the configured weights for the given round.

    Round 1 must not receive target segmentation terms: pseudo labels do not
    exist yet, and passing them is a schedule bug, not a modeling choice.
    """
    if round_index < 1:
        raise ConfigError(f"round index must be >= 1, got {round_index}")
    target_parts = (main_target, rgb_aux_target, sn_aux_target)
    if round_index == 1 and any(p is not None for p in target_parts):
        raise StateError("target segmentation losses are not allowed in round 1")
    weighted = [
        (cfg.lambda_3s, main_source),
        (cfg.lambda_1s, rgb_aux_source),
        (cfg.lambda_2s, sn_aux_source),
        (cfg.lambda_3t, main_target),
        (cfg.lambda_1t, rgb_aux_target),
        (cfg.lambda_2t, sn_aux_target),
        (cfg.lambda_4, adversarial),
    ]
    total: torch.Tensor | float = 0.0
    for weight, part in weighted:
        if part is not None:
            total = total + weight * part
    return LossBreakdown(
        main_source=main_source,
        rgb_aux_source=rgb_aux_source,
        sn_aux_source=sn_aux_source,
        main_target=main_target,
        rgb_aux_target=rgb_aux_target,
        sn_aux_target=sn_aux_target,
        adversarial=adversarial,
        total=total,
    )


# ---------------------------------------------------------------------------
# pseudo labels


def make_pseudo_labels(prob: np.ndarray, alpha: float, round_index: int) -> PseudoLabelRecord:
    """Threshold a foreground-probability map into a pseudo label.

    Pixels with prob >= alpha become foreground, prob <= 1 - alpha become
    background, and everything strictly between is ignored. At alpha = 0.5
    the two bands meet and the ignore set is empty (0.5 counts as
    foreground).
    """
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 2:
        raise ConfigError(f"expected a 2-d probability map, got shape {prob.shape}")
    if not np.isfinite(prob).all():
        raise NumericError("probability map contains non-finite values")
    if prob.min() < 0 or prob.max() > 1:
        raise NumericError("probabilities must lie in [0, 1]")
    if not 0.5 <= alpha <= 1.0:
        raise ConfigError(f"confidence threshold must be in [0.5, 1], got {alpha}")
    fg = prob >= alpha
    bg = (prob <= 1.0 - alpha) & ~fg
    ignore = ~(fg | bg)
    return PseudoLabelRecord(
        label=fg.astype(np.uint8),
        ignore=ignore,
        round_index=round_index,
        alpha=alpha,
    )


# ---------------------------------------------------------------------------
# data plumbing


@dataclasses.dataclass
class LoadedSplit:
    """A whole split held in memory; desk-scale datasets make this cheap."""

    ids: list[str]
    rgb: torch.Tensor  # (N, 3, H, W) float32 in [0, 1]
    sn: torch.Tensor | None  # (N, 3, H, W) float32 in [0, 1]
    label: torch.Tensor | None  # (N, H, W) int64, -1 = ignored

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.rgb.shape[-2], self.rgb.shape[-1]


def load_split(layout: DatasetLayout, need_normals: bool, want_label: bool) -> LoadedSplit:
    rgbs, sns, labels = [], [], []
    for sample_id in layout.ids:
        sample = dataio.load_sample(
            layout, sample_id, need_normals=need_normals, want_label=want_label
        )
        rgbs.append(torch.from_numpy(sample.rgb.astype(np.float32) / 255.0).permute(2, 0, 1))
        if need_normals:
            sns.append(torch.from_numpy(sample.normals.channels.astype(np.float32)))
        if want_label:
            labels.append(torch.from_numpy(sample.label.astype(np.int64)))
    return LoadedSplit(
        ids=list(layout.ids),
        rgb=torch.stack(rgbs),
        sn=torch.stack(sns) if need_normals else None,
        label=torch.stack(labels) if want_label else None,
    )


def merge_pseudo_store(
    split: LoadedSplit, store: dict[str, PseudoLabelRecord]
) -> torch.Tensor:
    """Turn a pseudo-label store into a (N, H, W) tensor with -1 ignores."""
    missing = [sid for sid in split.ids if sid not in store]
    if missing:
        raise StateError(f"pseudo-label store is missing samples: {missing[:5]}")
    merged = []
    for sid in split.ids:
        record = store[sid]
        lab = torch.from_numpy(record.label.astype(np.int64))
        lab[torch.from_numpy(record.ignore)] = IGNORE_INDEX
        merged.append(lab)
    return torch.stack(merged)


@dataclasses.dataclass
class Batch:
    rgb: torch.Tensor
    sn: torch.Tensor | None
    label: torch.Tensor | None


def take_batch(split: LoadedSplit, indices: np.ndarray, label: torch.Tensor | None) -> Batch:
    idx = torch.from_numpy(np.ascontiguousarray(indices))
    return Batch(
        rgb=split.rgb[idx],
        sn=None if split.sn is None else split.sn[idx],
        label=None if label is None else label[idx],
    )


def downsample_labels(label: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor label downsampling; -1 ignores survive exactly."""
    if label.shape[-2:] == tuple(size):
        return label
    small = F.interpolate(label.float().unsqueeze(1), size=size, mode="nearest")
    return small.squeeze(1).long()


# ---------------------------------------------------------------------------
# optimization


@dataclasses.dataclass
class TrainState:
    cfg: TrainConfig
    model: AdaptationModel
    opt_seg: torch.optim.Optimizer
    opt_disc: dict[str, torch.optim.Optimizer]
    round_index: int = 1
    step: int = 0
    total_steps: int = 1


def make_state(cfg: TrainConfig, model: AdaptationModel, total_steps: int) -> TrainState:
    opt_seg = torch.optim.SGD(
        model.generator_parameters(),
        lr=cfg.lr_seg,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    opt_disc = {
        name: torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc)
        for name, disc in model.discriminators.items()
    }
    return TrainState(
        cfg=cfg, model=model, opt_seg=opt_seg, opt_disc=opt_disc, total_steps=max(total_steps, 1)
    )


def poly_lr(base_lr: float, step: int, total_steps: int, power: float) -> float:
    frac = min(step / max(total_steps, 1), 1.0)
    return base_lr * (1.0 - frac) ** power


def _apply_poly_lr(state: TrainState) -> None:
    cfg = state.cfg
    for group in state.opt_seg.param_groups:
        group["lr"] = poly_lr(cfg.lr_seg, state.step, state.total_steps, cfg.poly_power)
    for opt in state.opt_disc.values():
        for group in opt.param_groups:
            group["lr"] = poly_lr(cfg.lr_disc, state.step, state.total_steps, cfg.poly_power)


def sfa_modalities(cfg: TrainConfig) -> list[str]:
    return {"rgb": ["rgb"], "sn": ["sn"], "both": ["rgb", "sn"]}[cfg.sfa_modalities]


def _aligned_features(
    out, modality: str, stage: int, cfg: TrainConfig, detach: bool
) -> torch.Tensor:
    feats = out.stages[modality][stage]
    if detach:
        feats = feats.detach()
    attn = downsample_attention(out.main.foreground.detach(), feats.shape[-2:])
    return select_foreground(feats, attn, modality, allow_sn=modality == "sn")


def alternate_step(
    state: TrainState, batch_s: Batch, batch_t: Batch
) -> tuple[LossBreakdown, float | None]:
    """One generator update followed by one discriminator update.

    The generator step freezes discriminator parameters and minimizes the
    weighted segmentation losses plus the fooling term; the discriminator
    step then maximizes the domain objective on detached features. The
    generator update therefore never changes discriminator weights and the
    discriminator update never changes generator weights.
    """
    cfg = state.cfg
    model = state.model
    model.train()
    _apply_poly_lr(state)
    use_adv = cfg.sfa_enabled and cfg.lambda_4 > 0

    for disc in model.discriminators.values():
        disc.requires_grad_(False)

    out_s = model(batch_s.rgb, batch_s.sn)
    out_t = model(batch_t.rgb, batch_t.sn)
    size = out_s.main.logits.shape[-2:]

    if batch_s.label is None:
        raise StateError("source batch has no labels")
    lab_s = downsample_labels(batch_s.label, size)
    parts: dict[str, torch.Tensor] = {"main_source": seg_loss(out_s.main, lab_s)}
    if model.ccg is not None:
        parts["rgb_aux_source"] = seg_loss(out_s.aux_rgb, lab_s)
        parts["sn_aux_source"] = seg_loss(out_s.aux_sn, lab_s)

    if state.round_index >= 2:
        if batch_t.label is None:
            raise StateError("round >= 2 requires pseudo labels for the target batch")
        lab_t = downsample_labels(batch_t.label, size)
        parts["main_target"] = seg_loss(out_t.main, lab_t)
        if model.ccg is not None:
            parts["rgb_aux_target"] = seg_loss(out_t.aux_rgb, lab_t)
            parts["sn_aux_target"] = seg_loss(out_t.aux_sn, lab_t)

    if use_adv:
        fool = None
        for modality in sfa_modalities(cfg):
            sel_t = _aligned_features(out_t, modality, cfg.sfa_stage, cfg, detach=False)
            d_t = model.discriminators[modality](sel_t)
            term = generator_fool_loss(d_t, cfg.sfa_sum_reduction)
            fool = term if fool is None else fool + term
        parts["adversarial"] = fool

    breakdown = total_loss(state.round_index, cfg, **parts)
    state.opt_seg.zero_grad(set_to_none=True)
    breakdown.total.backward()
    state.opt_seg.step()

    disc_value = None
    if cfg.sfa_enabled:
        disc_value = 0.0
        for modality in sfa_modalities(cfg):
            model.discriminators[modality].requires_grad_(True)
            sel_s = _aligned_features(out_s, modality, cfg.sfa_stage, cfg, detach=True)
            sel_t = _aligned_features(out_t, modality, cfg.sfa_stage, cfg, detach=True)
            disc = model.discriminators[modality]
            loss_d = -adversarial_objective(
                disc(sel_s), disc(sel_t), cfg.sfa_sum_reduction
            )
            opt = state.opt_disc[modality]
            opt.zero_grad(set_to_none=True)
            loss_d.backward()
            opt.step()
            disc_value += float(loss_d.detach())

    state.step += 1
    return breakdown, disc_value


# ---------------------------------------------------------------------------
# evaluation and prediction


def predict_probs(model: AdaptationModel, split: LoadedSplit, batch_size: int = 8) -> np.ndarray:
    """Full-resolution foreground probabilities for every sample, (N, H, W)."""
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(split), batch_size):
            sl = slice(start, start + batch_size)
            sn = None if split.sn is None else split.sn[sl]
            out = model(split.rgb[sl], sn)
            prob = model.upsampled_foreground(out, split.image_size)
            outputs.append(prob.numpy().astype(np.float64))
    return np.concatenate(outputs, axis=0)


def evaluate(model: AdaptationModel, split: LoadedSplit, batch_size: int = 8) -> dict[str, float]:
    """Threshold-0.5 scores plus the best F1 over the threshold sweep."""
    if split.label is None:
        raise StateError("evaluation split has no labels")
    probs = predict_probs(model, split, batch_size)
    gts = split.label.numpy().astype(np.uint8)
    counts = metrics.ConfusionCounts()
    for i in range(len(split)):
        counts = counts + metrics.confusion((probs[i] >= 0.5).astype(np.uint8), gts[i])
    scores = metrics.scores(counts).to_dict()
    sweep = metrics.maxf_dataset(list(probs), [gts[i] for i in range(len(gts))])
    scores["MaxF"] = sweep.maxf
    return scores


# ---------------------------------------------------------------------------
# the round schedule


class MetricsLog:
    """Line-delimited JSON log; deterministic (sorted keys, no timestamps)."""

    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        if not append:
            self.path.write_text("")

    def write(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def checkpoint_path(out_dir: Path, round_index: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"round{round_index}.pt"


def save_checkpoint(state: TrainState, out_dir: Path) -> Path:
    path = checkpoint_path(out_dir, state.round_index)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model": state.model.state_dict(),
        "opt_seg": state.opt_seg.state_dict(),
        "opt_disc": {name: opt.state_dict() for name, opt in state.opt_disc.items()},
        "round": state.round_index,
        "step": state.step,
        "config": dataio.config_to_dotted(state.cfg),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise StateError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=True)


def model_from_checkpoint(path: Path) -> tuple[AdaptationModel, TrainConfig, dict]:
    payload = load_checkpoint(path)
    cfg = dataio.config_from_dotted(payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["model"])
    return model, cfg, payload


@dataclasses.dataclass
class RoundResult:
    round_index: int
    scores: dict[str, float]


def open_benchmark(data_root: Path) -> dict[str, DatasetLayout]:
    root = Path(data_root)
    layouts = {}
    for role in dataio.ROLES:
        layouts[role] = DatasetLayout.open(root / role)
    return layouts


def run_rounds(
    cfg: TrainConfig,
    out_dir: Path,
    resume: Path | None = None,
    quiet: bool = True,
) -> list[RoundResult]:
    """Train the full round schedule and return per-round evaluation scores.

    Writes into `out_dir`: a resolved-config echo (config.json), a metrics
    log (metrics.jsonl), per-round checkpoints, and the pseudo-label store
    each following round consumes.
    """
    cfg.validate()
    if not cfg.data_root:
        raise ConfigError("data.root is not set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(dataio.config_to_dotted(cfg), indent=2, sort_keys=True) + "\n"
    )

    layouts = open_benchmark(Path(cfg.data_root))
    source = load_split(layouts["source-train"], need_normals=cfg.use_sn, want_label=True)
    target_train = load_split(layouts["target-train"], need_normals=cfg.use_sn, want_label=False)
    target_eval = load_split(layouts["target-eval"], need_normals=cfg.use_sn, want_label=True)

    steps_per_epoch = max(min(len(source), len(target_train)) // cfg.batch_size, 1)
    total_steps = cfg.rounds * cfg.epochs_per_round * steps_per_epoch

    torch.manual_seed(int_seed_for(cfg.seed, "torch"))
    model = build_model(cfg)
    state = make_state(cfg, model, total_steps)

    start_round = 1
    if resume is not None:
        payload = load_checkpoint(Path(resume))
        saved_cfg = dataio.config_from_dotted(payload["config"])
        if dataio.config_to_dotted(saved_cfg) != dataio.config_to_dotted(cfg):
            raise ConfigError("checkpoint config does not match the requested config")
        model.load_state_dict(payload["model"])
        state.opt_seg.load_state_dict(payload["opt_seg"])
        for name, opt_state in payload["opt_disc"].items():
            state.opt_disc[name].load_state_dict(opt_state)
        state.step = int(payload["step"])
        start_round = int(payload["round"]) + 1
        if start_round > cfg.rounds:
            raise StateError(
                f"checkpoint already covers round {payload['round']} of {cfg.rounds}"
            )

    log = MetricsLog(out_dir / "metrics.jsonl", append=start_round > 1)
    results: list[RoundResult] = []

    for round_index in range(start_round, cfg.rounds + 1):
        state.round_index = round_index
        target_label = None
        if round_index >= 2:
            store_dir = dataio.pseudo_dir(out_dir, round_index)
            if not store_dir.is_dir():
                raise StateError(
                    f"round {round_index} needs pseudo labels at {store_dir}; "
                    "they are produced at the end of the previous round"
                )
            store = dataio.load_pseudo_labels(store_dir, expect_alpha=cfg.alpha)
            target_label = merge_pseudo_store(target_train, store)

        for epoch in range(1, cfg.epochs_per_round + 1):
            perm_s = rng_for(cfg.seed, "shuffle", "source", round_index, epoch).permutation(
                len(source)
            )
            perm_t = rng_for(cfg.seed, "shuffle", "target", round_index, epoch).permutation(
                len(target_train)
            )
            sums: dict[str, float] = {}
            disc_sum, disc_n = 0.0, 0
            for k in range(steps_per_epoch):
                idx_s = perm_s[k * cfg.batch_size : (k + 1) * cfg.batch_size]
                idx_t = perm_t[k * cfg.batch_size : (k + 1) * cfg.batch_size]
                batch_s = take_batch(source, idx_s, source.label)
                batch_t = take_batch(target_train, idx_t, target_label)
                breakdown, disc_value = alternate_step(state, batch_s, batch_t)
                for name, value in breakdown.scalars().items():
                    sums[name] = sums.get(name, 0.0) + value
                if disc_value is not None:
                    disc_sum += disc_value
                    disc_n += 1
            losses = {name: value / steps_per_epoch for name, value in sums.items()}
            if disc_n:
                losses["discriminator"] = disc_sum / disc_n
            log.write(
                {"event": "train", "round": round_index, "epoch": epoch, "losses": losses}
            )
            if not quiet:
                print(f"round {round_index} epoch {epoch}: total={losses['total']:.4f}")

        scores = evaluate(model, target_eval)
        log.write(
            {"event": "eval", "round": round_index, "split": "target-eval", **scores}
        )
        if not quiet:
            print(
                f"round {round_index} eval: F1={scores['F1']:.4f} IoU={scores['IoU']:.4f}"
            )
        results.append(RoundResult(round_index=round_index, scores=scores))
        save_checkpoint(state, out_dir)

        if round_index < cfg.rounds:
            write_pseudo_store(
                model, target_train, out_dir, consumed_in_round=round_index + 1, cfg=cfg
            )
    return results


def write_pseudo_store(
    model: AdaptationModel,
    target_train: LoadedSplit,
    out_dir: Path,
    consumed_in_round: int,
    cfg: TrainConfig,
) -> Path:
    """Predict on target-train and store thresholded pseudo labels."""
    probs = predict_probs(model, target_train)
    records = {
        sid: make_pseudo_labels(probs[i], cfg.alpha, consumed_in_round)
        for i, sid in enumerate(target_train.ids)
    }
    store_dir = dataio.pseudo_dir(out_dir, consumed_in_round)
    dataio.save_pseudo_labels(store_dir, records)
    return store_dir
