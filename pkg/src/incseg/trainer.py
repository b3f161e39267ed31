"""Training loops: dense base step, weakly-supervised incremental steps,
loss schedules, and checkpoint/log handling.

The incremental loop trains the localizer (and, through it, the encoder)
for a warmup phase, then adds the online pseudo-supervision path that
drives the decoder.  The previous-step model is snapshotted once, frozen,
and acts as the source of the localization prior, the feature
distillation target, and the old-class pseudo-supervision.
"""

from __future__ import annotations

import io
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

from . import pamr as pamr_mod
from .errors import (
    ConfigError,
    DataError,
    ShapeError,
    SingleClassStepError,
    SupervisionError,
)
from .metrics import ConfusionMatrix, miou
from .models import (
    FrozenSnapshot,
    Localizer,
    ModelBundle,
    TinyDecoder,
    TinyEncoder,
    extend_bundle,
    new_base_bundle,
    snapshot_old_model,
)
from .pooling import classification_loss, softmax_normalize
from .priors import (
    area_downsample,
    ce_prior_loss,
    check_prior_config,
    fixed_prior_scores,
    localization_prior_loss,
)
from .pseudo import (
    compose_supervision,
    hard_labels,
    segmentation_loss,
    smooth_labels,
    upsample_scores,
)
from .schedule import IncrementalSchedule

CHECKPOINT_VERSION = 1
LOG_HEADER = "step,epoch,iter,loss_cls,loss_loc,loss_enc,loss_sss,loss_seg,loss_total,lr"


@dataclass
class TrainConfig:
    """Hyper-parameters; defaults follow the published training recipe."""

    epochs: int = 40
    batch_size: int = 24
    base_lr: float = 1e-3
    head_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    warmup_epochs: int = 5
    alpha: float = 0.5
    focal_lambda: float = 0.01
    focal_gamma: float = 3.0
    ngwp_epsilon: float = 1e-5
    lambda_cls: float = 1.0
    lambda_loc: float = 1.0
    lambda_enc: float = 1.0
    lambda_sss: float = 1.0
    supervision_mode: str = "new-only"
    prior: str = "loc"
    pamr_iterations: int = 10
    seed: int = 1

    def validate(self) -> "TrainConfig":
        for name in ("batch_size", "base_lr", "head_lr", "momentum",
                     "weight_decay", "poly_power"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        # epochs == 0 is the degenerate no-op run (checkpoint == init)
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs)")
        if self.epochs == 0 and self.warmup_epochs != 0:
            raise ConfigError("warmup_epochs must be 0 when epochs is 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.pamr_iterations < 0:
            raise ConfigError("pamr_iterations must be non-negative")
        check_prior_config(self.prior, self.supervision_mode)
        return self


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float) -> float:
    """Polynomial decay base_lr * (1 - iter/max_iter)^power; past-the-end
    iterations clamp to zero."""
    if iteration < 0 or max_iter <= 0:
        raise ConfigError("iteration must be >= 0 and max_iter > 0")
    if iteration > max_iter:
        return 0.0
    return base_lr * (1.0 - iteration / max_iter) ** power


def feature_distillation_loss(feat_t: torch.Tensor, feat_old: torch.Tensor) -> torch.Tensor:
    """Mean squared error between live and frozen encoder features."""
    if feat_t.shape != feat_old.shape:
        raise ShapeError(
            f"feature shapes differ: {tuple(feat_t.shape)} vs {tuple(feat_old.shape)}"
        )
    return F.mse_loss(feat_t, feat_old.detach())


def total_loss(epoch: int, parts: dict, cfg: TrainConfig):
    """Combine loss parts for the given 1-based epoch.

    During warmup only the localizer losses are active; afterwards the
    self-supervised refinement loss and the pseudo-supervised
    segmentation loss join (the latter with unit weight).
    """
    if epoch < 1:
        raise ConfigError("epochs are 1-based")
    zero = 0.0
    total = (cfg.lambda_cls * parts.get("cls", zero)
             + cfg.lambda_loc * parts.get("loc", zero)
             + cfg.lambda_enc * parts.get("enc", zero))
    if epoch > cfg.warmup_epochs:
        total = total + cfg.lambda_sss * parts.get("sss", zero) + parts.get("seg", zero)
    return total


# --- data plumbing -----------------------------------------------------------


def _records_to_tensors(records, need_mask: bool):
    images, masks = [], []
    for r in records:
        if r.image is None:
            raise DataError("record has no pixel data; load it first")
        images.append(torch.from_numpy(np.ascontiguousarray(r.image)).permute(2, 0, 1))
        if need_mask:
            if r.dense_mask is None:
                raise SupervisionError("dense-mask supervision required at the base step")
            masks.append(torch.from_numpy(np.ascontiguousarray(r.dense_mask)).long())
    x = torch.stack(images).float()
    y = torch.stack(masks) if need_mask else None
    return x, y


def _mask_to_channel_indices(mask: torch.Tensor, schedule: IncrementalSchedule, t: int,
                             strict: bool = True) -> torch.Tensor:
    """Map class ids to model channel indices; unseen ids become ignore."""
    order = schedule.channel_order(t)
    lut = torch.full((256,), schedule.ignore_id, dtype=torch.long)
    for idx, cid in enumerate(order):
        lut[cid] = idx
    if strict:
        known = set(order) | {schedule.ignore_id}
        present = {int(v) for v in torch.unique(mask)}
        if not present <= known:
            raise SupervisionError(
                f"mask contains ids {sorted(present - known)} outside the step-{t} label set"
            )
    return lut[mask.clamp(0, 255)]


def _weak_label_targets(records, schedule: IncrementalSchedule, t: int, mode: str):
    """(targets, class_indices) for the classification loss.

    new-only covers the step's new classes; all-classes covers every
    channel, with the background indicator constantly on (synthetic and
    benchmark images always expose background pixels).
    """
    order = schedule.channel_order(t)
    index_of = {cid: i for i, cid in enumerate(order)}
    permitted = {c for c in schedule.seen_classes(t) if c != schedule.background_id}
    if mode == "new-only":
        class_ids = sorted(schedule.new_classes(t))
    else:
        class_ids = order
    targets = torch.zeros((len(records), len(class_ids)))
    for i, record in enumerate(records):
        if record.dense_mask is not None:
            raise SupervisionError("dense masks are not permitted at incremental steps")
        weak = record.weak_labels or frozenset()
        if not weak <= permitted:
            raise DataError(
                f"weak labels {sorted(weak - permitted)} outside the step-{t} universe"
            )
        for j, cid in enumerate(class_ids):
            if cid == schedule.background_id:
                targets[i, j] = 1.0
            elif cid in weak:
                targets[i, j] = 1.0
    return targets, [index_of[c] for c in class_ids]


def _batches(n: int, batch_size: int, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


# --- logging -----------------------------------------------------------------


def _scalar(value) -> float:
    if value is None:
        return 0.0
    if torch.is_tensor(value):
        return float(value.detach())
    return float(value)


def format_log(rows) -> str:
    buf = io.StringIO()
    buf.write(LOG_HEADER + "\n")
    for row in rows:
        step, epoch, it = row[:3]
        buf.write(f"{step},{epoch},{it}," +
                  ",".join(f"{v:.8e}" for v in row[3:]) + "\n")
    return buf.getvalue()


def parse_log(text: str):
    """Parse a loss log back into a list of dict rows."""
    from .errors import ParseError

    lines = text.strip().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ParseError("line 1: missing or unexpected log header")
    keys = LOG_HEADER.split(",")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(keys):
            raise ParseError(f"line {lineno}: expected {len(keys)} fields, got {len(parts)}")
        try:
            row = {k: (int(v) if k in ("step", "epoch", "iter") else float(v))
                   for k, v in zip(keys, parts)}
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
        rows.append(row)
    return rows


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path: str, bundle: ModelBundle, cfg: TrainConfig,
                    optimizer=None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "step": bundle.step,
        "class_ids": list(bundle.class_ids),
        "model": {
            "encoder": bundle.encoder.state_dict(),
            "decoder": bundle.decoder.state_dict(),
            "localizer": None if bundle.localizer is None else bundle.localizer.state_dict(),
        },
        "old_model": None if bundle.old_snapshot is None else {
            "encoder": bundle.old_snapshot.encoder.state_dict(),
            "decoder": bundle.old_snapshot.decoder.state_dict(),
        },
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "config": asdict(cfg),
    }
    torch.save(payload, path)


def load_checkpoint(path: str, with_localizer: bool = True) -> ModelBundle:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {payload.get('version')!r}")
    class_ids = tuple(payload["class_ids"])
    num_classes = len(class_ids)
    encoder = TinyEncoder()
    encoder.load_state_dict(payload["model"]["encoder"])
    decoder = TinyDecoder(num_classes)
    decoder.load_state_dict(payload["model"]["decoder"])
    localizer = None
    if with_localizer and payload["model"]["localizer"] is not None:
        loc_sd = payload["model"]["localizer"]
        localizer = Localizer(loc_sd["classifier.weight"].shape[0])
        localizer.load_state_dict(loc_sd)
    snapshot = None
    if payload["old_model"] is not None:
        old_dec_sd = payload["old_model"]["decoder"]
        old_enc = TinyEncoder()
        old_enc.load_state_dict(payload["old_model"]["encoder"])
        old_dec = TinyDecoder(old_dec_sd["classifier.weight"].shape[0])
        old_dec.load_state_dict(old_dec_sd)
        snapshot = FrozenSnapshot(old_enc, old_dec)
    return ModelBundle(encoder, decoder, localizer=localizer, old_snapshot=snapshot,
                       class_ids=class_ids, step=payload["step"])


def load_config(payload_or_path) -> TrainConfig:
    if isinstance(payload_or_path, str):
        payload_or_path = torch.load(payload_or_path, map_location="cpu",
                                     weights_only=False)
    known = {f.name for f in fields(TrainConfig)}
    cfg = payload_or_path["config"]
    return TrainConfig(**{k: v for k, v in cfg.items() if k in known})


# --- optimization helpers ----------------------------------------------------


def _make_optimizer(bundle: ModelBundle, cfg: TrainConfig):
    groups = [
        {"params": list(bundle.encoder.parameters()), "lr": cfg.base_lr, "base_lr": cfg.base_lr},
        {"params": list(bundle.decoder.parameters()), "lr": cfg.head_lr, "base_lr": cfg.head_lr},
    ]
    if bundle.localizer is not None:
        groups.append({"params": list(bundle.localizer.parameters()), "lr": cfg.head_lr,
                       "base_lr": cfg.head_lr})
    return torch.optim.SGD(groups, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _set_lr(optimizer, decay_iter: int, decay_total: int, power: float) -> float:
    """Apply poly decay to every group; returns the first group's lr."""
    for group in optimizer.param_groups:
        if decay_total <= 0:
            group["lr"] = group["base_lr"]
        else:
            group["lr"] = poly_lr(group["base_lr"], min(decay_iter, decay_total),
                                  decay_total, power)
    return optimizer.param_groups[0]["lr"]


# --- training loops ----------------------------------------------------------


def train_base(records, schedule: IncrementalSchedule, cfg: TrainConfig,
               out_dir: str | None = None):
    """Dense cross-entropy training of encoder+decoder on the base step."""
    cfg.validate()
    for r in records:
        if r.dense_mask is None:
            raise SupervisionError("base training needs dense masks on every record")
    torch.manual_seed(cfg.seed)
    order = schedule.channel_order(0)
    bundle = new_base_bundle(len(order), order)
    x, y_ids = _records_to_tensors(records, need_mask=True)
    y = torch.stack([_mask_to_channel_indices(m, schedule, 0) for m in y_ids])

    optimizer = _make_optimizer(bundle, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    iters_per_epoch = max(1, (len(records) + cfg.batch_size - 1) // cfg.batch_size)
    max_iter = cfg.epochs * iters_per_epoch
    rows = []
    it = 0
    bundle.train()
    for epoch in range(1, cfg.epochs + 1):
        for idx in _batches(len(records), cfg.batch_size, gen):
            lr = _set_lr(optimizer, it, max_iter, cfg.poly_power)
            logits = bundle.logits(x[idx])
            loss = F.cross_entropy(logits, y[idx], ignore_index=schedule.ignore_id)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            it += 1
            v = float(loss.detach())
            rows.append((0, epoch, it, 0.0, 0.0, 0.0, 0.0, v, v, lr))
    bundle.eval()
    if out_dir is not None:
        _write_artifacts(out_dir, bundle, cfg, optimizer, rows)
    return bundle, rows


def train_step(records, schedule: IncrementalSchedule, t: int, cfg: TrainConfig,
               prev: ModelBundle, out_dir: str | None = None,
               iteration_hook=None):
    """One weakly-supervised incremental step on top of a trained bundle.

    ``iteration_hook(state)``, if given, runs after each backward pass and
    before the optimizer step with a dict carrying epoch, warm flag, the
    bundle, and the loss parts (instrumentation/assertion surface).
    """
    cfg.validate()
    if t < 1:
        raise ConfigError("incremental steps start at t=1; use train_base for t=0")
    new_ids = sorted(schedule.new_classes(t))
    if len(new_ids) < 2:
        raise SingleClassStepError("incremental steps need at least two new classes")
    if len(prev.class_ids) != len(schedule.old_classes(t)):
        raise DataError(
            f"previous checkpoint covers {len(prev.class_ids)} classes, "
            f"schedule expects {len(schedule.old_classes(t))}"
        )
    torch.manual_seed(cfg.seed)
    order = schedule.channel_order(t)
    bundle = extend_bundle(prev, len(new_ids), order, step=t)
    snapshot = bundle.old_snapshot

    x, _ = _records_to_tensors(records, need_mask=False)
    targets, class_indices = _weak_label_targets(records, schedule, t, cfg.supervision_mode)
    new_present, _ = _weak_label_targets(records, schedule, t, "new-only")

    optimizer = _make_optimizer(bundle, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    iters_per_epoch = max(1, (len(records) + cfg.batch_size - 1) // cfg.batch_size)
    decay_total = (cfg.epochs - cfg.warmup_epochs) * iters_per_epoch
    rows = []
    it = 0
    decay_it = 0
    bundle.train()
    for epoch in range(1, cfg.epochs + 1):
        warm = epoch <= cfg.warmup_epochs
        for idx in _batches(len(records), cfg.batch_size, gen):
            # constant lr through warmup, poly decay afterwards
            lr = _set_lr(optimizer, 0 if warm else decay_it, decay_total, cfg.poly_power)
            xb = x[idx]
            feats = bundle.features(xb)
            z = bundle.scores(xb, features=feats)
            with torch.no_grad():
                feats_old = snapshot.features(xb)
                old_logits = snapshot.decoder(feats_old)
                omega_full = torch.sigmoid(old_logits)
            omega = area_downsample(omega_full, z.shape[-2:])

            if cfg.prior == "fixed":
                z_eff = fixed_prior_scores(z, omega)
            else:
                z_eff = z
            m = softmax_normalize(z_eff)

            parts = {
                "cls": classification_loss(
                    z_eff, targets[idx], class_indices, mode=cfg.supervision_mode, m=m,
                    epsilon=cfg.ngwp_epsilon, lam=cfg.focal_lambda, gamma=cfg.focal_gamma,
                ),
                "enc": feature_distillation_loss(feats, feats_old),
            }
            if cfg.prior == "loc":
                parts["loc"] = localization_prior_loss(z, omega)
            elif cfg.prior == "ce":
                parts["loc"] = ce_prior_loss(z, omega)

            if not warm:
                small = area_downsample(xb, z.shape[-2:])
                affinity = pamr_mod.compute_affinity(small)
                m_ref = pamr_mod.pamr_refine(m, affinity, cfg.pamr_iterations)
                # classes eligible for self-supervision: background, old
                # classes the frozen model detects, and labeled new classes
                present = torch.cat([omega.amax(dim=(-2, -1)) > 0.5,
                                     new_present[idx] > 0], dim=1)
                present[:, 0] = True
                gt = pamr_mod.pseudo_gt_from_refined(m_ref, ignore_id=schedule.ignore_id,
                                                     present=present)
                parts["sss"] = pamr_mod.sss_loss(m, gt)

                p = bundle.logits(xb, features=feats)
                m_up = upsample_scores(m.detach(), xb.shape[-2:])
                q = smooth_labels(hard_labels(m_up), m_up, cfg.alpha)
                q_hat = compose_supervision(q, omega_full, schedule, t)
                parts["seg"] = segmentation_loss(p, q_hat)

            loss = total_loss(epoch, parts, cfg)
            optimizer.zero_grad()
            loss.backward()
            if iteration_hook is not None:
                iteration_hook({"epoch": epoch, "warm": warm, "bundle": bundle,
                                "parts": parts, "loss": loss})
            optimizer.step()
            it += 1
            if not warm:
                decay_it += 1
            rows.append((
                t, epoch, it,
                _scalar(parts.get("cls")), _scalar(parts.get("loc")),
                _scalar(parts.get("enc")), _scalar(parts.get("sss")),
                _scalar(parts.get("seg")), float(loss.detach()), lr,
            ))
    bundle.eval()
    if out_dir is not None:
        _write_artifacts(out_dir, bundle, cfg, optimizer, rows)
    return bundle, rows


def _write_artifacts(out_dir: str, bundle: ModelBundle, cfg: TrainConfig,
                     optimizer, rows) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, "checkpoint.pt"), bundle, cfg, optimizer)
    with open(os.path.join(out_dir, "loss_log.csv"), "w") as fh:
        fh.write(format_log(rows))


# --- evaluation --------------------------------------------------------------


def evaluate(bundle: ModelBundle, records, schedule: IncrementalSchedule, t: int,
             batch_size: int = 16):
    """Decoder-only mIoU evaluation of a bundle on dense-mask records.

    Ground-truth ids outside the step-t label set count as ignore.
    Returns the miou() result dict with old/new class groups.
    """
    for r in records:
        if r.dense_mask is None:
            raise SupervisionError("evaluation requires ground-truth masks")
    bundle.eval()
    order = schedule.channel_order(t)
    n_old = len(schedule.old_classes(t))
    x, y_ids = _records_to_tensors(records, need_mask=True)
    y = torch.stack([_mask_to_channel_indices(m, schedule, t, strict=False)
                     for m in y_ids])
    cm = ConfusionMatrix(len(order), ignore_id=schedule.ignore_id)
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            pred = bundle.segment(x[start:start + batch_size])
            cm.accumulate(pred.numpy(), y[start:start + batch_size].numpy())
    groups = {"old": set(range(n_old)), "new": set(range(n_old, len(order)))}
    result = miou(cm, groups)
    result["class_ids"] = order
    result["step"] = t
    return result
