"""Training loops and experiment orchestration.

Determinism contract: everything is derived from the config seed. Torch's
global generator covers parameter init and dropout; named numpy streams
cover shuffling, mask draws, and tile picks. Rerunning any entry point
with the same inputs and seed reproduces losses, checkpoints, and metrics
bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import ModelParams, arrays_from_module, config_hash, load_into_module, save_checkpoint
from .config import Profile, TrainConfig
from .data import Dataset, split_train_test
from .decoder import MaskedMultimodalAutoencoder, impute_missing
from .encoders import patchify
from .masking import MaskConfig, plan_masks
from .metrics import EvalInput, evaluate_survival
from .modalities import ModalityKind, SpecMap
from .optim import AdamW, cosine_schedule
from .preprocessing import discretize_times, interval_index
from .survival import (
    FreezePolicy,
    SurvivalModel,
    build_finetune_model,
    nll_from_logits,
    survival_from_logits,
)


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.default_rng(c) for c in children]


def _chunks(perm: np.ndarray, size: int):
    for i in range(0, len(perm), size):
        yield perm[i : i + size]


def collate_patches(records, specs: SpecMap, order, tile_indices=None) -> dict:
    """Patchified batch per modality; absent modalities become zero rows
    that the loss mask never touches."""
    out = {}
    for kind in order:
        spec = specs[kind]
        rows = []
        for i, rec in enumerate(records):
            arr = rec.modalities.get(kind)
            if arr is None:
                rows.append(torch.zeros(spec.num_patches, spec.patch_numel,
                                        dtype=torch.float64))
                continue
            if kind is ModalityKind.WSI:
                arr = arr[tile_indices[i] if tile_indices is not None else 0]
            t = torch.as_tensor(np.asarray(arr), dtype=torch.float64)
            rows.append(patchify(t, spec))
        out[kind] = torch.stack(rows)
    return out


def _model_meta(stage: str, cfg: TrainConfig, specs: SpecMap, **extra) -> dict:
    spec_dicts = [specs[k].to_dict() for k in sorted(specs, key=lambda k: k.value)]
    meta = {
        "stage": stage,
        "seed": cfg.seed,
        "specs": spec_dicts,
        "train_config": cfg.to_dict(),
        "config_hash": config_hash({"specs": spec_dicts, "train": cfg.to_dict()}),
    }
    meta.update(extra)
    return meta


class JsonlLogger:
    def __init__(self, path: Path | None):
        self.path = path
        self.lines: list[dict] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def log(self, **fields) -> None:
        self.lines.append(fields)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(fields, sort_keys=True) + "\n")


def run_pretrain(ds: Dataset, cfg: TrainConfig, out_dir: str | Path | None = None,
                 ) -> ModelParams:
    """Masked multimodal reconstruction training; returns the final weights."""
    if cfg.stage != "pretrain":
        raise ValueError("config stage must be 'pretrain'")
    out = Path(out_dir) if out_dir is not None else None
    order = cfg.maskable_subset
    specs = {k: ds.specs[k] for k in order}
    torch.manual_seed(cfg.seed)
    model = MaskedMultimodalAutoencoder(specs, decoder_layers=cfg.decoder_layers)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle_rng, mask_rng, tile_rng = _streams(cfg.seed, 3)
    log = JsonlLogger(out / "train_log.jsonl" if out else None)

    n = len(ds)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    mask_cfg = MaskConfig(mask_ratio=cfg.mask_ratio)
    best = (math.inf, None, 0)
    last_good = arrays_from_module(model)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        mod_sums: dict[str, float] = {}
        mod_counts: dict[str, int] = {}
        for chunk in _chunks(perm, cfg.batch_size):
            records = [ds.records[i] for i in chunk]
            plans = [plan_masks(r, model.patch_counts, mask_cfg, mask_rng) for r in records]
            tiles = [
                int(tile_rng.integers(r.modalities[ModalityKind.WSI].shape[0]))
                if ModalityKind.WSI in order and r.presence.get(ModalityKind.WSI, False)
                else 0
                for r in records
            ]
            batch = collate_patches(records, specs, order, tiles)
            opt.set_lr(cosine_schedule(step, total_steps, cfg.lr))
            total, per_mod = model.forward_loss(batch, plans)
            if not torch.isfinite(total):
                params = ModelParams(
                    arrays=last_good,
                    meta=_model_meta("pretrain", cfg, specs, aborted_epoch=epoch),
                )
                if out:
                    save_checkpoint(params, out / "checkpoint_lastgood.bin")
                raise RuntimeError(f"loss diverged at epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            loss_sum += float(total.detach()) * len(records)
            for k, v in per_mod.items():
                mod_sums[k.value] = mod_sums.get(k.value, 0.0) + float(v.detach()) * len(records)
                mod_counts[k.value] = mod_counts.get(k.value, 0) + len(records)
            step += 1
        epoch_loss = loss_sum / n
        log.log(
            stage="pretrain",
            epoch=epoch,
            loss=epoch_loss,
            per_modality={k: mod_sums[k] / mod_counts[k] for k in sorted(mod_sums)},
            lr=cosine_schedule(step - 1, total_steps, cfg.lr),
        )
        last_good = arrays_from_module(model)
        if epoch_loss < best[0]:
            best = (epoch_loss, last_good, epoch)

    meta = _model_meta("pretrain", cfg, specs, best_epoch=best[2], epochs_run=cfg.epochs)
    final = ModelParams(arrays=arrays_from_module(model), meta=meta)
    if out:
        save_checkpoint(final, out / "checkpoint.bin")
        if best[1] is not None:
            save_checkpoint(
                ModelParams(arrays=best[1], meta=dict(meta, checkpoint="best")),
                out / "checkpoint_best.bin",
            )
    final.log_lines = log.lines  # type: ignore[attr-defined]
    return final


def build_pretrain_model_from(params: ModelParams) -> MaskedMultimodalAutoencoder:
    from .modalities import ModalitySpec

    specs = {}
    for d in params.meta["specs"]:
        spec = ModalitySpec.from_dict(d)
        specs[spec.kind] = spec
    cfg = params.meta.get("train_config", {})
    model = MaskedMultimodalAutoencoder(specs, decoder_layers=cfg.get("decoder_layers", 3))
    load_into_module(model, params.arrays)
    return model


def _age_stats(records) -> tuple[float, float]:
    ages = [float(r.clinical[2]) for r in records if r.clinical is not None]
    if len(ages) < 2:
        return 0.0, 1.0
    mean = float(np.mean(ages))
    std = float(np.std(ages))
    return mean, (std if std > 0 else 1.0)


def _impute_all(ds: Dataset, model: MaskedMultimodalAutoencoder, order) -> dict:
    cache = {}
    with torch.no_grad():
        for rec in ds.records:
            missing = [k for k in order if not rec.presence.get(k, False)]
            if missing:
                cache[rec.id] = impute_missing(rec, model)
    return cache


def run_finetune(ds: Dataset, checkpoint: ModelParams | None, cfg: TrainConfig,
                 out_dir: str | Path | None = None):
    """Survival fine-tuning with an internal stratified 80/20 split.

    Returns (model, report). Writes metrics, predictions, a training log,
    and the fine-tuned weights when out_dir is given.
    """
    if cfg.stage != "finetune":
        raise ValueError("config stage must be 'finetune'")
    order = cfg.maskable_subset
    if ModalityKind.RNA not in order:
        raise ValueError("modality subset must include rna (evaluation condition)")
    specs = {k: ds.specs[k] for k in order}
    out = Path(out_dir) if out_dir is not None else None

    torch.manual_seed(cfg.seed)
    train_ds, test_ds = split_train_test(ds, 0.2, cfg.seed)
    edges = discretize_times([r.label for r in train_ds.records], cfg.num_bins)
    for rec in ds.records:
        rec.label.interval_index = int(interval_index(rec.label.time, edges))

    if checkpoint is not None:
        imput_model = build_pretrain_model_from(checkpoint)
    else:
        imput_model = MaskedMultimodalAutoencoder(specs, decoder_layers=cfg.decoder_layers)
    imput_model.eval()
    imputed = _impute_all(ds, imput_model, order)

    model, frozen = build_finetune_model(
        checkpoint.arrays if checkpoint is not None else None,
        specs,
        FreezePolicy.default(specs),
        use_clinical=cfg.use_clinical,
        num_bins=cfg.num_bins,
        dropout=cfg.dropout,
    )
    model.set_age_stats(*_age_stats(train_ds.records))
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    (shuffle_rng,) = _streams(cfg.seed, 1)
    log = JsonlLogger(out / "train_log.jsonl" if out else None)

    n = len(train_ds)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for chunk in _chunks(perm, cfg.batch_size):
            records = [train_ds.records[i] for i in chunk]
            tokens = torch.stack(
                [model.fusion_tokens(r, imputed.get(r.id, {})) for r in records]
            )
            logits = model(tokens)
            kappa = torch.tensor([r.label.interval_index for r in records])
            event = torch.tensor([r.label.event for r in records])
            loss = nll_from_logits(logits, kappa, event)
            if not torch.isfinite(loss):
                raise RuntimeError(f"loss diverged at epoch {epoch}")
            opt.set_lr(cosine_schedule(step, total_steps, cfg.lr))
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach()) * len(records)
            step += 1
        log.log(stage="finetune", epoch=epoch, loss=loss_sum / n)

    model.eval()
    predictions = []
    with torch.no_grad():
        for rec in test_ds.records:
            tokens = model.fusion_tokens(rec, imputed.get(rec.id, {}))
            logits = model(tokens.unsqueeze(0))[0]
            h, s = survival_from_logits(logits)
            predictions.append((rec, h.numpy(), s.numpy()))

    def condition_report(records_pred) -> dict:
        inputs = [EvalInput(survival=s, time=r.label.time, event=r.label.event)
                  for r, _, s in records_pred]
        if len(inputs) < 2:
            return {"n": len(inputs), "c_index": None, "ibs": None,
                    "cs_score": None, "comparable_pairs": 0}
        try:
            return evaluate_survival(inputs, edges)
        except ValueError:
            return {"n": len(inputs), "c_index": None, "ibs": None,
                    "cs_score": None, "comparable_pairs": 0}

    needed = list(order) + ([ModalityKind.CLINICAL] if cfg.use_clinical else [])
    rna_rows = [p for p in predictions if p[0].presence.get(ModalityKind.RNA, False)]
    full_rows = [p for p in rna_rows
                 if all(p[0].presence.get(k, False) for k in needed)]
    report = {
        "seed": cfg.seed,
        "modalities": [k.value for k in cfg.modality_subset],
        "n_train": len(train_ds),
        "n_test": len(test_ds),
        "pretrained": checkpoint is not None,
        "conditions": {
            "at_least_rna": condition_report(rna_rows),
            "all_modalities": condition_report(full_rows),
        },
    }

    if out:
        out.mkdir(parents=True, exist_ok=True)
        _write_predictions(out / "predictions.csv", predictions, edges, cfg.num_bins)
        (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        meta = _model_meta("finetune", cfg, specs,
                           bin_edges=[float(e) for e in edges], frozen=sorted(frozen))
        params = ModelParams(
            arrays=arrays_from_module(model),
            frozen={name: True for name in frozen},
            meta=meta,
        )
        save_checkpoint(params, out / "model.bin")
    return model, report


def _write_predictions(path: Path, predictions, edges, num_bins: int) -> None:
    cols = (["id"] + [f"h_{t}" for t in range(1, num_bins + 1)]
            + [f"S_{t}" for t in range(1, num_bins + 1)])
    lines = [",".join(cols)]
    for rec, h, s in predictions:
        vals = [rec.id] + [repr(float(v)) for v in h] + [repr(float(v)) for v in s]
        lines.append(",".join(vals))
    path.write_text("\n".join(lines) + "\n")
    sidecar = {"bin_edges": [float(e) for e in edges], "num_bins": num_bins}
    path.with_suffix(".meta.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def ablate_pretraining(ds: Dataset, profile: Profile, seeds,
                       out_dir: str | Path | None = None) -> dict:
    """Fine-tune from a pretrained checkpoint vs. from random init on the
    same split, per seed; reports the per-seed metric pairs and verdict."""
    runs = []
    for seed in seeds:
        pre_cfg = replace(profile.pretrain, seed=seed)
        ft_cfg = replace(profile.finetune, seed=seed)
        train_ds, _ = split_train_test(ds, 0.2, seed)
        ckpt = run_pretrain(train_ds, pre_cfg)
        _, with_pre = run_finetune(ds, ckpt, ft_cfg)
        _, without = run_finetune(ds, None, ft_cfg)
        runs.append({
            "seed": seed,
            "pretrained_c_index": with_pre["conditions"]["at_least_rna"]["c_index"],
            "random_init_c_index": without["conditions"]["at_least_rna"]["c_index"],
        })
    wins = sum(
        1 for r in runs
        if r["pretrained_c_index"] is not None
        and r["random_init_c_index"] is not None
        and r["pretrained_c_index"] >= r["random_init_c_index"]
    )
    report = {
        "runs": runs,
        "pretraining_wins": wins,
        "total": len(runs),
        "pretraining_helps": wins * 2 > len(runs),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
