"""Command-line entry points.

Subcommands: synth, pretrain, finetune, impute, evaluate,
ablate-pretraining. All commands are deterministic under --seed: rerunning
one writes byte-identical logs, checkpoints, and reports.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .config import load_profile
from .data import load_dataset, save_dataset, synthesize_dataset
from .decoder import impute_missing
from .metrics import EvalInput, evaluate_survival
from .modalities import ModalityKind, ModalitySpec
from .train import ablate_pretraining, build_pretrain_model_from, run_finetune, run_pretrain


def _add_common(p: argparse.ArgumentParser, *, data: bool = False, out: bool = True,
                checkpoint: bool = False) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="JSON config mirroring the training settings")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--modalities", type=str, default=None,
                   help="comma list drawn from rna,dnam,mri,wsi,clinical")
    if data:
        p.add_argument("--data", type=Path, required=True, help="dataset directory")
    if out:
        p.add_argument("--out", type=Path, required=True, help="output directory")
    if checkpoint:
        p.add_argument("--checkpoint", type=Path, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmsurv",
        description="Masked multimodal pretraining, imputation, and survival prediction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    _add_common(p)

    p = sub.add_parser("pretrain", help="masked multimodal pretraining")
    _add_common(p, data=True)

    p = sub.add_parser("finetune", help="survival fine-tuning and evaluation")
    _add_common(p, data=True, checkpoint=True)

    p = sub.add_parser("impute", help="reconstruct missing modalities to disk")
    _add_common(p, data=True, checkpoint=True)

    p = sub.add_parser("evaluate", help="score a predictions CSV against a manifest")
    _add_common(p, data=True)
    p.add_argument("--pred", type=Path, required=True, help="predictions CSV")

    p = sub.add_parser("ablate-pretraining",
                       help="pretrained vs random-init fine-tuning over 3 seeds")
    _add_common(p, data=True)
    return parser


def cmd_synth(args) -> int:
    profile = load_profile(args.config, seed=args.seed)
    ds = synthesize_dataset(
        profile.synth_n, profile.specs, profile.synth_missing,
        seed=args.seed, tiles_per_patient=profile.synth_tiles,
    )
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} patients to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    profile = load_profile(args.config, seed=args.seed, modalities=args.modalities)
    ds = load_dataset(args.data, profile.specs)
    run_pretrain(ds, profile.pretrain, args.out)
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_finetune(args) -> int:
    profile = load_profile(args.config, seed=args.seed, modalities=args.modalities)
    ds = load_dataset(args.data, profile.specs)
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    _, report = run_finetune(ds, ckpt, profile.finetune, args.out)
    print(json.dumps(report["conditions"], indent=2, sort_keys=True))
    return 0


def cmd_impute(args) -> int:
    if not args.checkpoint:
        raise SystemExit("impute requires --checkpoint")
    params = load_checkpoint(args.checkpoint)
    model = build_pretrain_model_from(params)
    model.eval()
    specs = {ModalitySpec.from_dict(d).kind: ModalitySpec.from_dict(d)
             for d in params.meta["specs"]}
    ds = load_dataset(args.data, specs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = {
        "checkpoint": str(args.checkpoint),
        "config_hash": params.meta.get("config_hash"),
        "patients": {},
    }
    for rec in ds.records:
        imputed = impute_missing(rec, model)
        if not imputed:
            continue
        files = {}
        for kind, arr in imputed.items():
            if kind in (ModalityKind.RNA, ModalityKind.DNAM):
                rel = f"{rec.id}/{kind.value}.csv"
                (out / rec.id).mkdir(exist_ok=True)
                np.savetxt(out / rel, np.asarray(arr, dtype=np.float64), fmt="%.17g")
            else:
                rel = f"{rec.id}/{kind.value}.bin"
                (out / rec.id).mkdir(exist_ok=True)
                (out / rel).write_bytes(np.asarray(arr, dtype="<f4").tobytes(order="C"))
            files[kind.value] = {"path": rel, "shape": list(np.asarray(arr).shape)}
        provenance["patients"][rec.id] = files
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
    print(f"imputed {len(provenance['patients'])} patients into {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    sidecar = args.pred.with_suffix(".meta.json")
    if not sidecar.exists():
        raise SystemExit(f"missing predictions sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    edges = np.asarray(meta["bin_edges"], dtype=np.float64)
    num_bins = int(meta["num_bins"])
    manifest = json.loads((args.data / "manifest.json").read_text())
    labels = {e["id"]: (float(e["time_days"]), bool(e["event"])) for e in manifest}
    inputs = []
    with open(args.pred) as f:
        header = f.readline().strip().split(",")
        s_cols = [header.index(f"S_{t}") for t in range(1, num_bins + 1)]
        for line in f:
            parts = line.strip().split(",")
            if not parts or parts[0] not in labels:
                continue
            time, event = labels[parts[0]]
            surv = np.array([float(parts[c]) for c in s_cols])
            inputs.append(EvalInput(survival=surv, time=time, event=event))
    report = evaluate_survival(inputs, edges)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    profile = load_profile(args.config, seed=args.seed, modalities=args.modalities)
    ds = load_dataset(args.data, profile.specs)
    seeds = [args.seed + i for i in range(3)]
    report = ablate_pretraining(ds, profile, seeds, args.out)
    print(json.dumps({k: report[k] for k in ("pretraining_wins", "total",
                                             "pretraining_helps")}, sort_keys=True))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "impute": cmd_impute,
    "evaluate": cmd_evaluate,
    "ablate-pretraining": cmd_ablate,
}


def main(argv=None) -> int:
    torch.set_num_threads(1)  # keeps reruns bit-identical regardless of host threading
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
