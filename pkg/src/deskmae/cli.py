"""Command-line entry point: ``deskmae <command> ...``.

Failures print one line to stderr, ``deskmae: error[<category>]: <message>``,
and exit non-zero. Categories: config, checkpoint, checkpoint-mismatch,
input-size, input, quota, numeric, equivalence, invalid-argument, internal.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckio
from . import config as cfgmod
from .data import manifest as mf
from .data.synthetic import gen_synthetic
from .data.tiles import TileFormatError, load_dataset, write_dataset
from .optim import LayerDecaySpec, NonFiniteGradientError, OptimSpec, scale_lr
from .tasks import (ProbeHead, SegLiteDecoder, calc_budget, extract_features, finetune, format_count,
                    predict, subset_split, train_head, MetricsLog, metric_top1)
from .tensor import no_grad, patch_project
from .train import (CheckpointMismatchError, check_bands, ddp_check, encoder_from_checkpoint,
                    inflate_checkpoint, model_tensors, normalize, pretrain)
from .transfer import interp_patch_filters
from .vit import REFERENCE_PARAMS, InputSizeError, count_params, get_recipe, planar_patches, validate_input_size

EXIT = {"config": 2, "invalid-argument": 2, "checkpoint": 3, "checkpoint-mismatch": 3, "input-size": 4,
        "input": 4, "quota": 5, "numeric": 6, "equivalence": 7, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        self.category = category
        super().__init__(message)


def _categorize(exc: BaseException) -> str:
    for types, cat in ((cfgmod.ConfigError, "config"), (CheckpointMismatchError, "checkpoint-mismatch"),
                       (ckio.CheckpointError, "checkpoint"), (InputSizeError, "input-size"),
                       (mf.QuotaError, "quota"), ((TileFormatError, FileNotFoundError), "input"),
                       ((FloatingPointError, NonFiniteGradientError), "numeric"),
                       ((ValueError, KeyError, IndexError), "invalid-argument")):
        if isinstance(exc, types):
            return cat
    return "internal"


def _emit(args, payload: dict, human: str) -> None:
    print(json.dumps(payload, sort_keys=True) if getattr(args, "json", False) else human)


def _sci(x: float) -> str:
    """2.4e-3 style (no zero padding in the exponent)."""
    mant, exp = f"{x:.6e}".split("e")
    return f"{mant.rstrip('0').rstrip('.')}e{int(exp)}"


# -- calc ------------------------------------------------------------------------
def cmd_calc_params(args):
    over = {k: v for k, v in (("bands", args.bands), ("image", args.image)) if v is not None}
    recipe = get_recipe(args.recipe, **over)
    n = count_params(recipe, args.convention, include_fixed_tables=not args.trainable_only)
    ref = REFERENCE_PARAMS.get(recipe.name)
    payload = {"recipe": recipe.name, "params": n, "convention": args.convention,
               "fixed_tables_counted": not args.trainable_only}
    human = f"{recipe.name}: {n:,} parameters ({format_count(n)})"
    if ref:
        dev = (n - ref) / ref
        payload.update(reference=ref, relative_deviation=dev, within_tolerance=abs(dev) <= 0.015)
        human += f" -> {format_count(ref).replace('.0', '')}-class ({dev:+.2%} vs {ref:,}, tolerance ±1.5%)"
    _emit(args, payload, human)


def cmd_calc_lr(args):
    lr = scale_lr(args.base, args.batch)
    _emit(args, {"base_lr": args.base, "effective_batch": args.batch, "lr": lr},
          f"{_sci(lr)}  (= {_sci(args.base)} x {args.batch}/256)")


def cmd_calc_budget(args):
    rep = calc_budget(args.n, args.epochs, args.batch)
    _emit(args, rep.to_dict(), f"{rep.iterations_at_bs1} iterations at batch size 1 ({rep.display}); "
                               f"{rep.steps} optimizer steps at batch {rep.effective_batch}")


# -- data --------------------------------------------------------------------------
def cmd_datagen(args):
    syn = gen_synthetic(args.kind, args.n, args.size, args.bands, args.seed, args.classes, args.nir_weight)
    meta = {"kind": args.kind, "n": args.n, "size": args.size, "bands": args.bands, "classes": args.classes,
            "seed": args.seed, "nir_weight": args.nir_weight}
    write_dataset(args.out, syn.tiles(), syn.labels, syn.masks, meta)
    _emit(args, {"out": str(args.out), **meta}, f"wrote {args.n} {args.kind} tiles to {args.out}")


def cmd_sample_manifest(args):
    if args.catalog:
        catalog = mf.read_jsonl(args.catalog)
    else:
        catalog = mf.gen_catalog(args.synthetic, args.seed)
        if args.write_catalog:
            mf.write_jsonl(args.write_catalog, catalog)
    quotas = mf.SamplerQuotas(args.target, args.max_views, not args.allow_repeat_seasons,
                              args.population_fraction, args.population_tolerance, args.min_coverage)
    manifest, diag = mf.sample_manifest(catalog, quotas, args.seed, args.best_effort)
    mf.write_jsonl(args.out, manifest)
    print(json.dumps(diag, sort_keys=True))


# -- training ------------------------------------------------------------------------
def cmd_pretrain(args):
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.apply_env(cfgmod.RunConfig())
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.steps:
        cfg.steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
    cfgmod.validate(cfg)
    res = pretrain(cfg, stop_after=args.stop_after, resume=not args.no_resume)
    _emit(args, {"out_dir": str(res.out_dir), "steps": res.steps, "total_steps": res.total_steps,
                 "final_loss": res.final_loss, "final_checkpoint": str(res.checkpoint) if res.checkpoint else None},
          f"pretrained {res.steps}/{res.total_steps} steps, last loss {res.final_loss:.4f} -> {res.out_dir}")


def _prepared(ckpt: ckio.Checkpoint, data_dir, source: str):
    images, labels, masks, _ = load_dataset(data_dir)
    check_bands(ckpt, images.shape[1], source)
    meta = ckpt.metadata
    validate_input_size(images.shape[-1], int(meta["patch"]))
    if images.shape[-1] != int(meta["image"]):
        raise CliError("input-size", f"tiles are {images.shape[-1]}px but {source} expects {meta['image']}px; "
                                     f"resample the tiles or use `deskmae reshape-patch --image`")
    enc = encoder_from_checkpoint(ckpt)
    x = normalize(images, meta["norm_mean"], meta["norm_std"], enc.dtype)
    return enc, x, labels, masks


def _write_run(out: Path, effective: dict) -> MetricsLog:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(effective, indent=2, sort_keys=True))
    log = MetricsLog(out / "metrics.jsonl")
    if log.path.exists():
        log.path.unlink()
    return log


def cmd_probe(args):
    ckpt = ckio.load(args.checkpoint)
    enc, xtr, ytr, _ = _prepared(ckpt, args.train, args.checkpoint)
    _, xte, yte, _ = _prepared(ckpt, args.test, args.checkpoint)
    if ytr is None or yte is None:
        raise ValueError("probe datasets need class labels")
    out = Path(args.out)
    log = _write_run(out, {"command": "probe", **{k: str(v) for k, v in vars(args).items() if k != "func"}})
    ftr, fte = extract_features(enc, xtr), extract_features(enc, xte)
    classes = int(max(ytr.max(), yte.max())) + 1
    head = ProbeHead(ftr.shape[1], classes, seed=args.seed)
    head.fit_stats(ftr)
    spec = OptimSpec("lars", base_lr=args.lr, weight_decay=args.weight_decay)
    losses = train_head(head, ftr, ytr, spec, args.epochs, args.batch, args.warmup, args.seed)
    acc = float(np.mean(predict(head, fte) == yte))
    run = ckpt.metadata.get("run_id", "probe")
    for i, l in enumerate(losses):
        log.log(run, "probe", "loss", l, i)
    log.log(run, "probe", "top1", acc, len(losses))
    log.log(run, "probe", "train_top1", metric_top1(predict(head, ftr), ytr), len(losses))
    tensors = {f"encoder.{k}": v for k, v in model_tensors(enc).items()}
    tensors.update({f"head.{k}": v for k, v in model_tensors(head).items()})
    tensors["head.mu"], tensors["head.sd"] = head._mu, head._sd
    meta = {k: v for k, v in ckpt.metadata.items() if k not in ("step", "config")}
    meta.update(kind="probe", classes=classes, probe_steps=len(losses))
    ckio.save(out / "final.orkt", ckio.Checkpoint(tensors, meta))
    _emit(args, {"top1": acc, "steps": len(losses), "out": str(out)}, f"probe top-1 {acc:.4f} -> {out}")


def cmd_finetune_seg(args):
    ckpt = ckio.load(args.checkpoint)
    enc, xtr, _, mtr = _prepared(ckpt, args.train, args.checkpoint)
    _, xte, _, mte = _prepared(ckpt, args.test, args.checkpoint)
    if mtr is None or mte is None:
        raise ValueError("segmentation datasets need masks")
    idx = subset_split(len(xtr), args.fraction, args.seed)
    out = Path(args.out)
    log = _write_run(out, {"command": "finetune-seg", **{k: str(v) for k, v in vars(args).items() if k != "func"}})
    classes = int(max(mtr.max(), mte.max())) + 1
    taps = [int(t) for t in args.taps.split(",")] if args.taps else None
    # fewer than four taps use the finest pyramid factors
    factors = SegLiteDecoder.FACTORS[:len(taps)] if taps else SegLiteDecoder.FACTORS
    dec = SegLiteDecoder(enc.recipe.width, classes, args.channels, seed=args.seed, dtype=enc.dtype,
                         factors=factors)
    res = finetune(enc, dec, (xtr[idx], mtr[idx]), (xte, mte), args.mode,
                   OptimSpec("adamw", base_lr=args.lr, betas=(0.9, 0.999), weight_decay=0.05),
                   layer_decay=LayerDecaySpec(args.layer_decay) if args.layer_decay else None,
                   steps=args.steps, batch=args.batch, seed=args.seed, taps=taps)
    run = ckpt.metadata.get("run_id", "seg")
    for i, l in enumerate(res.losses):
        log.log(run, "segmentation", "loss", l, i)
    for k, v in res.metrics.items():
        log.log(run, "segmentation", k, v, res.steps)
    tensors = {f"encoder.{k}": v for k, v in model_tensors(enc).items()}
    tensors.update({f"seg.{k}": v for k, v in model_tensors(dec).items()})
    meta = {k: v for k, v in ckpt.metadata.items() if k not in ("step", "config")}
    meta.update(kind="segmentation", classes=classes, mode=args.mode, steps=res.steps, fraction=args.fraction,
                train_subset=int(len(idx)))
    ckio.save(out / "final.orkt", ckio.Checkpoint(tensors, meta))
    _emit(args, {**res.metrics, "steps": res.steps, "train_subset": int(len(idx)), "out": str(out)},
          f"{args.mode} finetune: mIoU {res.metrics['miou']:.4f}, mF1 {res.metrics['mf1']:.4f} "
          f"after {res.steps} steps on {len(idx)} tiles -> {out}")


# -- weight surgery ----------------------------------------------------------------
def cmd_inflate(args):
    ckpt = ckio.load(args.input)
    new = inflate_checkpoint(ckpt, args.bands, args.mode, args.seed, args.std)
    ckio.save(args.out, new)
    _emit(args, {"in": str(args.input), "out": str(args.out), "bands": args.bands, "mode": args.mode},
          f"inflated {ckpt.metadata['bands']} -> {args.bands} bands ({args.mode}) -> {args.out}")


def cmd_reshape_patch(args):
    ckpt = ckio.load(args.input)
    meta = json.loads(json.dumps(ckpt.metadata))
    old_p = int(meta["patch"])
    grid = int(meta["image"]) // old_p
    image = args.image or grid * args.patch
    validate_input_size(image, args.patch)
    tensors = {}
    for k, v in ckpt.tensors.items():
        if k.startswith(("optim/", "decoder.")):
            continue  # pixel decoder and moments are tied to the old patch size
        tensors[k] = interp_patch_filters(v, args.patch, args.method) if k.endswith("patch_embed_weight") else v
    meta.update(patch=args.patch, image=image)
    meta["recipe"].update(patch=args.patch, image=image)
    meta["reshaped_from"] = {"patch": old_p, "method": args.method}
    meta.pop("step", None)
    ckio.save(args.out, ckio.Checkpoint(tensors, meta))
    _emit(args, {"out": str(args.out), "patch": args.patch, "image": image},
          f"patch filters {old_p} -> {args.patch} ({args.method}), image {image} -> {args.out}")


# -- checks and evaluation ------------------------------------------------------------
def cmd_ddp_check(args):
    rep = ddp_check(args.k, args.per_worker, args.steps, args.seed)
    human = (f"replicated vs sequential: max rel deviation {rep.replicated_vs_sequential:.3e}\n"
             f"sharded vs replicated:    max rel deviation {rep.sharded_vs_replicated:.3e}\n"
             f"bit-reproducible reruns:  {rep.reproducible}\n"
             f"{'PASS' if rep.passed else 'FAIL'} (tolerance {rep.tolerance:g}, K={rep.k}, {rep.steps} steps, f64)")
    _emit(args, rep.to_dict(), human)
    if not rep.passed:
        raise CliError("equivalence", "distributed equivalence outside tolerance")


def cmd_eval(args):
    ckpt = ckio.load(args.checkpoint)
    enc, x, labels, _ = _prepared(ckpt, args.data, args.checkpoint)
    meta = ckpt.metadata
    r = enc.recipe
    embeds, feats = [], []
    with no_grad():
        for i in range(0, len(x), args.batch):
            xb = x[i:i + args.batch]
            embeds.append(patch_project(planar_patches(xb, r.patch), enc.patch_embed_weight,
                                        enc.patch_embed_bias).data)
            tok = enc(xb).data
            feats.append(tok[:, 0] if r.cls_token else tok.mean(axis=1))
    out = {"patch_embed": np.concatenate(embeds), "features": np.concatenate(feats)}
    summary = {"tiles": int(len(x)), "bands": r.bands}
    if "head.fc.weight" in ckpt.tensors:
        head = ProbeHead(r.width, int(meta["classes"]), dtype=ckpt.tensors["head.fc.weight"].dtype)
        head.fc.weight.data = ckpt.tensors["head.fc.weight"]
        head.fc.bias.data = ckpt.tensors["head.fc.bias"]
        head._mu, head._sd = ckpt.tensors["head.mu"], ckpt.tensors["head.sd"]
        with no_grad():
            out["logits"] = head(out["features"].astype(np.float64)).data
        if labels is not None:
            summary["top1"] = float(np.mean(np.argmax(out["logits"], axis=1) == labels))
    summary["digests"] = {k: hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest() for k, v in out.items()}
    if args.out:
        np.savez(args.out, **out)
        summary["out"] = str(args.out)
    print(json.dumps(summary, sort_keys=True))


# -- parser ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deskmae", description="Desk-scale MAE/ViT toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    calc = sub.add_parser("calc", help="pure calculators").add_subparsers(dest="what", required=True)
    c = calc.add_parser("params", help="analytic parameter count of a recipe")
    c.add_argument("--recipe", required=True)
    c.add_argument("--convention", choices=("encoder_only", "encoder_plus_decoder"), default="encoder_only")
    c.add_argument("--bands", type=int)
    c.add_argument("--image", type=int)
    c.add_argument("--trainable-only", action="store_true", help="exclude the frozen position tables")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_calc_params)
    c = calc.add_parser("lr", help="linear lr scaling, base x batch / 256")
    c.add_argument("--base", type=float, required=True)
    c.add_argument("--batch", type=int, required=True)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_calc_lr)
    c = calc.add_parser("budget", help="iterations at batch size 1 and optimizer steps")
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--epochs", type=int, required=True)
    c.add_argument("--batch", type=int, default=1)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_calc_budget)

    c = sub.add_parser("datagen", help="write a synthetic tile dataset")
    c.add_argument("--kind", choices=("classification", "segmentation", "texture"), default="classification")
    c.add_argument("--n", type=int, default=400)
    c.add_argument("--size", type=int, default=32)
    c.add_argument("--bands", type=int, default=4)
    c.add_argument("--classes", type=int, default=4)
    c.add_argument("--nir-weight", type=float, default=0.8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_datagen)

    c = sub.add_parser("sample-manifest", help="diversity-stratified manifest sampling")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--catalog", help="catalog JSONL")
    src.add_argument("--synthetic", type=int, help="generate a synthetic catalog with this many entries")
    c.add_argument("--write-catalog", help="also save the synthetic catalog here")
    c.add_argument("--out", required=True)
    c.add_argument("--target", type=int)
    c.add_argument("--max-views", type=int, default=4)
    c.add_argument("--allow-repeat-seasons", action="store_true")
    c.add_argument("--population-fraction", type=float, default=0.60)
    c.add_argument("--population-tolerance", type=float, default=0.05)
    c.add_argument("--min-coverage", type=int, default=1)
    c.add_argument("--best-effort", action="store_true")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_sample_manifest)

    c = sub.add_parser("pretrain", help="MAE pretraining (resumes from output_dir)")
    c.add_argument("--config")
    c.add_argument("--output-dir")
    c.add_argument("--steps", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--stop-after", type=int, help="stop after this many steps (resumable)")
    c.add_argument("--no-resume", action="store_true")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_pretrain)

    c = sub.add_parser("probe", help="linear probe on a frozen encoder")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--train", required=True)
    c.add_argument("--test", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--epochs", type=int, default=90)
    c.add_argument("--batch", type=int, default=256)
    c.add_argument("--lr", type=float, default=10.0, help="LARS lr, used as given (no batch scaling)")
    c.add_argument("--warmup", type=float, default=10.0)
    c.add_argument("--weight-decay", type=float, default=0.0)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_probe)

    c = sub.add_parser("finetune-seg", help="segmentation finetuning with the light pyramid decoder")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--train", required=True)
    c.add_argument("--test", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--mode", choices=("frozen", "full"), default="full")
    c.add_argument("--steps", type=int, default=100)
    c.add_argument("--batch", type=int, default=8)
    c.add_argument("--lr", type=float, default=1e-3)
    c.add_argument("--layer-decay", type=float)
    c.add_argument("--fraction", type=float, default=1.0)
    c.add_argument("--channels", type=int, default=32)
    c.add_argument("--taps", help="comma-separated block indices, up to four (required unless depth is 12 or 32)")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_finetune_seg)

    c = sub.add_parser("inflate", help="add input bands to a checkpoint")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--bands", type=int, required=True)
    c.add_argument("--mode", choices=("zero", "random", "mean_of_existing"), default="random")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--std", type=float)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_inflate)

    c = sub.add_parser("reshape-patch", help="resample patch-embedding filters to a new patch size")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--patch", type=int, required=True)
    c.add_argument("--image", type=int, help="new input size (default keeps the token grid)")
    c.add_argument("--method", choices=("bilinear", "bicubic"), default="bilinear")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_reshape_patch)

    c = sub.add_parser("ddp-check", help="replicated/sharded equivalence suites")
    c.add_argument("--k", type=int, default=4)
    c.add_argument("--per-worker", type=int, default=2)
    c.add_argument("--steps", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_ddp_check)

    c = sub.add_parser("eval", help="patch embeddings, pooled features and logits of a checkpoint")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", help="write arrays to this .npz")
    c.add_argument("--batch", type=int, default=64)
    c.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as e:
        print(f"deskmae: error[{e.category}]: {e}", file=sys.stderr)
        return EXIT[e.category]
    except Exception as e:  # noqa: BLE001 - every failure becomes one categorized line
        cat = _categorize(e)
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"deskmae: error[{cat}]: {msg}", file=sys.stderr)
        return EXIT[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
