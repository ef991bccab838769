"""Command-line interface.

Subcommands: gen-data, train-ae, train-lm, train-prob, eval, reconstruct,
diversity. Global flags --config/--seed/--out work on every subcommand;
explicit flags override config-file values which override defaults. All
randomness flows from the single seed. Exit codes: 0 success, 1 usage error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import storage
from .data import Dataset, build_dataset
from .evaluation import (VARIANT_LM, AutoencoderReconstructor, EvalSample,
                         ImageReconstructor, diversity_sweep, evaluate_model)
from .models import (decoder_from_arrays, encoder_from_arrays,
                     image_encoder_from_arrays)
from .storage import (RunConfig, load_checkpoint, read_config, read_pgm,
                      require_blocks, save_checkpoint, write_ply, write_tsv)
from .training import (TrainConfig, train_autoencoder, train_latent_matching,
                       train_probabilistic)

REPORT_COLUMNS = ("variant", "category", "chamfer_x100", "emd_x100",
                  "latent_l1", "latent_l2", "count")
LOG_COLUMNS = ("epoch", "loss", "loss_lm", "loss_div", "grad_norm", "wall_clock_s")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="master seed for all randomness")
    common.add_argument("--out", help="output directory")

    p = _Parser(prog="pcrecon", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    d = sub.add_parser("gen-data", parents=[common], help="build the synthetic dataset")
    d.add_argument("--categories", help="comma-separated shape categories")
    d.add_argument("--count", type=int, help="shapes per category")

    t = sub.add_parser("train-ae", parents=[common], help="stage I auto-encoder")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)

    m = sub.add_parser("train-lm", parents=[common], help="stage II latent matching")
    m.add_argument("--data")
    m.add_argument("--ae-checkpoint")
    m.add_argument("--variant", choices=("chamfer", "l1", "l2"))
    m.add_argument("--epochs", type=int)
    m.add_argument("--batch-size", type=int)
    m.add_argument("--lr", type=float)
    m.add_argument("--views-per-shape", type=int)
    m.add_argument("--category")

    r = sub.add_parser("train-prob", parents=[common],
                       help="stage II probabilistic latent matching")
    r.add_argument("--data")
    r.add_argument("--ae-checkpoint")
    r.add_argument("--epochs", type=int)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--views-per-shape", type=int)
    r.add_argument("--category")
    r.add_argument("--lambda-div", type=float)
    r.add_argument("--eta", type=float)

    e = sub.add_parser("eval", parents=[common], help="protocol metrics on the test split")
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--icp", choices=("on", "off"))
    e.add_argument("--eval-views-per-shape", type=int)
    e.add_argument("--category")

    c = sub.add_parser("reconstruct", parents=[common],
                       help="reconstruct a point cloud from one rendered view")
    c.add_argument("--checkpoint")
    c.add_argument("--image", help="input PGM view")

    v = sub.add_parser("diversity", parents=[common],
                       help="epsilon sweep over test views of one category")
    v.add_argument("--data")
    v.add_argument("--checkpoint")
    v.add_argument("--samples", type=int, help="number of epsilon draws")
    v.add_argument("--category")
    return p


_FLAG_TO_KEY = {
    "seed": "seed", "out": "out_dir", "data": "data_dir",
    "checkpoint": "checkpoint", "ae_checkpoint": "ae_checkpoint",
    "image": "image", "categories": "categories", "count": "shapes_per_category",
    "category": "category", "epochs": "epochs", "batch_size": "batch_size",
    "lr": "learning_rate", "variant": "lm_variant", "lambda_div": "lambda_div",
    "eta": "eta", "views_per_shape": "views_per_shape",
    "eval_views_per_shape": "eval_views_per_shape", "samples": "samples",
}


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = read_config(args.config, cfg)
    for flag, key in _FLAG_TO_KEY.items():
        value = getattr(args, flag, None)
        if value is not None:
            if flag == "icp":
                value = value == "on"
            setattr(cfg, key, value)
    if getattr(args, "icp", None) is not None:
        cfg.icp = args.icp == "on"
    return cfg


def _require(cfg: RunConfig, command: str, *keys):
    for key in keys:
        if not getattr(cfg, key):
            flag = "--" + {"data_dir": "data", "out_dir": "out"}.get(key, key.replace("_", "-"))
            raise UsageError(f"{command}: missing required {flag}")


def _train_config(cfg: RunConfig, stage: str) -> TrainConfig:
    return TrainConfig(stage=stage, lm_variant=cfg.lm_variant,
                       learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                       epochs=cfg.epochs, seed=cfg.seed, lambda_div=cfg.lambda_div,
                       eta=cfg.eta, phi_o_deg=cfg.phi_o_deg, delta_deg=cfg.delta_deg,
                       wrap_azimuth=cfg.wrap_azimuth, shared_epsilon=cfg.shared_epsilon)


def _write_log(path: str, log):
    rows = [(r.epoch, r.loss, r.loss_lm, r.loss_div, r.grad_norm, r.wall_clock)
            for r in log.records]
    write_tsv(path, LOG_COLUMNS, rows)


def _write_table(path: str, table):
    rows = [(r.variant, r.category, r.chamfer_scaled, r.emd_scaled,
             r.latent_l1, r.latent_l2, r.count) for r in table.rows]
    write_tsv(path, REPORT_COLUMNS, rows)


def _load_stage1(path: str):
    ckpt = load_checkpoint(path)
    require_blocks(ckpt, "pe.", "dec.")
    return ckpt, encoder_from_arrays(ckpt.blocks), decoder_from_arrays(ckpt.blocks)


def _cmd_gen_data(cfg: RunConfig):
    _require(cfg, "gen-data", "out_dir")
    cats = [c.strip() for c in cfg.categories.split(",") if c.strip()]
    manifest = build_dataset(cfg.out_dir, cats, cfg.shapes_per_category, cfg.seed)
    n_train = len(manifest.by_split("train"))
    n_test = len(manifest.by_split("test"))
    print(f"gen-data: {len(manifest.entries)} shapes "
          f"({n_train} train / {n_test} test) under {cfg.out_dir}")


def _cmd_train_ae(cfg: RunConfig):
    _require(cfg, "train-ae", "data_dir", "out_dir")
    ds = Dataset.open(cfg.data_dir)
    clouds = ds.cloud_list("train", cfg.category or None)
    enc, dec, log = train_autoencoder(clouds, _train_config(cfg, "AE"))
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "ae.ckpt")
    save_checkpoint(path, "AE", enc.named_arrays() + dec.named_arrays(), cfg.echo())
    _write_log(os.path.join(cfg.out_dir, "train_ae_log.tsv"), log)
    print(f"train-ae: {len(clouds)} clouds, {cfg.epochs} epochs, "
          f"final loss {log.final_loss:.6f} -> {path}")


def _cmd_train_lm(cfg: RunConfig):
    _require(cfg, "train-lm", "data_dir", "ae_checkpoint", "out_dir")
    ds = Dataset.open(cfg.data_dir)
    _ckpt, enc, dec = _load_stage1(cfg.ae_checkpoint)
    samples = ds.lm_samples("train", cfg.views_per_shape, cfg.category or None)
    img, log = train_latent_matching(samples, enc, dec, _train_config(cfg, "LM"))
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, f"lm_{cfg.lm_variant}.ckpt")
    blocks = enc.named_arrays() + dec.named_arrays() + img.named_arrays()
    save_checkpoint(path, "LM", blocks, cfg.echo())
    _write_log(os.path.join(cfg.out_dir, f"train_lm_{cfg.lm_variant}_log.tsv"), log)
    print(f"train-lm[{cfg.lm_variant}]: {len(samples)} pairs, {cfg.epochs} epochs, "
          f"final loss {log.final_loss:.6f} -> {path}")


def _cmd_train_prob(cfg: RunConfig):
    _require(cfg, "train-prob", "data_dir", "ae_checkpoint", "out_dir")
    ds = Dataset.open(cfg.data_dir)
    _ckpt, enc, dec = _load_stage1(cfg.ae_checkpoint)
    variant = cfg.lm_variant if cfg.lm_variant in ("l1", "l2") else "l1"
    tc = _train_config(cfg, "PROB")
    tc.lm_variant = variant
    samples = ds.lm_samples("train", cfg.views_per_shape, cfg.category or None)
    img, log = train_probabilistic(samples, enc, dec, tc)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "prob.ckpt")
    blocks = enc.named_arrays() + dec.named_arrays() + img.named_arrays()
    save_checkpoint(path, "PROB", blocks, cfg.echo())
    _write_log(os.path.join(cfg.out_dir, "train_prob_log.tsv"), log)
    print(f"train-prob: {len(samples)} pairs, {cfg.epochs} epochs, "
          f"final loss {log.final_loss:.6f} -> {path}")


def _model_from_checkpoint(path: str):
    ckpt = load_checkpoint(path)
    require_blocks(ckpt, "pe.", "dec.")
    enc = encoder_from_arrays(ckpt.blocks)
    dec = decoder_from_arrays(ckpt.blocks)
    if ckpt.stage == "AE":
        return ckpt, AutoencoderReconstructor(enc, dec)
    require_blocks(ckpt, "img.")
    img = image_encoder_from_arrays(ckpt.blocks)
    if ckpt.stage == "PROB":
        name = "prob"
    else:
        echo = storage.parse_config_text(ckpt.config_echo)
        name = VARIANT_LM[echo.lm_variant]
    return ckpt, ImageReconstructor(img, enc, dec, name=name)


def _cmd_eval(cfg: RunConfig):
    _require(cfg, "eval", "data_dir", "checkpoint", "out_dir")
    ds = Dataset.open(cfg.data_dir)
    ckpt, model = _model_from_checkpoint(cfg.checkpoint)
    entries = ds.entries("test", cfg.category or None)
    if ckpt.stage == "AE":
        samples = [EvalSample(ds.cloud(e), e.category, e.shape_id) for e in entries]
    else:
        samples = [EvalSample(ds.cloud(e), e.category, e.shape_id, ds.view(e, ai))
                   for e in entries for ai in ds.view_indices(cfg.eval_views_per_shape)]
    table = evaluate_model(model, samples, cfg.seed, apply_icp=cfg.icp)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, f"eval_{model.name}.tsv")
    _write_table(path, table)
    o = table.overall
    print(f"eval[{model.name}]: {o.count} samples, chamfer*100 {o.chamfer_scaled:.4f}, "
          f"emd*100 {o.emd_scaled:.4f} -> {path}")


def _cmd_reconstruct(cfg: RunConfig):
    _require(cfg, "reconstruct", "checkpoint", "image", "out_dir")
    ckpt, model = _model_from_checkpoint(cfg.checkpoint)
    if ckpt.stage == "AE":
        raise UsageError("reconstruct: needs an image-encoder checkpoint (LM or PROB)")
    view = read_pgm(cfg.image)
    z = model.latent(view)
    from .models import decode
    cloud = decode(model.decoder, z)
    os.makedirs(cfg.out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(cfg.image))[0]
    path = os.path.join(cfg.out_dir, f"recon_{stem}.ply")
    write_ply(cloud, path)
    print(f"reconstruct: {len(cloud)} points -> {path}")


def _cmd_diversity(cfg: RunConfig):
    _require(cfg, "diversity", "data_dir", "checkpoint", "out_dir")
    ds = Dataset.open(cfg.data_dir)
    ckpt, model = _model_from_checkpoint(cfg.checkpoint)
    if ckpt.stage != "PROB":
        raise UsageError("diversity: needs a probabilistic (PROB) checkpoint")
    entries = ds.entries("test", cfg.category or "chairlike")
    views, sids = [], []
    for e in entries:
        for ai in range(len(e.view_paths)):
            views.append(ds.view(e, ai))
            sids.append(e.shape_id)
    k = model.image_params.latent_dim
    rng = np.random.default_rng(cfg.seed)
    epsilons = [rng.standard_normal(k) for _ in range(cfg.samples)]
    report = diversity_sweep(model.image_params, model.decoder, views, epsilons, sids)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "diversity.tsv")
    write_tsv(path, ("azimuth_deg", "shape_id", "spread", "mean_sigma"),
              [(r.azimuth_deg, r.shape_id, r.spread, r.mean_sigma)
               for r in report.records])
    print(f"diversity: {len(report.records)} view records, "
          f"{cfg.samples} epsilon draws -> {path}")


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-ae": _cmd_train_ae,
    "train-lm": _cmd_train_lm,
    "train-prob": _cmd_train_prob,
    "eval": _cmd_eval,
    "reconstruct": _cmd_reconstruct,
    "diversity": _cmd_diversity,
}


def cli(argv=None) -> int:
    """Run one subcommand; returns the process exit code."""
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse -h
        return int(exc.code or 0)
    if not args.command:
        print(parser.format_usage(), file=sys.stderr)
        return 1
    try:
        cfg = _resolve_config(args)
        _COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"pcrecon {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
