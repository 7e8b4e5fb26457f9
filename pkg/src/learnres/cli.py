"""Command-line entry point: ``learnres {generate,train,evaluate,check,sweep}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import predictor as P
from . import simulator as S
from . import verify as V
from .losses import LossWeights
from .scale import PRESETS

log = logging.getLogger("learnres")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_CHECK_FAILED = 1


def run_tag(tc: S.TrainConfig) -> str:
    tag = tc.form
    if not tc.lpf:
        tag += "_nolpf"
    if tc.lambdas.scale == 0 and tc.lambdas.dist == 0:
        tag += "_nolosses"
    return tag


def apply_overrides(cfg: C.ExperimentConfig, args) -> C.ExperimentConfig:
    r = dataclasses.replace
    if getattr(args, "seed", None) is not None:
        cfg = C.with_seed(cfg, args.seed)
    if getattr(args, "out", None):
        cfg = r(cfg, out_dir=args.out)
    if getattr(args, "preset", None):
        cfg = C.resolve_preset(cfg, args.preset)
    tc = cfg.train
    if getattr(args, "form", None):
        tc = r(tc, form=args.form)
    if getattr(args, "no_lpf", False):
        tc = r(tc, lpf=False)
    if getattr(args, "no_elastic_losses", False):
        tc = r(tc, lambdas=LossWeights(tc.lambdas.cls, tc.lambdas.loc, 0.0, 0.0))
    if getattr(args, "iters", None):
        tc = r(tc, iters=args.iters)
    cfg = r(cfg, train=tc)
    ck = cfg.check
    if getattr(args, "tol", None) is not None:
        ck = r(ck, tol=args.tol)
    if getattr(args, "points", None) is not None:
        ck = r(ck, points=args.points)
    if getattr(args, "inject_fault", None):
        ck = r(ck, inject_fault=args.inject_fault)
    return r(cfg, check=ck)


def load_config(args) -> C.ExperimentConfig:
    cfg = C.load(args.config) if args.config else C.from_dict({})
    try:
        return apply_overrides(cfg, args)
    except ValueError as exc:
        raise C.ConfigError(str(exc)) from None


def _prepare_out(cfg: C.ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    C.dump(cfg, out / "config.resolved.yaml")
    return out


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- commands ---------------------------------------------------------------


def cmd_generate(cfg: C.ExperimentConfig) -> int:
    _prepare_out(cfg)
    scenes = S.generate_dataset(cfg.data.n_scenes, cfg.data.size, cfg.data.seed)
    path = cfg.dataset_path
    path.parent.mkdir(parents=True, exist_ok=True)
    S.save_dataset(path, scenes)
    areas = np.concatenate([s.normalized_areas() for s in scenes])
    counts = [len(s.objects) for s in scenes]
    print(f"wrote {len(scenes)} scenes to {path}")
    print(f"objects: {sum(counts)} total, {np.mean(counts):.2f} per scene")
    q = np.quantile(areas, [0.05, 0.5, 0.95])
    print(f"normalized area: mean {areas.mean():.4f}, p5 {q[0]:.4f}, median {q[1]:.4f}, p95 {q[2]:.4f}")
    return 0


def _load_dataset(cfg):
    path = cfg.dataset_path
    if not path.exists():
        raise C.ConfigError(f"data.file: dataset {path} not found; run `learnres generate` first")
    return S.load_dataset(path)


def train_and_write(cfg: C.ExperimentConfig, out: Path, dataset=None) -> tuple[S.TrainReport, dict]:
    dataset = _load_dataset(cfg) if dataset is None else dataset
    tag = run_tag(cfg.train)
    try:
        report = S.train(dataset, cfg.predictor, None, cfg.scale, cfg.oracle, cfg.train)
    except S.TrainingDiverged as exc:
        exc.report.write_csv(out / f"report_{tag}.csv")
        exc.report.write_boundaries_csv(out / f"boundaries_{tag}.csv")
        raise
    report.write_csv(out / f"report_{tag}.csv")
    report.write_boundaries_csv(out / f"boundaries_{tag}.csv")
    metrics = S.evaluate(dataset, report.params, cfg.predictor, cfg.scale, cfg.oracle)
    metrics["boundary_total_variation"] = report.boundary_total_variation()
    metrics["tau_min"], metrics["tau_max"] = cfg.scale.tau_min, cfg.scale.tau_max
    _write_json(out / f"phi_histogram_{tag}.json", metrics)
    P.save_checkpoint(out / f"checkpoint_{tag}.bin", cfg.predictor, report.params,
                      extra={"tau_min": cfg.scale.tau_min, "tau_max": cfg.scale.tau_max,
                             "form": cfg.train.form, "iters": cfg.train.iters},
                      tail=np.array([float(report.beta.alpha), float(report.beta.beta)]))
    return report, metrics


def cmd_train(cfg: C.ExperimentConfig) -> int:
    out = _prepare_out(cfg)
    try:
        report, m = train_and_write(cfg, out)
    except S.TrainingDiverged as exc:
        print(f"training diverged: {exc}; partial report flushed to {out}", file=sys.stderr)
        return EXIT_DIVERGED
    last = report.rows[-1]
    print(f"tau_max={cfg.scale.tau_max} form={cfg.train.form} lpf={cfg.train.lpf} "
          f"iters={cfg.train.iters} tag={run_tag(cfg.train)}")
    print(f"final boundaries [{last['boundary_lower']:.4f}, {last['boundary_upper']:.4f}], "
          f"beta=({float(report.beta.alpha):.3f}, {float(report.beta.beta):.3f})")
    print(f"phi mean {m['phi_mean']:.4f} std {m['phi_std']:.4f}, "
          f"pearson(mean size, phi) {m['pearson_size_phi']:.4f}")
    return 0


def cmd_evaluate(cfg: C.ExperimentConfig, checkpoint: str | None) -> int:
    out = _prepare_out(cfg)
    tag = run_tag(cfg.train)
    ckpt = Path(checkpoint) if checkpoint else out / f"checkpoint_{tag}.bin"
    if not ckpt.exists():
        raise C.ConfigError(f"checkpoint {ckpt} not found; run `learnres train` first")
    pcfg, params, _, _ = P.load_checkpoint(ckpt)
    metrics = S.evaluate(_load_dataset(cfg), params, pcfg, cfg.scale, cfg.oracle)
    _write_json(out / f"metrics_{tag}.json", metrics)
    print(json.dumps({k: metrics[k] for k in ("n_scenes", "phi_mean", "phi_std", "pearson_size_phi",
                                              "mean_oracle_loss")}, sort_keys=True))
    for b in metrics["buckets"]:
        print(f"  size [{b['size_lo']:.4f}, {b['size_hi']:.4f}] n={b['n']} mean phi {b['mean_phi']:.4f}")
    return 0


def cmd_check(cfg: C.ExperimentConfig) -> int:
    _prepare_out(cfg)
    results = V.run_all(cfg.check)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed (grad tol {cfg.check.tol:g})")
    return EXIT_CHECK_FAILED if failed else 0


SWEEP_COLUMNS = ("preset", "tau_min", "tau_max", "phi_mean", "phi_std", "pearson_size_phi",
                 "mean_oracle_loss", "boundary_lower", "boundary_upper")


def cmd_sweep(cfg: C.ExperimentConfig) -> int:
    root = _prepare_out(cfg)
    dataset = S.generate_dataset(cfg.data.n_scenes, cfg.data.size, cfg.data.seed)
    rows = []
    for name in PRESETS:
        sub = C.resolve_preset(dataclasses.replace(cfg, out_dir=str(root / f"preset_{name}")), name)
        out = _prepare_out(sub)
        try:
            report, m = train_and_write(sub, out, dataset)
        except S.TrainingDiverged as exc:
            print(f"preset {name}: diverged ({exc})", file=sys.stderr)
            return EXIT_DIVERGED
        last = report.rows[-1]
        rows.append({"preset": name, "tau_min": sub.scale.tau_min, "tau_max": sub.scale.tau_max,
                     "phi_mean": m["phi_mean"], "phi_std": m["phi_std"],
                     "pearson_size_phi": m["pearson_size_phi"], "mean_oracle_loss": m["mean_oracle_loss"],
                     "boundary_lower": last["boundary_lower"], "boundary_upper": last["boundary_upper"]})
        print(f"preset {name} tau_max={sub.scale.tau_max}: phi mean {m['phi_mean']:.4f} "
              f"std {m['phi_std']:.4f} pearson {m['pearson_size_phi']:.4f}")
    with open(root / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\r\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return 0


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="learnres", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment YAML file (defaults apply when omitted)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--preset", choices=sorted(PRESETS, key=PRESETS.get), type=str.upper,
                       help="tau_max preset")
        return p

    def training(p):
        p.add_argument("--form", choices=["likelihood", "plain"])
        p.add_argument("--no-lpf", action="store_true", help="disable the xi-gated low-pass filter")
        p.add_argument("--no-elastic-losses", action="store_true",
                       help="zero the scale and distribution loss weights")
        p.add_argument("--iters", type=int, help="override train.iters")
        return p

    common(sub.add_parser("generate", help="write a synthetic dataset"))
    training(common(sub.add_parser("train", help="train predictor and Beta parameters")))
    ev = training(common(sub.add_parser("evaluate", help="evaluate a checkpoint")))
    ev.add_argument("--checkpoint", help="checkpoint path (default: from the run tag)")
    ck = common(sub.add_parser("check", help="run the verification suite"))
    ck.add_argument("--tol", type=float, help="gradient relative-error tolerance")
    ck.add_argument("--points", type=int, help="random points per gradient check")
    ck.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    training(common(sub.add_parser("sweep", help="train every tau_max preset S..H")))
    return parser


def main(argv=None) -> int:
    level = os.environ.get("LEARNRES_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        log.info("command %s, out_dir %s", args.command, cfg.out_dir)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint)
        if args.command == "check":
            return cmd_check(cfg)
        return cmd_sweep(cfg)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
