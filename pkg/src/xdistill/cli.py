"""Command-line front end: seeded, config-driven commands chaining the
library into the experimental protocol. Every command writes its CSV
reports, rendered PNG figures, and a resolved copy of its configuration
into the output directory; outputs are byte-reproducible for a fixed
(config, seed) pair.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import reports
from .config import RunConfig, load_config
from .data import draw_mixup_lambda, mixup, one_hot, random_crop
from .distill import compress_network
from .errors import ConfigError, XDistillError
from .network import WeightMask, accuracy, count_params_flops, load_model, save_model
from .theory import theorem_bound
from .trainer import train_teacher

MU_GRID = tuple(round(0.1 * i, 1) for i in range(11))


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_teacher(cfg: RunConfig, args):
    path = getattr(args, "teacher", None) or cfg["distill"]["teacher_model"]
    if not path:
        raise ConfigError("no teacher model: set [distill] teacher_model or --teacher")
    return load_model(path)


def _kshot_batch(cfg: RunConfig, train, seed: int):
    """K-shot batch for one run seed, with optional crop/mixup augmentation."""
    d = cfg["distill"]
    shot = cfg.sample_kshot(train, seed)
    images = shot.images
    labels = one_hot(shot.labels, shot.num_classes)
    if d["crop_pad"] > 0:
        images = random_crop(images, d["crop_pad"], seed)
    if d["mixup"]:
        lam = draw_mixup_lambda(seed)
        images, labels = mixup(images, labels, lam, seed)
    return SimpleNamespace(images=images, labels=labels, num_classes=shot.num_classes)


def _compress_one(cfg: RunConfig, teacher, train, seed: int, **overrides):
    batch = _kshot_batch(cfg, train, seed)
    dcfg = cfg.distill_config(seed, **overrides)
    return compress_network(teacher, batch, dcfg, cfg.prune_scheme())


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(args)
    train, holdout = cfg.load_datasets()
    seed = int(args.seed) if args.seed is not None else cfg["teacher"]["seed"]
    net, log = train_teacher(cfg.layer_specs(), train, cfg.train_config(seed))
    save_model(net, out / "teacher.xdnc")
    reports.write_csv(out / "teacher_train_log.csv", "train-log",
                      ["iteration", "loss", "train_acc"], log)
    reports.fig_training_curve(log, out / "teacher_train_log.png")
    top1 = accuracy(net, holdout.images, holdout.labels)
    reports.write_csv(out / "teacher_eval.csv", "teacher-eval",
                      ["top1_holdout", "iterations"], [(top1, len(log))])
    cfg.write_resolved(out / "resolved.cfg")
    print(f"teacher saved to {out / 'teacher.xdnc'} holdout_top1={top1:.4f}")
    return 0


def cmd_compress(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(args)
    train, holdout = cfg.load_datasets()
    teacher = _load_teacher(cfg, args)
    summary = []
    for seed in cfg.seeds(args.seed):
        student, mask, report = _compress_one(cfg, teacher, train, seed)
        save_model(student, out / f"student_seed{seed}.xdnc")
        reports.write_csv(
            out / f"layers_seed{seed}.csv", "distill-layers",
            ["layer", "iter", "loss", "sparsity", "lr"], report.iter_rows,
        )
        reports.fig_layer_losses(report.iter_rows, out / f"layers_seed{seed}.png")
        top1 = accuracy(student, holdout.images, holdout.labels)
        summary.append((seed, cfg["distill"]["mode"], mask.sparsity(), top1))
    reports.write_csv(out / "summary.csv", "compress-summary",
                      ["seed", "mode", "sparsity", "top1_holdout"], summary)
    mean, std = reports.mean_std([row[3] for row in summary])
    reports.write_csv(out / "aggregate.csv", "compress-aggregate",
                      ["mode", "runs", "top1_mean", "top1_std"],
                      [(cfg["distill"]["mode"], len(summary), mean, std)])
    cfg.write_resolved(out / "resolved.cfg")
    print(f"compressed {len(summary)} run(s): top1 {mean:.4f} +/- {std:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(args)
    _, holdout = cfg.load_datasets()
    d = cfg["data"]
    input_shape = (d["channels"], d["height"], d["width"])
    want_top5 = d["classes"] >= 5
    rows = []
    for path in args.model:
        net = load_model(path)
        mask = WeightMask(tuple((w != 0.0).astype(float) for w in net.weights))
        params, flops = count_params_flops(net, input_shape, mask)
        top1 = accuracy(net, holdout.images, holdout.labels)
        top5 = accuracy(net, holdout.images, holdout.labels, topk=5) if want_top5 else ""
        rows.append((Path(path).stem, top1, top5, params, flops))
    mean, std = reports.mean_std([r[1] for r in rows])
    reports.write_csv(out / "evaluate.csv", "evaluate",
                      ["model", "top1", "top5", "params", "flops"], rows)
    reports.write_csv(out / "evaluate_aggregate.csv", "evaluate-aggregate",
                      ["models", "top1_mean", "top1_std"], [(len(rows), mean, std)])
    reports.fig_eval_bars([r[0] for r in rows], [r[1] for r in rows],
                          [0.0] * len(rows), out / "evaluate.png")
    cfg.write_resolved(out / "resolved.cfg")
    print(f"evaluated {len(rows)} model(s): top1 {mean:.4f} +/- {std:.4f}")
    return 0


def cmd_verify_bounds(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(args)
    _, holdout = cfg.load_datasets()
    teacher = load_model(args.teacher)
    mu = args.mu if args.mu is not None else cfg["distill"]["mu"]
    all_ok = True
    for path in args.student:
        student = load_model(path)
        report = theorem_bound(teacher, student, mu, holdout.images, holdout.labels)
        stem = Path(path).stem
        rows = [
            (row.position, row.norm_t, row.norm_s, row.c_mu, row.objective_mean,
             row.objective_max, row.est_error, row.eps_t, row.eps_s)
            for row in report.layers
        ]
        reports.write_csv(
            out / f"bound_{stem}.csv", "bound-report",
            ["layer", "norm_t", "norm_s", "c_mu", "objective_mean",
             "objective_max", "est_error", "eps_t", "eps_s"], rows,
        )
        reports.write_csv(
            out / f"bound_{stem}_global.csv", "bound-global",
            ["mu", "lipschitz", "lhs_mean", "rhs_mean", "min_slack",
             "mean_slack", "satisfied"],
            [(report.mu, report.lipschitz, report.lhs_mean, report.rhs_mean,
              report.min_slack, report.mean_slack, report.satisfied)],
        )
        reports.fig_bound_report(report, out / f"bound_{stem}.png")
        all_ok = all_ok and report.satisfied
        print(f"{stem}: gap {report.lhs_mean:.4g} <= bound {report.rhs_mean:.4g} "
              f"satisfied={report.satisfied}")
    cfg.write_resolved(out / "resolved.cfg")
    return 0 if all_ok else 1


def _cross_positions(cfg: RunConfig) -> list[int]:
    positions = list(cfg["ablate"]["positions"])
    if not positions:
        positions = list(range(1, len(cfg["model"]["conv_channels"]) + 1))
    return positions


def cmd_ablate_cross_layers(args) -> int:
    cfg = load_config(args.config)
    if cfg["distill"]["mode"] == "nc":
        raise ConfigError("ablate-cross-layers needs mode cross or soft")
    out = _outdir(args)
    train, holdout = cfg.load_datasets()
    teacher = _load_teacher(cfg, args)
    positions = _cross_positions(cfg)
    subsets = [(p,) for p in positions]
    subsets += [tuple(positions[i : i + 2]) for i in range(len(positions) - 1)]
    subsets += [tuple(positions[i : i + 3]) for i in range(len(positions) - 2)]
    rows = []
    for subset in subsets:
        accs = []
        for seed in cfg.seeds(args.seed):
            student, _, _ = _compress_one(cfg, teacher, train, seed,
                                          cross_layers=frozenset(subset))
            accs.append(accuracy(student, holdout.images, holdout.labels))
        mean, std = reports.mean_std(accs)
        label = "+".join(f"C{p}" for p in subset)
        rows.append((label, len(subset), mean, std))
    reports.write_csv(out / "ablate.csv", "ablate-cross-layers",
                      ["positions", "size", "top1_mean", "top1_std"], rows)
    reports.fig_ablate_bars([r[0] for r in rows], [r[2] for r in rows],
                            [r[3] for r in rows], out / "ablate.png")
    cfg.write_resolved(out / "resolved.cfg")
    print(f"ablation over {len(rows)} cross-layer subsets written to {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(args)
    mode = cfg["distill"]["mode"]
    if mode == "nc":
        raise ConfigError("sweep needs mode cross (mu grid) or soft (alpha/beta grid)")
    train, holdout = cfg.load_datasets()
    teacher = _load_teacher(cfg, args)

    def run_point(**overrides):
        accs = []
        for seed in cfg.seeds(args.seed):
            student, _, _ = _compress_one(cfg, teacher, train, seed, **overrides)
            accs.append(accuracy(student, holdout.images, holdout.labels))
        return reports.mean_std(accs)

    if mode == "cross":
        rows = []
        for mu in MU_GRID:
            mean, std = run_point(mu=mu)
            rows.append((mu, mean, std))
        reports.write_csv(out / "sweep.csv", "sweep-mu",
                          ["mu", "top1_mean", "top1_std"], rows)
        reports.fig_sweep_mu([r[0] for r in rows], [r[1] for r in rows],
                             [r[2] for r in rows], out / "sweep.png")
    else:
        rows = []
        grid = np.zeros((len(MU_GRID), len(MU_GRID)))
        for i, alpha in enumerate(MU_GRID):
            for j, beta in enumerate(MU_GRID):
                mean, std = run_point(alpha=alpha, beta=beta)
                rows.append((alpha, beta, mean, std))
                grid[i, j] = mean
        reports.write_csv(out / "sweep.csv", "sweep-alpha-beta",
                          ["alpha", "beta", "top1_mean", "top1_std"], rows)
        reports.fig_sweep_alpha_beta(MU_GRID, MU_GRID, grid, out / "sweep.png")
    cfg.write_resolved(out / "resolved.cfg")
    print(f"sweep ({mode}) written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xdistill",
        description="Few-shot network compression by layer-wise cross distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, teacher_flag=False):
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", default=None, help="override the [run] seed list")
        p.add_argument("--out", required=True, help="output directory")
        if teacher_flag:
            p.add_argument("--teacher", default=None, help="teacher model file")

    p = sub.add_parser("train-teacher", help="train and save a teacher model")
    common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("compress", help="run layer-wise compression per seed")
    common(p, teacher_flag=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("evaluate", help="accuracy, params and FLOPs of models")
    common(p)
    p.add_argument("--model", nargs="+", required=True, help="model file(s)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify-bounds", help="emit cross-entropy gap bound reports")
    common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", nargs="+", required=True)
    p.add_argument("--mu", type=float, default=None)
    p.set_defaults(func=cmd_verify_bounds)

    p = sub.add_parser("ablate-cross-layers", help="sweep cross-connection positions")
    common(p, teacher_flag=True)
    p.set_defaults(func=cmd_ablate_cross_layers)

    p = sub.add_parser("sweep", help="grid over mu or (alpha, beta)")
    common(p, teacher_flag=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except XDistillError as exc:
        print(f"xdistill-error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"xdistill-error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
