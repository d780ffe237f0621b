"""Command-line front end: search, baseline, sweeps and analysis reports."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, SearchConfig, config_from_dict, load_config, preset_config
from .data import DataFormatError
from .genotype import GenotypeError, deserialize, instantiate, serialize
from .metrics import accuracy, count_params, feature_map_similarity
from .search import (NumericAbort, SearchRun, load_dataset, run_darts_sparse_baseline,
                     run_dass)
from .sparse import MASKED


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags by default; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_args(p: _Parser):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", help="named preset (desk, micro, full)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--ratio", type=float, help="override the pruning ratio")
    p.add_argument("--data-dir", help="dataset directory (overrides $DASS_DATA_DIR)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field (repeatable)")


def _build_config(args) -> SearchConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = preset_config(args.preset)
    else:
        cfg = SearchConfig().validate()
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.ratio is not None:
        overrides["pruning_ratio"] = args.ratio
    if getattr(args, "data_dir", None):
        overrides["data_dir"] = args.data_dir
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[key] = value
    if overrides:
        from dataclasses import asdict
        merged = asdict(cfg)
        merged.update(overrides)
        cfg = config_from_dict(merged)
    return cfg


def _cmd_search(args, method: str) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    if args.resume:
        run = SearchRun.resume(cfg, args.resume, out_dir=out)
        run.run()
    else:
        runner = run_dass if method == "dass" else run_darts_sparse_baseline
        run = runner(cfg, out_dir=out)
    rep = run.report
    print(f"{method}: ratio={cfg.pruning_ratio} seed={cfg.seed} "
          f"top1={rep.top1_accuracy:.2f}% nonzero={rep.params_nonzero} "
          f"out={out}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _build_config(args)
    run = SearchRun.resume(cfg, args.checkpoint, out_dir=args.out)
    if run.phase not in ("finetune", "done"):
        raise ConfigError(f"checkpoint is in phase {run.phase!r}; finetune needs a "
                          f"post-prune checkpoint")
    run.run()
    print(f"finetune: top1={run.report.top1_accuracy:.2f}% out={args.out}")
    return 0


def _cmd_derive(args) -> int:
    cfg = _build_config(args)
    run = SearchRun.resume(cfg, args.checkpoint)
    genotype = run.genotype if run.genotype is not None else run.derive_genotype()
    Path(args.out).write_text(serialize(genotype))
    print(f"derive: wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _build_config(args)
    run = SearchRun.resume(cfg, args.checkpoint)
    genotype = deserialize(Path(args.genotype).read_text())
    if run.genotype == genotype and run.derived is not None:
        net = run.derived
    else:
        net = instantiate(genotype, np.random.default_rng(0), n_cells=cfg.n_cells,
                          init_channels=cfg.init_channels, n_classes=run.data.n_classes,
                          double_sep_conv=cfg.double_sep_conv, inherit_from=run.supernet)
    split = args.split
    x, y = {"train": (run.data.train_x, run.data.train_y),
            "val": (run.data.val_x, run.data.val_y),
            "test": (run.data.test_x, run.data.test_y)}[split]
    acc = accuracy(net, x, y, MASKED)
    total, nonzero = count_params(net)
    print(json.dumps({"split": split, "top1_accuracy": acc,
                      "params_total": total, "params_nonzero": nonzero}))
    return 0


def _cmd_compare_features(args) -> int:
    cfg = _build_config(args)
    run_a = SearchRun.resume(cfg, args.a)
    run_b = SearchRun.resume(cfg, args.b)
    net_a = run_a.derived if run_a.derived is not None else run_a.supernet
    net_b = run_b.derived if run_b.derived is not None else run_b.supernet
    probe = run_a.data.test_x[:min(128, len(run_a.data.test_y))]
    taus = feature_map_similarity(net_a, net_b, probe, MASKED, MASKED)
    lines = ["layer,tau"] + [f"{i},{t!r}" for i, t in enumerate(taus)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"compare-features: wrote {args.out}")
    else:
        print(text, end="")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _build_config(args)
    ratios = [float(r) for r in args.ratios.split(",") if r]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for ratio in ratios:
        acc_dass, acc_base, nonzeros = [], [], []
        for seed in seeds:
            from dataclasses import asdict
            merged = asdict(cfg)
            merged.update({"pruning_ratio": ratio, "seed": seed})
            rcfg = config_from_dict(merged)
            tag = f"ratio{ratio:g}_seed{seed}"
            data = load_dataset(rcfg)
            d_run = run_dass(rcfg, data=data, out_dir=out / f"dass_{tag}")
            b_run = run_darts_sparse_baseline(rcfg, data=data,
                                              out_dir=out / f"baseline_{tag}")
            acc_dass.append(d_run.report.top1_accuracy)
            acc_base.append(b_run.report.top1_accuracy)
            nonzeros.append(d_run.report.params_nonzero)
            print(f"sweep ratio={ratio} seed={seed}: "
                  f"dass={d_run.report.top1_accuracy:.2f}% "
                  f"baseline={b_run.report.top1_accuracy:.2f}%")
        rows.append((ratio, float(np.mean(acc_dass)), float(np.mean(acc_base)),
                     int(round(float(np.mean(nonzeros))))))
    lines = ["ratio,accuracy_dass,accuracy_baseline,nonzero_params"]
    lines += [f"{r:g},{a!r},{b!r},{nz}" for r, a, b, nz in rows]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    print(f"sweep: wrote {out / 'sweep.csv'}")
    return 0


def _cmd_report(args) -> int:
    path = Path(args.run) / "report.json"
    if not path.exists():
        raise ConfigError(f"no report.json under {args.run}")
    rep = json.loads(path.read_text())
    print(f"top1_accuracy:      {rep['top1_accuracy']:.2f}%")
    print(f"params_total:       {rep['params_total']}")
    print(f"params_nonzero:     {rep['params_nonzero']}")
    print(f"compression_rate:   {rep['compression_rate']:.2f}x")
    print(f"nid:                {rep['nid']:.3f}")
    print(f"generalization_gap: {rep['generalization_gap']:.2f}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="dass", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, method in (("search", "dass"), ("baseline", "baseline")):
        p = sub.add_parser(name, help=f"run the {method} pipeline end to end")
        _add_config_args(p)
        p.add_argument("--out", default=f"dass_out/{name}", help="output directory")
        p.add_argument("--resume", help="resume from a phase checkpoint")
        p.set_defaults(fn=lambda a, m=method: _cmd_search(a, m))

    p = sub.add_parser("finetune", help="run the fine-tuning phase from a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="dass_out/finetune")
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("derive", help="extract the genotype from a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="genotype.json")
    p.set_defaults(fn=_cmd_derive)

    p = sub.add_parser("eval", help="evaluate a genotype with checkpoint weights")
    _add_config_args(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("compare-features",
                       help="per-layer feature-map similarity of two checkpoints")
    _add_config_args(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.set_defaults(fn=_cmd_compare_features)

    p = sub.add_parser("sweep", help="paired search/baseline sweep over pruning ratios")
    _add_config_args(p)
    p.add_argument("--ratios", default="0.9,0.95,0.99")
    p.add_argument("--seeds", default="1")
    p.add_argument("--out", default="dass_out/sweep")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("report", help="print the metrics report of a finished run")
    p.add_argument("--run", required=True, help="run output directory")
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit as e:
        return int(e.code or 0)
    except (ConfigError, GenotypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (CheckpointError, DataFormatError, NumericAbort, RuntimeError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
