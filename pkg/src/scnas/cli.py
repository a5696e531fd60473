"""Command-line driver.

Exit codes: 0 success, 2 configuration or artifact error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import genotype as G
from .config import ConfigError, RunConfig, load_config, parse_catalog
from .search_space import count_flops
from .tasks import TaskData, generate, write_task, z_normalize
from .train import (
    NumericalError,
    evaluate,
    format_dice,
    load_model,
    predictor,
    run_retrain,
    run_search,
    save_model,
    save_search_checkpoint,
)

log = logging.getLogger("scnas")

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _attach_log(out: Path) -> None:
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(message)s"))
    root = logging.getLogger("scnas")
    root.setLevel(logging.INFO)
    root.addHandler(handler)


def _config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("missing --config")
    return load_config(args.config, args.seed)


def prepare_task(cfg: RunConfig) -> TaskData:
    data = generate(cfg.task)
    for split in ("train", "val", "test"):
        setattr(data, split, [z_normalize(s) for s in getattr(data, split)])
    return data


def _load_genotype(path) -> G.Genotype:
    try:
        return G.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read genotype {path}: {exc}") from None


def cmd_search(args) -> int:
    out = _out_dir(args)
    _attach_log(out)
    cfg = _config(args)
    task = prepare_task(cfg)
    metrics = out / "metrics.log"
    task_id = cfg.task.name or cfg.task.kind
    res = run_search(cfg.network, cfg.search, task.train, seed=cfg.seed, catalog=cfg.catalog,
                     log_path=metrics, task_id=task_id)
    G.save(res.genotype, out / "genotype.txt")
    save_search_checkpoint(out / "alpha.npz", res.state)
    print(f"wrote {out / 'genotype.txt'}")
    return 0


def _retrain_and_report(cfg: RunConfig, g: G.Genotype, out: Path, header: str) -> int:
    task = prepare_task(cfg)
    spec = cfg.network.replace(nodes=g.num_intermediate)
    res = run_retrain(g, spec, cfg.retrain, task, seed=cfg.seed, log_path=out / "metrics.log")
    save_model(out / "model.npz", res.network)
    report = header + format_dice(res.dice)
    (out / "report.txt").write_text(report)
    sys.stdout.write(report)
    return 0


def cmd_retrain(args) -> int:
    out = _out_dir(args)
    _attach_log(out)
    cfg = _config(args)
    g = _load_genotype(args.genotype)
    return _retrain_and_report(cfg, g, out, "")


def cmd_transfer(args) -> int:
    out = _out_dir(args)
    _attach_log(out)
    cfg = _config(args)
    g = _load_genotype(args.genotype)
    spec, _ = G.transfer(g, cfg.network, cfg.task.channels, cfg.task.num_classes + 1, seed=cfg.seed)
    cfg.network = spec
    G.save(g, out / "genotype.txt")
    return _retrain_and_report(cfg, g, out, f"# transferred genotype {g.structural_hash()[:12]}\n")


def cmd_eval(args) -> int:
    cfg = _config(args)
    try:
        net = load_model(args.model)
    except OSError as exc:
        raise ConfigError(f"cannot read model {args.model}: {exc}") from None
    task = prepare_task(cfg)
    samples = getattr(task, args.split)
    dice = evaluate(predictor(net), samples, net.spec.num_classes, net.spec.patch)
    table = format_dice(dice)
    sys.stdout.write(table)
    if args.out:
        (_out_dir(args) / f"eval_{args.split}.txt").write_text(table)
    return 0


def cmd_flops(args) -> int:
    cfg = _config(args)
    g = _load_genotype(args.genotype)
    total = count_flops(cfg.network.replace(nodes=g.num_intermediate), g)
    print(f"flops={total}")
    return 0


def cmd_random_genotype(args) -> int:
    if args.config:
        cfg = load_config(args.config, args.seed)
        seed, catalog, nodes = cfg.seed, cfg.catalog, cfg.network.nodes
    else:
        if args.seed is None:
            raise ConfigError("missing field: seed")
        seed, nodes = args.seed, args.nodes
        catalog = parse_catalog(args.catalog)
    g = G.random_genotype(np.random.default_rng(seed), catalog, nodes)
    g.provenance.update({"seed": seed, "source": "random"})
    out = _out_dir(args)
    G.save(g, out / "genotype.txt")
    print(f"wrote {out / 'genotype.txt'}")
    return 0


def cmd_gen_task(args) -> int:
    cfg = _config(args)
    data = generate(cfg.task)
    manifest = write_task(_out_dir(args), data)
    print(f"wrote {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scnas", description="Stochastic cell search for segmentation networks")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        return p

    common(sub.add_parser("search", help="search cell structures")).set_defaults(func=cmd_search)
    p = common(sub.add_parser("retrain", help="retrain a genotype from scratch"))
    p.add_argument("--genotype", required=True)
    p.set_defaults(func=cmd_retrain)
    p = common(sub.add_parser("eval", help="per-class dice of a saved model"))
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)
    p = common(sub.add_parser("transfer", help="retrain a genotype on the config's task"))
    p.add_argument("--genotype", required=True)
    p.set_defaults(func=cmd_transfer)
    p = common(sub.add_parser("flops", help="FLOPs of a genotype at the configured patch"))
    p.add_argument("--genotype", required=True)
    p.set_defaults(func=cmd_flops)
    p = common(sub.add_parser("random-genotype", help="draw a uniformly random genotype"))
    p.add_argument("--catalog", default="full")
    p.add_argument("--nodes", type=int, default=4)
    p.set_defaults(func=cmd_random_genotype)
    common(sub.add_parser("gen-task", help="write a synthetic task to disk")).set_defaults(func=cmd_gen_task)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, G.GenotypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        for h in list(log.handlers):
            if isinstance(h, logging.FileHandler):
                log.removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
