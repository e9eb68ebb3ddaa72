"""Command-line entry point: ``vaedlm {gen-data,train,eval,diagnose,export-latent}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from .config import RunConfig, config_keys, load_run_config
from .pde import PdeSpec, generate_dataset, load_dataset, save_dataset, sidecar_path

log = logging.getLogger("vaedlm")

PDE_FLAGS = {"burgers": "burgers", "allen-cahn": "allen_cahn", "porous-medium": "porous_medium",
             "ks": "ks", "kdv": "kdv"}


class UsageError(Exception):
    pass


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("VDLM_THREADS")
    if env:
        return int(env)
    return _run_config(args).threads or 1


def _out(args, name) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _need(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(_need(args.config, "config file"))
    return RunConfig()


def cmd_gen_data(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    family = PDE_FLAGS.get(args.pde)
    if family is None:
        raise UsageError(f"--pde must be one of {sorted(PDE_FLAGS)}")
    base = _run_config(args).pde
    spec = base if base is not None and base.family == family else PdeSpec(family=family)
    out = Path(args.out)
    if args.out_dir and not out.is_absolute():
        out = _out(args, args.out)
    ds = generate_dataset(spec, args.samples, args.seed, threads=_threads(args))
    save_dataset(ds, out)
    sidecar_path(out).write_text(json.dumps(
        {"spec": spec.model_dump(), "n_samples": args.samples, "master_seed": args.seed},
        indent=2, sort_keys=True))
    print(f"wrote {out} ({args.samples} samples)")
    return 0


def cmd_train(args) -> int:
    from .trainer import train_loop

    run = _run_config(args)
    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.dataset is not None:
        overrides["dataset"] = args.dataset
    if args.variant is not None:
        overrides["variant"] = args.variant
    config = run.train.model_validate({**run.train.model_dump(), **overrides})
    if config.dataset is None:
        raise UsageError("no dataset given (train.dataset or --dataset)")
    ds = load_dataset(_need(config.dataset, "dataset"))
    out_dir = Path(args.out_dir or run.out_dir)
    _, _, rows = train_loop(config, ds, out_dir, resume_from=args.resume)
    final = float(rows[-1]["total"]) if rows else 0.0
    print(f"wrote {out_dir / 'checkpoint.bin'} after {config.iterations} iterations")
    return 0 if math.isfinite(final) else 1


def _check_hash(args, ckpt_meta_hash):
    if getattr(args, "config", None):
        run = _run_config(args)
        if run.train.hash() != ckpt_meta_hash:
            log.warning("checkpoint config hash %s does not match %s", ckpt_meta_hash, args.config)


def _load_model(args):
    from .trainer import load_state

    config, spec, params, _ = load_state(_need(args.checkpoint, "checkpoint"))
    _check_hash(args, config.hash())
    return config, spec, params


def cmd_eval(args) -> int:
    from .evaluator import OodSpec, evaluate

    config, spec, params = _load_model(args)
    ds = load_dataset(_need(args.dataset, "dataset"))
    scenarios = []
    if args.scenarios:
        scenarios = [OodSpec(**s) for s in json.loads(_need(args.scenarios, "scenario file").read_text())]
    elif args.config:
        scenarios = _run_config(args).scenarios
    table = evaluate((spec, params), ds, scenarios, n_samples=args.samples, label=config.variant)
    table.to_csv(_out(args, "error_table.csv"))
    _out(args, "error_table.txt").write_text(table.to_text())
    print(table.to_text(), end="")
    return 0


def cmd_diagnose(args) -> int:
    from .evaluator import diagnostics

    config, spec, params = _load_model(args)
    ds = load_dataset(_need(args.dataset, "dataset"))
    diag = diagnostics((spec, params), ds, config.flow, n_probe=args.n_probe)
    diag.write(_out(args, "diagnostics.csv"), _out(args, "diagnostics_samples.csv"))
    print(f"wrote {_out(args, 'diagnostics.csv')}")
    return 0


def cmd_export_latent(args) -> int:
    from .evaluator import export_latent_cloud, write_latent_csv

    _, spec, params = _load_model(args)
    ds = load_dataset(_need(args.dataset, "dataset"))
    ts = [float(v) for v in args.t.split(",")]
    rows = export_latent_cloud((spec, params), ds, ts, n_samples=args.samples)
    write_latent_csv(rows, spec.extrinsic, _out(args, "latent.csv"))
    print(f"wrote {_out(args, 'latent.csv')} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k}" for k in config_keys())
    p = argparse.ArgumentParser(
        prog="vaedlm", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="VAE with a dynamical latent manifold: data, training, evaluation.",
        epilog=f"recognised config keys (JSON, unknown keys rejected):\n{keys}")
    p.add_argument("--threads", type=int, default=None, help="worker cap (fallback: VDLM_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, epilog=p.epilog,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--out-dir", default=None if name in ("gen-data", "train") else ".")
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        return sp

    g = add("gen-data", cmd_gen_data, "generate a PDE dataset")
    g.add_argument("--pde", required=True)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = add("train", cmd_train, "train a model")
    t.add_argument("--dataset")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", choices=("vae", "vae_extended", "vae_dlm"))
    t.add_argument("--resume", help="checkpoint to continue from")

    for name, fn, help_ in (("eval", cmd_eval, "OOD error table"),
                            ("diagnose", cmd_diagnose, "metric / functional diagnostics"),
                            ("export-latent", cmd_export_latent, "latent point cloud CSV")):
        sp = add(name, fn, help_)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--dataset", required=True)
        if name == "eval":
            sp.add_argument("--scenarios", help="JSON list of OOD scenarios")
            sp.add_argument("--samples", type=int, default=30)
        elif name == "diagnose":
            sp.add_argument("--n-probe", type=int, default=32)
        else:
            sp.add_argument("--t", default="0,0.25,0.5,0.75,1")
            sp.add_argument("--samples", type=int, default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"invalid configuration ({exc.error_count()} errors):\n{exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
