"""Command-line entry point: ``dcnet <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime or numerical failure.
Every analysis writes a CSV and a JSON summary into ``--out``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

SUBCOMMANDS = ("train", "eval", "reconstruct", "mask-sweep", "contrast-sweep", "completion", "sigmas", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # shared so global flags work before or after the subcommand
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p = _Parser(add_help=False)
    p.add_argument("--config", default=d(None), help="key=value config file")
    p.add_argument("--seed", type=int, default=d(None))
    p.add_argument("--out", default=d("runs/out"), help="output directory")
    p.add_argument("--variant", default=d(None), help="model variant")
    p.add_argument("--deterministic", action="store_true", default=d(False), help="single-threaded BLAS")
    p.add_argument("--data", default=d(None), help="CIFAR-10 binary directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcnet", description="Deep continuous networks: training and analysis", parents=[_global_flags(True)])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    g = [_global_flags(False)]

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=g)

    p = add("train", "train a classifier")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    p = add("eval", "evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", type=int, help="use only the first N test images")

    p = add("reconstruct", "train the reconstruction decoder")
    p.add_argument("--encoder", help="classifier checkpoint to initialize the encoder")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = add("mask-sweep", "accuracy under central masks of growing size")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--masks", default="0,2,4,6,8,10,12,14,16")
    p.add_argument("--images", type=int)

    p = add("contrast-sweep", "accuracy and NFE under input contrast scaling")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", default="naive", choices=["naive", "scaled_T", "scaled_inputs_all_blocks"])
    p.add_argument("--c", default="1.0,0.5,0.25,0.1")
    p.add_argument("--images", type=int)

    p = add("completion", "feature-map discrepancy between intact and masked inputs")
    p.add_argument("--checkpoint", help="omit to analyse a freshly initialized model")
    p.add_argument("--mask", type=int, default=6)
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--samples", type=int, default=9)

    p = add("sigmas", "learned SRF scales per block")
    p.add_argument("--checkpoint", required=True)

    add("selftest", "run the built-in property checks")
    return parser


def _floats(text: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from exc


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _train_config(args, task: str = "classify"):
    from .config import ConfigError, apply_overrides, read_config
    from .train import TrainConfig

    cfg = TrainConfig(task=task)
    try:
        if args.config:
            cfg = apply_overrides(cfg, read_config(args.config))
        flags = {}
        if args.variant:
            flags["variant"] = args.variant
        if args.seed is not None:
            flags["seed"] = str(args.seed)
        if args.data:
            flags["data_dir"] = args.data
        for item in getattr(args, "set", []):
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            flags[k.strip().replace("-", "_")] = v.strip()
        cfg = apply_overrides(cfg, flags)
        if task == "reconstruct":
            cfg = apply_overrides(cfg, {"task": "reconstruct"})
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _data_dir(args) -> str:
    if args.data:
        return args.data
    if args.config:
        from .config import read_config

        return read_config(args.config).get("data_dir", "data/cifar-10-batches-bin")
    return "data/cifar-10-batches-bin"


def _test_set(args, limit):
    from .data import load_cifar10

    _, test = load_cifar10(_data_dir(args))
    return test.take(range(min(limit, len(test)))) if limit else test


def _cmd_train(args, task="classify") -> dict:
    from .checkpoint import load_checkpoint
    from .data import load_cifar10
    from .train import METRICS_NAME, train

    cfg = _train_config(args, task)
    data = load_cifar10(cfg.data_dir)
    enc = load_checkpoint(args.encoder).params if getattr(args, "encoder", None) else None
    rows = train(cfg, data, args.out, resume=getattr(args, "resume", None), encoder_params=enc)
    last = rows[-1] if rows else {}
    return {"epochs_run": len({r["epoch"] for r in rows}), "last": last, "metrics": os.path.join(args.out, METRICS_NAME)}


def _cmd_eval(args) -> dict:
    from .train import METRICS_HEADER, evaluate, metrics_row, model_from_checkpoint, write_csv

    model = model_from_checkpoint(args.checkpoint)
    task = model.spec.task
    ev = evaluate(model, _test_set(args, args.images), 128, task)
    write_csv(os.path.join(args.out, "eval.csv"), METRICS_HEADER, [metrics_row("", "test", ev.loss, ev.accuracy, ev.mse, ev.nfe)])
    return {"loss": ev.loss, "accuracy": ev.accuracy, "mse": ev.mse, "nfe": ev.nfe, "images": ev.n}


def _cmd_mask_sweep(args) -> dict:
    from .analysis import masked_accuracy_sweep
    from .train import model_from_checkpoint, write_csv

    ns = [int(v) for v in _floats(args.masks, "--masks")]
    rows = masked_accuracy_sweep(model_from_checkpoint(args.checkpoint), _test_set(args, args.images), ns)
    write_csv(os.path.join(args.out, "mask_sweep.csv"), ["n", "accuracy", "images"], rows)
    return {"accuracy_by_mask": {r["n"]: float(r["accuracy"]) for r in rows}}


def _cmd_contrast(args) -> dict:
    from .analysis import contrast_sweep
    from .train import model_from_checkpoint, write_csv

    cs = _floats(args.c, "--c")
    if any(c <= 0 for c in cs):
        raise UsageError("--c: contrast values must be positive")
    rows = contrast_sweep(model_from_checkpoint(args.checkpoint), _test_set(args, args.images), cs, args.mode)
    header = ["c", "mode", "accuracy", "nfe_block1", "nfe_total", "error"]
    write_csv(os.path.join(args.out, "contrast_sweep.csv"), header, rows)
    return {"mode": args.mode, "rows": rows}


def _cmd_completion(args) -> dict:
    from .analysis import MaskSpec, pattern_completion
    from .model import ModelSpec, build_model
    from .train import model_from_checkpoint, write_csv

    if args.checkpoint:
        model, untrained = model_from_checkpoint(args.checkpoint), False
    else:
        model, untrained = build_model(ModelSpec(args.variant or "dcn_ode"), args.seed or 0), True
    if not 0 <= args.mask <= 32:
        raise UsageError("--mask must lie in [0, 32]")
    rep = pattern_completion(model, _test_set(args, args.images), MaskSpec(args.mask), args.samples, untrained=untrained)
    write_csv(os.path.join(args.out, "completion.csv"), ["t", "mean_D", "std_D"], rep.rows())
    return {
        "images": rep.count,
        "mask": args.mask,
        "D_start": float(rep.mean[0]),
        "D_end": float(rep.mean[-1]),
        "reduced": bool(rep.mean[-1] < rep.mean[0]),
        "untrained": untrained,
    }


def _cmd_sigmas(args) -> dict:
    from .analysis import extract_sigmas
    from .train import model_from_checkpoint, write_csv

    rep = extract_sigmas(model_from_checkpoint(args.checkpoint))
    write_csv(os.path.join(args.out, "sigmas.csv"), ["block", "layer", "t", "index", "sigma"], rep.rows)
    return rep.summary


def _dispatch(args) -> tuple[int, dict | None]:
    cmd = args.command
    if cmd == "selftest":
        from .selftest import run_selftest

        ok = run_selftest()
        return (EXIT_OK if ok else EXIT_RUNTIME), {"passed": ok}
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "reconstruct": lambda a: _cmd_train(a, "reconstruct"),
        "mask-sweep": _cmd_mask_sweep,
        "contrast-sweep": _cmd_contrast,
        "completion": _cmd_completion,
        "sigmas": _cmd_sigmas,
    }
    return EXIT_OK, handlers[cmd](args)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.deterministic:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"
    try:
        if args.command != "selftest":
            os.makedirs(args.out, exist_ok=True)
        code, summary = _dispatch(args)
        if summary is not None and args.command != "selftest":
            _write_json(os.path.join(args.out, f"{args.command.replace('-', '_')}.json"), summary)
        return code
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # runtime and numerical failures
        print(f"dcnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
