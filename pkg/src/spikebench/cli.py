"""Command-line entry point: ``spikebench {train,eval,encode,ablate,energy,gradcheck}``.

Every run writes ``config.yaml`` (the effective configuration) first, then its
artifacts. Wall-clock times go only to ``run.log`` so every other file is a
pure function of the invocation. Exit status: 0 success, 2 configuration or
input errors, 3 numeric failures, 1 anything else from the library.
"""

from __future__ import annotations

import argparse
import datetime
import os
import sys
import time
from pathlib import Path

import yaml

from . import energy as en
from .ablation import ABLATION_MODES, ablate
from .config import RunConfig, build, dump_config, load_config, load_yaml
from .data import load_dataset
from .encoders import encode, raster_text, write_spike_train
from .errors import ConfigError, FormatError, NumericError, SpikeBenchError
from .gradcheck import layer_grad_check
from .network import SpikingTransformer, load_checkpoint, save_checkpoint
from .train import evaluate, train

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

ARCH_KEYS = ("D", "L", "img_size", "patch_size", "in_channels", "sps_conv_layers", "mlp_ratio", "conv_dims")
ARCH_RATE_KEYS = ("T", "B", "R_s", "R_b")


class RunLog:
    """Timestamped progress lines, kept out of every deterministic artifact."""

    def __init__(self, path: Path, echo: bool = True):
        self.path, self.echo = path, echo
        path.write_text("")

    def __call__(self, msg) -> None:
        stamp = datetime.datetime.now().isoformat(timespec="seconds")
        with self.path.open("a") as fh:
            fh.write(f"{stamp} {msg}\n")
        if self.echo:
            print(msg)


def _out_dir(args, cfg: dict) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("STEP_OUT") or cfg["output"]
    return Path(root) / args.command


def _setup(args) -> tuple[dict, RunConfig, Path, RunLog]:
    cfg = load_config(args.config, args.set or (), args.seed)
    run = build(cfg)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    return cfg, run, out, RunLog(out / "run.log", echo=not args.quiet)


def _epoch_line(s) -> str:
    val = "" if s.val_acc is None else f" val_acc={s.val_acc:.4f}"
    return f"epoch {s.epoch} lr={s.lr:.3g} loss={s.train_loss:.4f} acc={s.train_acc:.4f}{val} rate={s.mean_rate:.3f}"


def cmd_train(args) -> int:
    _, run, out, log = _setup(args)
    train_data, test_data = load_dataset(run.data)
    model = SpikingTransformer(run.model, seed=run.seed)
    t0 = time.perf_counter()
    result = train(model, train_data, run.train, val=test_data, log=lambda s: log(_epoch_line(s)))
    (out / "metrics.csv").write_text(result.metrics_csv())
    save_checkpoint(out / "checkpoint.ckpt", model, run.seed)
    log(f"wrote {out / 'metrics.csv'} and {out / 'checkpoint.ckpt'} in {time.perf_counter() - t0:.1f}s")
    return 0


def _rates_csv(rates: dict) -> str:
    return "layer,firing_rate\n" + "".join(f"{k},{v!r}\n" for k, v in rates.items())


def cmd_eval(args) -> int:
    _, run, out, log = _setup(args)
    model = load_checkpoint(args.checkpoint)
    _, test_data = load_dataset(run.data)
    res = evaluate(model, test_data, run.train.val_batch_size)
    (out / "eval.csv").write_text(f"accuracy,loss,n\n{res['accuracy']!r},{res['loss']!r},{len(test_data)}\n")
    (out / "rates.csv").write_text(_rates_csv(res["rates"]))
    log(f"accuracy={res['accuracy']:.4f} loss={res['loss']:.4f} on {len(test_data)} samples")
    return 0


def cmd_encode(args) -> int:
    _, run, out, log = _setup(args)
    _, test_data = load_dataset(run.data)
    sub = test_data.subset(slice(0, args.count))
    spikes = encode(sub.images, run.model.encoder, sub.ids)
    write_spike_train(out / "spikes.stepenc", spikes)
    (out / "raster.txt").write_text(raster_text(spikes[:, 0], args.raster_elements))
    log(f"{run.model.encoder.kind} encoding of {len(sub)} samples, shape {spikes.shape}")
    return 0


def cmd_ablate(args) -> int:
    _, run, out, log = _setup(args)
    mode = args.mode or run.ablation
    if mode not in ABLATION_MODES:
        raise ConfigError(f"ablation: unknown mode {mode!r}; expected one of {ABLATION_MODES}")
    train_data, test_data = load_dataset(run.data)
    table = ablate(mode, run.model, train_data, test_data, run.train, seed=run.seed,
                   log=lambda r: log(f"{r.variant}: {r.status} accuracy={r.accuracy}"))
    (out / "ablation.txt").write_text(table.to_text())
    (out / "ablation.csv").write_text(table.to_csv())
    if not args.quiet:
        print(table.to_text(), end="")
    return 0


def read_arch(path) -> tuple[dict, dict]:
    """``key: value`` architecture description -> (shape kwargs, rate symbols)."""
    try:
        tree = load_yaml(Path(path).read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read arch file {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse arch file {path}: {exc}") from None
    if not isinstance(tree, dict):
        raise ConfigError(f"arch file {path} must hold key: value lines")
    shape, rates = {}, {}
    for key, value in tree.items():
        if key in ARCH_KEYS:
            shape[key] = value
        elif key in ARCH_RATE_KEYS:
            rates[key] = value
        else:
            raise ConfigError(f"unknown arch key {key!r}; expected one of {ARCH_KEYS + ARCH_RATE_KEYS}")
    missing = [k for k in ARCH_RATE_KEYS if k not in rates]
    if missing:
        raise ConfigError(f"arch file {path} is missing {missing}")
    return shape, rates


def cmd_energy(args) -> int:
    _, run, out, log = _setup(args)
    if (args.arch is None) == (args.checkpoint is None):
        raise ConfigError("energy needs exactly one of an arch file or --checkpoint")
    if args.arch is not None:
        shape, rates = read_arch(args.arch)
        rows = en.with_rates(en.transformer_arch(**shape), **rates)
        kinds = en.KINDS
    else:
        model = load_checkpoint(args.checkpoint)
        _, test_data = load_dataset(run.data)
        evaluate(model, test_data.subset(slice(0, args.probe_samples)), run.train.val_batch_size)
        rows = en.measure_from_model(model, B=run.quant_bits, R_b=args.bit_rate)
        kinds = en.KINDS if args.bit_rate is not None else ("vanilla", "spiking")
    reports = [en.energy_total(rows, kind) for kind in kinds]
    table = en.reports_table(reports)
    (out / "energy.txt").write_text(table)
    (out / "energy.csv").write_text(en.reports_csv(reports))
    if not args.quiet:
        print(table, end="")
    log(f"energy for {len(rows)} rows, kinds {', '.join(kinds)}")
    return 0


def cmd_gradcheck(args) -> int:
    _, run, out, log = _setup(args)
    model = SpikingTransformer(run.model, seed=run.seed)
    errors = layer_grad_check(model, seed=run.seed, eps=args.eps)
    worst = max(errors.values())
    ok = worst < args.tol
    (out / "gradcheck.csv").write_text("layer,max_rel_error\n" + "".join(f"{k},{v!r}\n" for k, v in errors.items()))
    log(f"max relative error {worst:.3e} over {len(errors)} layers ({'pass' if ok else 'FAIL'} at < {args.tol:g})")
    return 0 if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--out", metavar="DIR", help="output directory (default: $STEP_OUT/<command> or output key)")
    common.add_argument("--seed", type=int, help="overrides the seed key")
    common.add_argument("-q", "--quiet", action="store_true", help="only write the log file")

    parser = argparse.ArgumentParser(prog="spikebench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model and write metrics.csv and a checkpoint")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("encode", parents=[common], help="dump encoded spike trains for test samples")
    p.add_argument("--count", type=int, default=4, help="number of test samples to encode")
    p.add_argument("--raster-elements", type=int, default=64, help="elements shown in raster.txt")
    p = sub.add_parser("ablate", parents=[common], help="run an ablation sweep")
    p.add_argument("--mode", choices=ABLATION_MODES, help="overrides the ablation key")
    p = sub.add_parser("energy", parents=[common], help="energy table from an arch file or a checkpoint")
    p.add_argument("arch", nargs="?", help="key: value architecture description")
    p.add_argument("--checkpoint")
    p.add_argument("--probe-samples", type=int, default=64, help="test samples used to measure firing rates")
    p.add_argument("--bit-rate", type=float, help="R_b for the quantized column in checkpoint mode")
    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every linear, conv and BN layer")
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "encode": cmd_encode, "ablate": cmd_ablate,
            "energy": cmd_energy, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SpikeBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
