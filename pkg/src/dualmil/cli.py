"""Command-line front end: generate, train, eval, gradcheck, sweep.

Every option can also come from a flat ``key=value`` config file given by
``--config``; command-line flags win over the file. Keys are the long flag
names without dashes (``lambda2=0.5``, ``class-mix=1,0,0,0``).

Exit codes: 0 success, 1 usage error (including missing input files),
2 data error (malformed or inconsistent inputs), 3 gradient check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import evaluation as ev
from .experiments import (DEFAULT_RATIOS, gradcheck_suite, run_sweep, sweep_csv,
                          worst_per_tensor)
from .model import ModelParams, Variant
from .synthdata import (DatasetParseError, GenConfig, GenerationError, apply_full_ratio,
                        class_counts, generate, read_dataset, write_dataset)
from .training import (CheckpointError, TrainConfig, load_checkpoint, save_checkpoint, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_GRADCHECK = 0, 1, 2, 3

log = logging.getLogger("dualmil")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(","))


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _variant(text: str) -> Variant:
    try:
        return Variant(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"invalid variant {text!r}; choose from {', '.join(v.value for v in Variant)}") from None


@dataclass
class Opt:
    flag: str
    type: Callable
    default: object
    help: str

    @property
    def key(self) -> str:
        return self.flag.lstrip("-")

    @property
    def dest(self) -> str:
        return self.key.replace("-", "_")


COMMON = [
    Opt("--seed", int, 0, "master 64-bit seed"),
    Opt("--out", str, None, "output path"),
]

GEN_OPTS = [
    Opt("--n", int, 300, "number of images"),
    Opt("--width", int, 896, "image width in pixels"),
    Opt("--height", int, 1344, "image height in pixels"),
    Opt("--side", int, 224, "region side in pixels"),
    Opt("--stride", int, 112, "grid stride in pixels"),
    Opt("--feature-dim", int, 128, "region feature dimension"),
    Opt("--class-mix", _floats, (0.25, 0.25, 0.25, 0.25), "proportions of N,B,M,MB"),
    Opt("--separation", float, 4.0, "class-mean distance in noise std units"),
    Opt("--lesion-size", _ints, (64, 256), "min,max lesion side in pixels"),
    Opt("--full-ratio", float, 0.0, "fraction of M images tagged fully supervised"),
]

TRAIN_OPTS = [
    Opt("--variant", _variant, Variant.CLS_DET_RS, "cls-det-rs | cls-det | db-baseline | max-region"),
    Opt("--k", int, 10, "regions kept by region selection"),
    Opt("--alpha", float, 0.5, "IoM threshold for M region labels"),
    Opt("--lambda2", float, 1.0, "weight of the fully supervised objective"),
    Opt("--beta", float, 1.0, "lambda1 = beta / m_f"),
    Opt("--lr", float, 1e-4, "Adam learning rate"),
    Opt("--epochs", int, 50, "training epochs"),
    Opt("--batch-size", int, 256, "images per batch"),
    Opt("--dropout-keep", float, 0.5, "dropout keep probability"),
    Opt("--l2", float, 1e-4, "L2 coefficient on weight matrices"),
    Opt("--hidden", int, 128, "shared hidden width"),
    Opt("--b-term", str, "all", "images in the benign weak term: all | weak"),
    Opt("--full-ratio-used", float, None, "re-tag this fraction of M images as fully supervised"),
]

EVAL_OPTS = [
    Opt("--checkpoint", str, None, "checkpoint file"),
    Opt("--data", str, None, "dataset file"),
    Opt("--fppi-population", str, "all", "FPPI denominator: all | tp"),
    Opt("--froc-filter", float, 0.85, "classification sensitivity OP for the filtered FROC"),
]

GRADCHECK_OPTS = [
    Opt("--configs", int, 100, "number of random configurations"),
    Opt("--step", float, 1e-4, "finite-difference step"),
    Opt("--tol", float, 1e-5, "relative error tolerance"),
    Opt("--variants", str, ",".join(v.value for v in Variant), "comma-separated variants"),
    Opt("--inject-sign-flip", str, None, argparse.SUPPRESS),
]

SWEEP_OPTS = [
    Opt("--test", str, None, "held-out dataset file"),
    Opt("--ratios", _floats, DEFAULT_RATIOS, "comma-separated full-supervision ratios"),
    Opt("--seeds", _ints, (0, 1, 2, 3, 4), "comma-separated training seeds"),
    Opt("--variants", str, Variant.CLS_DET_RS.value, "comma-separated variants"),
]

COMMANDS = {
    "generate": COMMON + GEN_OPTS,
    "train": COMMON + [Opt("--data", str, None, "training dataset")] + TRAIN_OPTS,
    "eval": COMMON + EVAL_OPTS,
    "gradcheck": COMMON + GRADCHECK_OPTS,
    "sweep": COMMON + [Opt("--data", str, None, "training dataset")] + TRAIN_OPTS[:-1]
    + SWEEP_OPTS,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualmil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--dump-config", help="write the effective config here")
        for o in opts:
            p.add_argument(o.flag, dest=o.dest, type=o.type, default=None, help=o.help)
    return parser


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then config file, then explicit flags."""
    opts = COMMANDS[command]
    file_values = read_config_file(args.config) if args.config else {}
    known = {o.key: o for o in opts}
    unknown = set(file_values) - set(known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    eff = {}
    for o in opts:
        v = getattr(args, o.dest)
        if v is None and o.key in file_values:
            try:
                v = o.type(file_values[o.key]) if file_values[o.key] != "" else None
            except (ValueError, argparse.ArgumentTypeError) as e:
                raise UsageError(f"config key {o.key}: {e}") from None
        eff[o.dest] = o.default if v is None else v
    return eff


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, Variant):
        return v.value
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(command: str, eff: dict, path) -> None:
    lines = [f"# dualmil {command}"]
    for o in COMMANDS[command]:
        if o.help is argparse.SUPPRESS:
            continue
        lines.append(f"{o.key}={_format_value(eff[o.dest])}")
    Path(path).write_text("\n".join(lines) + "\n")


def _require(eff: dict, *names: str) -> None:
    missing = [n for n in names if eff.get(n) is None]
    if missing:
        raise UsageError("missing required option(s): " +
                         ", ".join("--" + n.replace("_", "-") for n in missing))


def _load(path: str):
    if not Path(path).is_file():
        raise UsageError(f"no such dataset: {path}")
    try:
        return read_dataset(path)
    except DatasetParseError as e:
        raise DataError(f"{path}: {e}") from None


def train_config(eff: dict) -> TrainConfig:
    if eff["b_term"] not in ("all", "weak"):
        raise UsageError("--b-term must be all or weak")
    try:
        return TrainConfig(epochs=eff["epochs"], batch_size=eff["batch_size"], seed=eff["seed"],
                           k=eff["k"], alpha=eff["alpha"], lambda2=eff["lambda2"],
                           beta=eff["beta"], variant=eff["variant"],
                           dropout_keep=eff["dropout_keep"], l2=eff["l2"], lr=eff["lr"],
                           hidden_dim=eff["hidden"], b_term_all=eff["b_term"] == "all")
    except ValueError as e:
        raise UsageError(str(e)) from None


def _variants(text: str) -> list[Variant]:
    try:
        return [_variant(v.strip()) for v in text.split(",") if v.strip()]
    except argparse.ArgumentTypeError as e:
        raise UsageError(str(e)) from None


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(eff: dict) -> int:
    _require(eff, "out")
    try:
        cfg = GenConfig(n_images=eff["n"], image_width=eff["width"], image_height=eff["height"],
                        side=eff["side"], stride=eff["stride"], feature_dim=eff["feature_dim"],
                        class_mix=eff["class_mix"], separation=eff["separation"],
                        lesion_size_range=eff["lesion_size"], seed=eff["seed"],
                        full_ratio=eff["full_ratio"])
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from None
    try:
        bags = generate(cfg)
    except GenerationError as e:
        raise DataError(str(e)) from None
    write_dataset(bags, eff["out"], feature_dim=cfg.feature_dim, side=cfg.side, stride=cfg.stride)
    counts = class_counts(bags)
    n_full = sum(b.supervision == "full" for b in bags)
    n_m = counts["M"] + counts["MB"]
    print(f"generated {len(bags)} images: " + " ".join(f"{c}={n}" for c, n in counts.items())
          + f" full={n_full}/{n_m} M-containing -> {eff['out']}")
    return EXIT_OK


def cmd_train(eff: dict) -> int:
    _require(eff, "data", "out")
    config = train_config(eff)
    bags = _load(eff["data"])
    if not bags:
        raise DataError("dataset is empty")
    if eff["full_ratio_used"] is not None:
        bags = apply_full_ratio(bags, eff["full_ratio_used"], config.seed)
    result = train(bags, config)
    save_checkpoint(result.params, eff["out"])
    loss_log = Path(str(eff["out"]) + ".loss.csv")
    loss_log.write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(result.history)))
    n_full = sum(b.supervision == "full" for b in bags)
    print(f"trained {config.variant.value} on {len(bags)} images ({n_full} fully supervised), "
          f"{config.epochs} epochs, final loss {result.history[-1]:.6f} -> {eff['out']}")
    return EXIT_OK


def _eval_rows(scored) -> list[tuple[str, str, float]]:
    rows = []
    for task in ev.TASKS:
        try:
            rep = ev.classification_report(scored, task)
        except ev.UndefinedMetricError:
            continue
        rows.extend((task, k, v) for k, v in rep.items())
    return rows


def cmd_eval(eff: dict) -> int:
    _require(eff, "checkpoint", "data", "out")
    try:
        params = load_checkpoint(eff["checkpoint"])
    except (OSError, CheckpointError) as e:
        raise DataError(f"cannot read checkpoint: {e}") from None
    bags = _load(eff["data"])
    if not bags:
        raise DataError("dataset is empty")
    if bags[0].features.shape[1] != params.feature_dim:
        raise DataError(f"checkpoint expects {params.feature_dim}-D features, dataset has "
                        f"{bags[0].features.shape[1]}")
    out = Path(eff["out"])
    out.mkdir(parents=True, exist_ok=True)
    scored = ev.score_bags(bags, params)
    rows = _eval_rows(scored)

    for task in ev.TASKS:
        scores, labels = ev.task_arrays(scored, task)
        try:
            ev.write_curve(ev.roc_curve(scores, labels), task, out / f"roc_{task}.csv")
        except ev.UndefinedMetricError:
            pass
    for cls, task in (("M", "MvsBN"), ("B", "MBvsN")):
        try:
            curve = ev.froc(scored, cls, fppi_population=eff["fppi_population"])
        except ev.UndefinedMetricError:
            continue
        ev.write_curve(curve, task, out / f"froc_{cls}.csv")
        for f in (0.5, 1.0):
            rows.append((f"FROC-{cls}", f"sens@FPPI={f}", ev.froc_sensitivity_at(curve, f)))
        if eff["froc_filter"] is not None:
            try:
                fc = ev.froc(scored, cls, fppi_population=eff["fppi_population"],
                             classifier_filter=eff["froc_filter"], task=task)
            except ev.UndefinedMetricError:
                continue
            ev.write_curve(fc, task, out / f"froc_{cls}_filtered.csv")
            rows.append((f"FROC-{cls}-filtered", "sens@FPPI=0.5", ev.froc_sensitivity_at(fc, 0.5)))
    ev.probability_plane_export(scored, out / "probability_plane.csv")

    width = max(len(f"{a} {b}") for a, b, _ in rows)
    report = "".join(f"{(a + ' ' + b).ljust(width)}  {v:.4f}\n" for a, b, v in rows)
    (out / "report.txt").write_text(report)
    (out / "summary.csv").write_text("task,metric,value\n" +
                                     "".join(f"{a},{b},{v!r}\n" for a, b, v in rows))
    print(report, end="")
    return EXIT_OK


def cmd_gradcheck(eff: dict) -> int:
    variants = _variants(eff["variants"])
    flip = eff["inject_sign_flip"]
    if flip is not None and flip not in ModelParams.TENSORS:
        raise UsageError(f"unknown tensor {flip!r}")
    cases = gradcheck_suite(eff["configs"], seed=eff["seed"], step=eff["step"],
                            variants=variants, sign_flip=flip)
    worst = worst_per_tensor(cases)
    bad = [n for n, e in worst.items() if e > eff["tol"]]
    lines = [f"{len(cases)} configurations over {', '.join(v.value for v in variants)}"]
    lines += [f"  {n:3s} worst relative error {e:.3e} {'FAIL' if n in bad else 'ok'}"
              for n, e in worst.items()]
    lines.append("FAIL: " + ", ".join(bad) if bad else "PASS")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if eff["out"]:
        Path(eff["out"]).write_text(text)
    return EXIT_GRADCHECK if bad else EXIT_OK


def cmd_sweep(eff: dict) -> int:
    _require(eff, "data", "test", "out")
    eff = dict(eff, full_ratio_used=None)
    base = train_config(eff)
    train_bags = _load(eff["data"])
    test_bags = _load(eff["test"])
    if not any(b.lesions("M") for b in train_bags):
        raise DataError("sweep needs a training set with malignant annotations")
    if any(not 0 <= r <= 1 for r in eff["ratios"]):
        raise UsageError("ratios must lie in [0, 1]")
    rows = run_sweep(train_bags, test_bags, base, ratios=eff["ratios"], seeds=eff["seeds"],
                     variants=_variants(eff["variants"]))
    text = sweep_csv(rows)
    Path(eff["out"]).write_text(text)
    print(text, end="")
    return EXIT_OK


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "sweep": cmd_sweep}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return EXIT_OK if e.code in (None, 0) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        eff = resolve(args.command, args)
        if args.dump_config:
            dump_config(args.command, eff, args.dump_config)
        return HANDLERS[args.command](eff)
    except UsageError as e:
        print(f"dualmil {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"dualmil {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
