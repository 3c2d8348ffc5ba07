"""Command-line entry point: ``lfx <command> [--flags]``.

Exit codes: 0 success, 1 a check failed, 2 bad usage or input.
Any flag may also come from ``--config FILE`` (``key=value`` lines); flags
given on the command line win.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import encoder as E
from . import tensor as T
from .adapter import AdapterMode, apply_adapter, random_params
from .errors import DivergedLoss, LfxError
from .gradcheck import grad_check
from .lightfield import LightField, load_lfr, parse_coords, save_lfr, select_views
from .metrics import ConfusionMatrix, accumulate, format_report, mae, miou
from .refocus import build_stack, save_stack, sharpness
from .rng import generator
from .synthetic import make_synthetic_task, textured_plane
from .tensor import Tensor
from .training import train_toy

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class CheckFailed(Exception):
    pass


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: list[str]
    outputs: list[str]
    started_at: str = ""
    wall_clock_s: float = 0.0
    passed: bool = True
    summary: str = ""

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.stem + ".manifest.json")


# ---------------------------------------------------------------------------
# commands; each returns (exit code, inputs, outputs, summary)

def cmd_refocus(args):
    lf = load_lfr(args.input)
    stack = build_stack(lf, args.slopes)
    paths = save_stack(stack, args.out)
    scores = [sharpness(s.image) for s in stack.slices]
    best = int(np.argmax(scores))
    for i, (s, score) in enumerate(zip(stack.slices, scores)):
        print(f"slice {i} slope={s.slope!r} sharpness={score:.6g}")
    print(f"sharpest slice {best} slope={stack.slopes[best]!r}")
    outputs = [str(p) for p in paths] + [str(Path(args.out) / "slopes.txt")]
    return EXIT_OK, [str(args.input)], outputs, f"{len(stack)} slices, sharpest {best}"


def cmd_select(args):
    lf = load_lfr(args.input)
    coords = parse_coords(args.coords) if args.coords else None
    sel = select_views(lf, args.strategy, args.k, coords)
    print(sel)
    return EXIT_OK, [str(args.input)], [], str(sel)


def _probe_loss(outputs, probes):
    total = T.sum_all(T.mul(outputs[0], probes[0]))
    for y, w in zip(outputs[1:], probes[1:]):
        total = T.add(total, T.sum_all(T.mul(y, w)))
    return total


def cmd_gradcheck(args):
    mode = AdapterMode.parse(args.mode)
    rng = generator(args.seed, "cli", "gradcheck")
    if args.target == "adapter":
        sets = [random_params(args.c, rng, prefix=f"view{i}") for i in range(args.k)]
        params = sets if mode is AdapterMode.HARD_PER_VIEW else sets[0]
        views = [Tensor(rng.normal(size=(2, args.n, args.c)), requires_grad=True, name=f"x{i}")
                 for i in range(args.k)]
        probes = [Tensor(rng.normal(size=(2, args.n, args.c))) for _ in range(args.k)]
        leaves = [t for p in (sets if mode is AdapterMode.HARD_PER_VIEW else sets[:1]) for t in p.tensors()]
        report = grad_check(lambda: _probe_loss(apply_adapter(views, mode, params).views, probes),
                            leaves + views, h=args.h, tol=args.tol)
    else:
        side = math.isqrt(args.n)
        if side * side != args.n or side % 2:
            raise LfxError("--n must be the square of an even number for the encoder target")
        config = E.EncoderConfig(patch_size=2, stage_channels=(args.c, args.c), adapter_placement=(True, True),
                                 K=args.k, seed=args.seed, adapter_mode=mode)
        params = E.init_encoder(config, adapter_init="random")
        views = rng.random((1, args.k, 2 * side, 2 * side, 1))
        targets = rng.integers(0, config.num_classes, size=(1, args.n))
        report = grad_check(lambda: E.loss(E.forward(views, config, params), targets, config),
                            params.trainable(), h=args.h, tol=args.tol)
    print(report)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict} max_rel_err={report.max_rel_err:.3e} tol={args.tol:g}")
    return (EXIT_OK if report.passed else EXIT_CHECK), [], [], f"{verdict} max_rel_err={report.max_rel_err:.3e}"


def cmd_train(args):
    if args.task != "synth":
        raise LfxError(f"unknown task {args.task!r}; only 'synth' is available")
    no_adapter = args.mode.strip().lower() == "none"
    config = E.EncoderConfig(K=args.k, seed=args.seed, representation=args.representation, head=args.head,
                             adapter_mode=AdapterMode.SHARED if no_adapter else AdapterMode.parse(args.mode))
    if no_adapter:
        config = config.without_adapter()
    report = train_toy(args.seed, config, args.steps, lr=args.lr, strategy=args.strategy,
                       n_train=args.n_train, n_eval=args.n_eval)
    csv = report.to_csv()
    outputs = []
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(csv)
        outputs.append(str(out))
    values = {"final_loss": report.final_loss, **report.metrics}
    print(format_report(values), end="")
    if not report.backbone_unchanged:
        raise CheckFailed("backbone parameters changed during training")
    return EXIT_OK, [], outputs, f"final_loss={report.final_loss:.6f}"


def _load_array(path) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise LfxError(f"cannot read {path}: {exc}") from exc


def cmd_eval(args):
    pred, gt = _load_array(args.pred), _load_array(args.gt)
    if args.metric == "miou":
        n = args.num_classes
        if n is None:
            valid = gt[gt != args.ignore_label] if args.ignore_label is not None else gt
            n = int(max(valid.max(initial=0), pred.max(initial=0))) + 1
        cm = accumulate(ConfusionMatrix.zeros(n), gt, pred, ignore_label=args.ignore_label)
        acc, macc, m = miou(cm)
        values = {"acc": acc, "macc": macc, "miou": m}
    else:
        values = {"mae": mae(pred, gt)}
    text = format_report(values)
    print(text, end="")
    outputs = []
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        outputs.append(str(args.out))
    return EXIT_OK, [str(args.pred), str(args.gt)], outputs, text.strip().replace("\n", " ")


def cmd_synth(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    outputs = [str(out)]
    if args.kind == "plane":
        lf = textured_plane(args.disparity, seed=args.seed, angular=args.angular, size=args.size)
    else:
        scene = make_synthetic_task(args.seed, angular=args.angular, size=args.size)
        lf = scene.lightfield
        labels = out.with_name(out.stem + ".labels.npy")
        np.save(labels, scene.labels)
        outputs.append(str(labels))
    save_lfr(lf, out)
    print(f"wrote {out} with shape {lf.shape}")
    return EXIT_OK, [], outputs, f"{args.kind} {lf.shape}"


def cmd_convert(args):
    arr = _load_array(args.input)
    lf = LightField.from_uint8(arr) if arr.dtype == np.uint8 else LightField(arr)
    save_lfr(lf, args.out)
    print(f"wrote {args.out} with shape {lf.shape}")
    return EXIT_OK, [str(args.input)], [str(args.out)], str(lf.shape)


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", type=Path, help="file of key=value lines supplying any flag")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--manifest", type=Path, help="where to write the run manifest (JSON)")

    parser = argparse.ArgumentParser(prog="lfx", description="Light-field encoding toolkit at desk scale.",
                                     allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"lfx {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = sub.choices

    p = sub.add_parser("refocus", parents=[common], allow_abbrev=False, help="build a focal stack")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--slopes", type=_floats, required=True, help="strictly increasing, comma separated")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_refocus)

    p = sub.add_parser("select", parents=[common], allow_abbrev=False, help="choose sub-aperture views")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--strategy", default="nearest", help="corners, sparse, nearest, fixed5 or explicit")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--coords", help='explicit views as "u,v u,v ..."')
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("gradcheck", parents=[common], allow_abbrev=False,
                       help="finite-difference check of the adapter or the toy encoder")
    p.add_argument("--target", choices=("adapter", "encoder"), default="adapter")
    p.add_argument("--c", type=int, default=4)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--mode", default="shared")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", parents=[common], allow_abbrev=False, help="train on the synthetic task")
    p.add_argument("--task", default="synth")
    p.add_argument("--mode", default="shared", help="adapter mode, or 'none' for no adapter")
    p.add_argument("--strategy", default="nearest")
    p.add_argument("--representation", default="sai", choices=("sai", "focal"))
    p.add_argument("--head", default=E.SEGMENTATION, choices=(E.SEGMENTATION, E.SALIENCY))
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--n-train", type=int, default=4)
    p.add_argument("--n-eval", type=int, default=4)
    p.add_argument("--out", type=Path, help="CSV report path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], allow_abbrev=False, help="score predictions (.npy)")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--metric", choices=("miou", "mae"), required=True)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--ignore-label", type=int)
    p.add_argument("--out", type=Path, help="write the report here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], allow_abbrev=False, help="write a procedural light field")
    p.add_argument("--kind", choices=("scene", "plane"), default="scene")
    p.add_argument("--disparity", type=int, default=1)
    p.add_argument("--angular", type=int, default=5)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", parents=[common], allow_abbrev=False,
                       help="convert a (v, u, y, x[, c]) .npy array to LFR")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_convert)
    return parser


def read_config(path: Path) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise LfxError(f"cannot read config {path}: {exc}") from exc
    for number, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise LfxError(f"{path}:{number}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def _parse(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config", type=Path)
    found, _ = pre.parse_known_args(argv)
    if found.config is not None and argv and argv[0] in parser.commands:
        subparser = parser.commands[argv[0]]
        values = read_config(found.config)
        if "in" in values:
            values["input"] = values.pop("in")
        known = {a.dest: a for a in subparser._actions}
        unknown = sorted(set(values) - set(known) - {"config", "help"})
        if unknown:
            raise LfxError(f"unknown config keys: {', '.join(unknown)}")
        values.pop("config", None)
        # string defaults still go through each flag's type converter; the command line wins
        for key in values:
            known[key].required = False
        subparser.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except LfxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k not in ("func", "command")}
    inputs, outputs, summary = [], [], ""
    try:
        code, inputs, outputs, summary = args.func(args)
    except CheckFailed as exc:
        code, summary = EXIT_CHECK, str(exc)
        print(f"check failed: {exc}", file=sys.stderr)
    except DivergedLoss as exc:
        code, summary = EXIT_CHECK, f"{type(exc).__name__}: {exc}"
        print(f"check failed: {summary}", file=sys.stderr)
    except (LfxError, OSError) as exc:
        code, summary = EXIT_USAGE, f"{type(exc).__name__}: {exc}"
        print(f"error: {summary}", file=sys.stderr)

    target = args.manifest
    if target is None and getattr(args, "out", None) is not None:
        target = _manifest_path(Path(args.out))
    if target is not None:
        RunManifest(args.command, config, getattr(args, "seed", None), inputs, outputs, started,
                    round(time.perf_counter() - t0, 6), code == EXIT_OK, summary).write(Path(target))
    return code


if __name__ == "__main__":
    sys.exit(main())
