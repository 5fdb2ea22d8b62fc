"""``msvp`` command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError, NumericalAbort

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _data_dir(args) -> dict:
    d = args.data_dir or os.environ.get("MSVP_DATA_DIR")
    return {"data_dir": d} if d else {}


def cmd_run(args) -> int:
    from .config import ExperimentConfig
    from .harness import run_experiment

    ov = {**_data_dir(args), **_overrides(args.set)}
    if args.output_dir:
        ov["output_dir"] = args.output_dir
    cfg = ExperimentConfig.load(args.config, ov)
    rep = run_experiment(cfg)
    print(f"test_acc={rep['test_acc']:.4f} best_epoch={rep['best_epoch']} "
          f"params_total={rep['params_total']} params_msvp={rep['params_msvp']}")
    return EXIT_OK


def cmd_suite(args) -> int:
    from .harness import emit_report, run_suite

    base = {**_data_dir(args), **_overrides(args.set)}
    index = run_suite(args.name, args.out, base, subset=args.subset, epochs=args.epochs, force=args.force,
                      confirm_long=args.confirm_long)
    emit_report(args.out)
    failed = [k for k, v in index["runs"].items() if v["status"] != "ok"]
    for k in failed:
        print(f"FAILED {k}: {index['runs'][k]['error']}", file=sys.stderr)
    print(Path(args.out) / f"{args.name}.txt")
    return EXIT_OK


def cmd_report(args) -> int:
    from .harness import emit_report

    print(emit_report(args.dir))
    return EXIT_OK


def cmd_gradcam(args) -> int:
    from .backbones import build_backbone, wrap_with_msvp
    from .checkpoint import load_into, read_checkpoint
    from .config import ExperimentConfig
    from .datasets import load_dataset, normalize
    from .evaluation import gradcam, write_gradcam
    from .prompt import init_prompts

    meta, arrays = read_checkpoint(args.checkpoint)
    cfg = ExperimentConfig.from_flat({**meta["config"], **_data_dir(args)})
    model = build_backbone(cfg.backbone_spec(), cfg["train.seed"])
    if cfg["msvp.enabled"]:
        model = wrap_with_msvp(model, init_prompts(cfg.channels, cfg.prompt_scales(), cfg["msvp.fusion"]))
    load_into(model, arrays)
    data = load_dataset(cfg["dataset"], cfg["data_dir"], strict=cfg["data.strict"])
    out = Path(args.out or Path(args.checkpoint).parent / "gradcam")
    for i in args.index:
        if not 0 <= i < len(data.test_labels):
            raise DataError(f"test index {i} out of range")
        x = torch.from_numpy(normalize(data.test_images[i:i + 1], meta["mean"], meta["std"]))[0]
        with torch.no_grad():
            model.eval()
            pred = int(np.argmax(model(x[None]).numpy()[0]))
        target = pred if args.target_class is None else args.target_class
        cam = gradcam(model, x, target, args.layer)
        files = write_gradcam(cam, out, f"gradcam_{i}_c{target}")
        print(f"index {i} label {int(data.test_labels[i])} pred {pred} -> {files[0]}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcases import run_all

    failures = 0
    for name, shapes, rep in run_all(args.tolerance):
        status = "PASS" if rep.passed else ("INVALID" if not rep.valid else "FAIL")
        failures += status != "PASS"
        print(f"{status:7s} {name:22s} {shapes} max_rel_err={rep.max_rel_error:.3e}")
    print(f"{failures} failure(s)")
    return EXIT_NUMERIC if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msvp", description="Multi-scale visual prompting workbench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", help="flat key = value config file")
    r.add_argument("--set", action="append", metavar="KEY=VALUE")
    r.add_argument("--data-dir")
    r.add_argument("--output-dir")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("suite", help="run an ablation suite")
    s.add_argument("name", choices=["main_results", "scale_ablation", "fusion_ablation", "backbone_comparison"])
    s.add_argument("--subset", type=int, default=0)
    s.add_argument("--epochs", type=int)
    s.add_argument("--force", action="store_true")
    s.add_argument("--confirm-long", action="store_true")
    s.add_argument("--out", default="runs")
    s.add_argument("--data-dir")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(fn=cmd_suite)

    rp = sub.add_parser("report", help="consolidate runs under a directory")
    rp.add_argument("dir")
    rp.set_defaults(fn=cmd_report)

    g = sub.add_parser("gradcam", help="GradCAM maps for test samples")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--index", type=int, nargs="+", required=True)
    g.add_argument("--layer")
    g.add_argument("--class", dest="target_class", type=int)
    g.add_argument("--data-dir")
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gradcam)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
