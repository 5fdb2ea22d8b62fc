"""Experiment orchestration: single runs, ablation suites and consolidated reports."""
from __future__ import annotations

import json
import logging
import sys
import time
import traceback
from pathlib import Path

import numpy as np
import torch

from .backbones import build_backbone, count_params, wrap_with_msvp
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .datasets import CLASS_NAMES, AugmentPolicy, cached_stats, load_dataset, normalize, split, validation_count
from .errors import ConfigError
from .evaluation import ConfusionMatrix, overhead_from_counts
from .prompt import count_msvp_params, export_prompts, init_prompts
from .trainer import epoch_record_dict, predict_logits, set_determinism, train

log = logging.getLogger("msvp")

SUITES = ("main_results", "scale_ablation", "fusion_ablation", "backbone_comparison")
MAIN_DATASETS = ("mnist", "fashion_mnist", "cifar10")
MAIN_BACKBONES = ("cnn4", "resnet18_small", "vit_tiny")
ABLATION_PAIR = ("fashion_mnist", "resnet18_small")
SCALE_ROWS = (("baseline", None), ("global", ("g",)), ("global_mid", ("g", "m")), ("full", ("g", "m", "l")))
SCALE_NAMES = {"baseline": "Baseline (no prompts)", "global": "Global only", "global_mid": "Global + Mid",
               "full": "Full (Global+Mid+Local)"}
DATASET_NAMES = {"mnist": "MNIST", "fashion_mnist": "Fashion-MNIST", "cifar10": "CIFAR-10"}
BACKBONE_NAMES = {"cnn4": "CNN", "resnet18_small": "ResNet-18", "vit_tiny": "ViT-Tiny"}
# accuracy decimals per dataset, as the source tables print them
PRECISION = {"mnist": 2, "fashion_mnist": 2, "cifar10": 1}

FUSION_FOOTER = ("Note: the reference fusion table lists concatenation as '243 + 192' extra parameters; "
                 "no reading of the 1x1 projection ((1+k)*C*C + C, or 2C*C + C) gives 192 for C in {1, 3}, "
                 "so that figure is not reproduced. Extra parameters here follow the formulas.")
SCALE_FOOTER = ("Note: the reference scale table lists 3 / 51 / 243 parameters, which assumes C = 3; "
                "this grayscale dataset has C = 1, giving 1 / 17 / 81.")


def variant_of(cfg: ExperimentConfig) -> dict:
    v = cfg.values
    if not v["msvp.enabled"]:
        return {"msvp": False, "scales": "", "fusion": ""}
    return {"msvp": True, "scales": ",".join(v["msvp.scales"]), "fusion": v["msvp.fusion"]}


def build_model(cfg: ExperimentConfig):
    seed = cfg["train.seed"]
    base = build_backbone(cfg.backbone_spec(), seed)
    if not cfg["msvp.enabled"]:
        return base, 0
    prompt = init_prompts(cfg.channels, cfg.prompt_scales(), cfg["msvp.fusion"], cfg.resolution)
    return wrap_with_msvp(base, prompt), count_msvp_params(cfg.channels, cfg.prompt_scales(), cfg["msvp.fusion"])


def _select(data, cfg: ExperimentConfig):
    sp = split(len(data.train_labels), 0.9, cfg["train.seed"])
    tr, va = sp.train_idx, sp.val_idx
    xte, yte = data.test_images, data.test_labels
    n = cfg["subset"]
    if n:
        n_val = max(1, validation_count(n))
        tr, va = tr[:n - n_val], va[:n_val]
        xte, yte = xte[:n], yte[:n]
    return sp, tr, va, xte, yte


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Parse, split, build, train, evaluate the best checkpoint and write artifacts."""
    t_start = time.perf_counter()
    out = Path(out_dir or cfg["output_dir"])
    set_determinism(cfg["train.threads"])
    data = load_dataset(cfg["dataset"], cfg["data_dir"], strict=cfg["data.strict"])
    out.mkdir(parents=True, exist_ok=True)
    sp, tr, va, xte, yte = _select(data, cfg)
    mean, std = cached_stats(data, sp, cfg["stats_dir"] or out)

    model, n_msvp = build_model(cfg)
    tcfg = cfg.train_config()
    policy = AugmentPolicy.for_dataset(cfg["dataset"]) if cfg["train.augment"] else None
    jsonl = open(out / "run.jsonl", "w")

    def on_epoch(rec):
        log.info("epoch %d loss %.4f val %.4f lr %.6g", rec.epoch, rec.train_loss, rec.val_acc, rec.lr)
        jsonl.write(json.dumps(epoch_record_dict(rec)) + "\n")
        jsonl.flush()

    try:
        result = train(model, data.train_images[tr], data.train_labels[tr], data.train_images[va],
                       data.train_labels[va], tcfg, mean, std, policy, log=on_epoch)
        meta = {"config": cfg.to_flat(include_paths=False), "config_hash": cfg.hash(),
                "epoch": result.best_epoch, "val_acc": result.best_val_acc, "mean": mean, "std": std}
        save_checkpoint(result.best_state, meta, out / "best.ckpt")
        model.load_state_dict(result.best_state)

        test_x = torch.from_numpy(normalize(xte, mean, std))
        logits = predict_logits(model, test_x)
        preds = np.argmax(logits.numpy(), axis=1)
        cm = ConfusionMatrix.from_predictions(yte, preds)
        (out / "confusion.csv").write_text(cm.to_csv(CLASS_NAMES[cfg["dataset"]]))
        np.savetxt(out / "predictions.txt", np.stack([yte, preds], axis=1), fmt="%d", header="label pred")

        params_total = count_params(model)
        report = {
            "config": cfg.to_flat(include_paths=False),
            "label": cfg.run_label(),
            "dataset": cfg["dataset"], "backbone": cfg["backbone"], "variant": variant_of(cfg),
            "channels": cfg.channels,
            "epochs": [epoch_record_dict(e) for e in result.epochs],
            "test_acc": float(np.mean(preds == yte)),
            "best_epoch": result.best_epoch, "best_val_acc": result.best_val_acc,
            "params_total": params_total, "params_msvp": n_msvp,
            **{k: v for k, v in overhead_from_counts(params_total - n_msvp, params_total).items()
               if k != "params_msvp"},
            "n_train": int(len(tr)), "n_val": int(len(va)), "n_test": int(len(yte)),
            "artifacts": {"confusion": "confusion.csv", "checkpoint": "best.ckpt"},
        }
        if n_msvp:
            files = export_prompts(model.msvp, out / "prompts", cfg.resolution)
            report["artifacts"]["prompts"] = sorted(str(f.relative_to(out)) for f in files if f.suffix == ".pgm")
        report["wall_seconds"] = time.perf_counter() - t_start
        final = {"test_acc": report["test_acc"], "best_epoch": report["best_epoch"],
                 "params_total": params_total, "params_msvp": n_msvp}
        jsonl.write(json.dumps(final) + "\n")
    finally:
        jsonl.close()
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def deterministic_metrics(report: dict) -> dict:
    """A RunReport without its wall-clock fields."""
    r = {k: v for k, v in report.items() if k != "wall_seconds"}
    r["epochs"] = [{k: v for k, v in e.items() if k != "seconds"} for e in report["epochs"]]
    return r


# -- suites -----------------------------------------------------------------

def suite_cells(suite: str) -> list:
    """``(cell_id, overrides)`` for every run a suite needs."""
    cells = []
    if suite in ("main_results", "backbone_comparison"):
        for ds in MAIN_DATASETS:
            for bb in MAIN_BACKBONES:
                cells.append((f"{ds}-{bb}-baseline", {"dataset": ds, "backbone": bb, "msvp.enabled": "false"}))
                cells.append((f"{ds}-{bb}-msvp", {"dataset": ds, "backbone": bb, "msvp.enabled": "true",
                                                  "msvp.scales": "g,m,l", "msvp.fusion": "addition"}))
    elif suite == "scale_ablation":
        ds, bb = ABLATION_PAIR
        for name, scales in SCALE_ROWS:
            if scales is None:
                cells.append((f"{ds}-{bb}-baseline", {"dataset": ds, "backbone": bb, "msvp.enabled": "false"}))
            else:
                cid = f"{ds}-{bb}-msvp" if name == "full" else f"{ds}-{bb}-scales-{name}"
                cells.append((cid, {"dataset": ds, "backbone": bb, "msvp.enabled": "true",
                                    "msvp.scales": ",".join(scales), "msvp.fusion": "addition"}))
    elif suite == "fusion_ablation":
        ds, bb = ABLATION_PAIR
        for fusion in ("addition", "concatenation", "gated"):
            cid = f"{ds}-{bb}-msvp" if fusion == "addition" else f"{ds}-{bb}-fusion-{fusion}"
            cells.append((cid, {"dataset": ds, "backbone": bb, "msvp.enabled": "true",
                                "msvp.scales": "g,m,l", "msvp.fusion": fusion}))
    else:
        raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")
    return cells


def estimate_seconds(cfg: ExperimentConfig, n_train: int) -> float:
    """Rough wall-clock estimate from timing two small training steps."""
    model, _ = build_model(cfg)
    x = torch.zeros(16, cfg.channels, cfg.resolution, cfg.resolution)
    y = torch.zeros(16, dtype=torch.long)
    t0 = time.perf_counter()
    for _ in range(2):
        loss = torch.nn.functional.cross_entropy(model(x), y)
        loss.backward()
    per_sample = (time.perf_counter() - t0) / 32
    return per_sample * n_train * cfg.epochs


def run_suite(suite: str, root, base: dict | None = None, subset: int = 0, epochs: int | None = None,
              force: bool = False, confirm_long: bool = False, runner=run_experiment,
              interactive: bool | None = None) -> dict:
    """Run (or resume) every cell of a suite under ``root/runs`` and emit its tables."""
    root = Path(root)
    base = dict(base or {})
    if subset:
        base["subset"] = str(subset)
    if epochs:
        base["train.epochs"] = str(epochs)
    base.setdefault("stats_dir", str(root / "stats"))
    cells = suite_cells(suite)
    configs, problems = [], []
    for cid, ov in cells:
        tag = cid + (f"-sub{subset}" if subset else "") + (f"-ep{epochs}" if epochs else "")
        try:
            configs.append((tag, ExperimentConfig.from_flat({**base, **ov})))
        except ConfigError as exc:
            problems += [f"{tag}: {p}" for p in exc.problems]
    if problems:
        raise ConfigError(problems)

    long_runs = [c for _, c in configs if c["dataset"] == "cifar10" and c.epochs >= 150]
    if long_runs and not confirm_long:
        est = sum(estimate_seconds(c, 45000 if not c["subset"] else c["subset"]) for c in long_runs)
        print(f"{len(long_runs)} CIFAR-10 run(s) at {long_runs[0].epochs} epochs; "
              f"estimated {est / 3600:.1f} h single-threaded.", file=sys.stderr)
        if interactive is None:
            interactive = sys.stdin.isatty()
        if interactive:
            raise ConfigError("long CIFAR-10 runs need --confirm-long (or use --epochs/--subset)")

    index = {"suite": suite, "runs": {}}
    for tag, cfg in configs:
        run_dir = root / "runs" / tag
        rep_path = run_dir / "report.json"
        if rep_path.exists() and not force:
            index["runs"][tag] = {"status": "ok", "report": str(rep_path.relative_to(root)), "resumed": True}
            continue
        try:
            runner(cfg, run_dir)
            index["runs"][tag] = {"status": "ok", "report": str(rep_path.relative_to(root)), "resumed": False}
        except Exception as exc:  # recorded per cell; the suite keeps going
            log.error("cell %s failed: %s", tag, exc)
            index["runs"][tag] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                                  "trace": traceback.format_exc(limit=3)}
    (root / f"{suite}.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    reports = [json.loads((root / r["report"]).read_text()) for r in index["runs"].values() if r["status"] == "ok"]
    table = TABLES[suite](reports)
    (root / f"{suite}.csv").write_text(table_csv(table))
    (root / f"{suite}.txt").write_text(table_text(table))
    return index


# -- tables -----------------------------------------------------------------

def _acc(report) -> float:
    return 100.0 * report["test_acc"]


def _fmt_acc(value, dataset) -> str:
    return f"{value:.{PRECISION.get(dataset, 2)}f}"


def _is_full_addition(r) -> bool:
    v = r["variant"]
    return v["msvp"] and v["scales"] == "g,m,l" and v["fusion"] == "addition"


def _pairs(reports):
    """(dataset, backbone, label) -> {'baseline': r, 'msvp': r}."""
    pairs = {}
    for r in reports:
        key = (r["dataset"], r["backbone"], r["label"])
        if not r["variant"]["msvp"]:
            pairs.setdefault(key, {})["baseline"] = r
        elif _is_full_addition(r):
            pairs.setdefault(key, {})["msvp"] = r
    return pairs


def _order(key):
    ds, bb, label = key
    return (MAIN_DATASETS.index(ds) if ds in MAIN_DATASETS else 9,
            MAIN_BACKBONES.index(bb) if bb in MAIN_BACKBONES else 9, label)


def table_main(reports) -> dict:
    rows = []
    pairs = _pairs(reports)
    for key in sorted(pairs, key=_order):
        ds, bb, label = key
        p = pairs[key]
        b, m = p.get("baseline"), p.get("msvp")
        delta = f"{_acc(m) - _acc(b):+.{PRECISION.get(ds, 2)}f}" if b and m else ""
        rows.append([DATASET_NAMES[ds], BACKBONE_NAMES[bb], _fmt_acc(_acc(b), ds) if b else "",
                     _fmt_acc(_acc(m), ds) if m else "", delta, label])
    return {"title": "Test accuracy (%): baseline vs MS-VP",
            "header": ["Dataset", "Model", "Baseline", "MS-VP", "Delta", "Run"], "rows": rows, "footer": []}


def table_backbone(reports) -> dict:
    rows = []
    pairs = _pairs(reports)
    for key in sorted(pairs, key=_order):
        ds, bb, label = key
        p = pairs[key]
        if "baseline" in p and "msvp" in p:
            d = _acc(p["msvp"]) - _acc(p["baseline"])
            rows.append([BACKBONE_NAMES[bb], DATASET_NAMES[ds], f"{d:+.{PRECISION.get(ds, 2)}f}", label])
    return {"title": "MS-VP accuracy change by backbone (percentage points)",
            "header": ["Model", "Dataset", "Delta", "Run"], "rows": rows, "footer": []}


def table_scales(reports) -> dict:
    rows, footer, grayscale = [], [], False
    ds, bb = ABLATION_PAIR
    picked = {}
    for r in reports:
        if (r["dataset"], r["backbone"]) != ABLATION_PAIR:
            continue
        v = r["variant"]
        if not v["msvp"]:
            name = "baseline"
        elif v["fusion"] != "addition":
            continue
        else:
            name = {"g": "global", "g,m": "global_mid", "g,m,l": "full"}.get(v["scales"])
            if name is None:
                continue
        picked[(name, r["label"])] = r
    for name, _ in SCALE_ROWS:
        for (n, label), r in sorted(picked.items(), key=lambda kv: kv[0][1]):
            if n == name:
                rows.append([SCALE_NAMES[name], _fmt_acc(_acc(r), ds), str(r["params_msvp"]), label])
                grayscale = grayscale or r["channels"] == 1
    if grayscale:
        footer.append(SCALE_FOOTER)
    return {"title": "Impact of prompt scales (Fashion-MNIST, ResNet-18)",
            "header": ["Configuration", "Test Acc (%)", "Params Added", "Run"], "rows": rows, "footer": footer}


def table_fusion(reports) -> dict:
    rows = []
    ds, _ = ABLATION_PAIR
    chosen = [r for r in reports if (r["dataset"], r["backbone"]) == ABLATION_PAIR and r["variant"]["msvp"]
              and r["variant"]["scales"] == "g,m,l"]
    order = {"addition": 0, "concatenation": 1, "gated": 2}
    for r in sorted(chosen, key=lambda r: (order[r["variant"]["fusion"]], r["label"])):
        fusion = r["variant"]["fusion"]
        prompt_only = r["channels"] * (1 + int(r["config"]["msvp.s_mid"]) ** 2 + int(r["config"]["msvp.s_local"]) ** 2)
        extra = r["params_msvp"] - prompt_only
        cell = str(prompt_only) if extra == 0 else f"{prompt_only} + {extra}"
        rows.append([fusion.capitalize(), _fmt_acc(_acc(r), ds), cell, r["label"]])
    return {"title": "Fusion strategy comparison (Fashion-MNIST, ResNet-18)",
            "header": ["Fusion Type", "Test Acc (%)", "Extra Params", "Run"], "rows": rows,
            "footer": [FUSION_FOOTER] if rows else []}


def table_overhead(reports) -> dict:
    rows = []
    seen = set()
    fusion_rank = {"addition": 0, "concatenation": 1, "gated": 2}
    for r in sorted(reports, key=lambda r: (_order((r["dataset"], r["backbone"], r["label"])),
                                            fusion_rank.get(r["variant"]["fusion"], 9), r["variant"]["scales"])):
        if not r["variant"]["msvp"]:
            continue
        key = (r["dataset"], r["backbone"], r["variant"]["scales"], r["variant"]["fusion"])
        if key in seen:
            continue
        seen.add(key)
        rows.append([BACKBONE_NAMES[r["backbone"]], DATASET_NAMES[r["dataset"]],
                     f"{r['variant']['fusion']} ({r['variant']['scales']})", str(r["params_base"]),
                     f"+{r['params_msvp']}", f"{r['delta_pct']:.6f}%"])
    return {"title": "Parameter overhead",
            "header": ["Model", "Dataset", "MS-VP variant", "Baseline Params", "MS-VP Params", "Overhead"],
            "rows": rows, "footer": []}


TABLES = {"main_results": table_main, "scale_ablation": table_scales, "fusion_ablation": table_fusion,
          "backbone_comparison": table_backbone}


def table_csv(table: dict) -> str:
    lines = [",".join(table["header"])]
    lines += [",".join(f'"{c}"' if "," in c else c for c in row) for row in table["rows"]]
    return "\n".join(lines) + "\n"


def table_text(table: dict) -> str:
    if not table["rows"]:
        return f"{table['title']}\n\n(no runs)\n"
    widths = [max(len(h), *(len(r[i]) for r in table["rows"])) for i, h in enumerate(table["header"])]
    line = "  ".join(h.ljust(w) for h, w in zip(table["header"], widths))
    out = [table["title"], "", line, "-" * len(line)]
    out += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table["rows"]]
    out += [""] + table["footer"] if table["footer"] else []
    return "\n".join(out) + "\n"


def table_markdown(table: dict) -> str:
    out = [f"## {table['title']}", ""]
    if not table["rows"]:
        return "\n".join(out + ["No runs.", ""]) + "\n"
    out.append("| " + " | ".join(table["header"]) + " |")
    out.append("|" + "|".join("---" for _ in table["header"]) + "|")
    out += ["| " + " | ".join(r) + " |" for r in table["rows"]]
    out += [""] + table["footer"]
    return "\n".join(out) + "\n\n"


def collect_reports(root) -> list:
    root = Path(root)
    paths = sorted(root.glob("runs/*/report.json")) + sorted(p for p in root.glob("*/report.json"))
    if (root / "report.json").exists():
        paths.append(root / "report.json")
    out = []
    for p in paths:
        r = json.loads(p.read_text())
        r["_dir"] = str(p.parent.relative_to(root)) if p.parent != root else "."
        out.append(r)
    return out


def emit_report(root) -> Path:
    """Write ``report.md`` and one CSV per table under ``root`` (deterministic)."""
    root = Path(root)
    reports = collect_reports(root)
    tables = [("main_results", table_main(reports)), ("scale_ablation", table_scales(reports)),
              ("fusion_ablation", table_fusion(reports)), ("backbone_comparison", table_backbone(reports)),
              ("overhead", table_overhead(reports))]
    parts = ["# MS-VP experiment report", ""]
    subsets = sorted({r["label"] for r in reports if r["label"] != "full protocol"})
    if subsets:
        parts += ["Desk-scale runs present (not full reproductions): " + "; ".join(subsets) + ".", ""]
    parts.append("")
    for name, table in tables:
        parts.append(table_markdown(table))
        (root / f"report_{name}.csv").write_text(table_csv(table))
    parts += ["## Prompt and analysis artifacts", ""]
    artifacts = []
    for r in sorted(reports, key=lambda r: r["_dir"]):
        for rel in r.get("artifacts", {}).get("prompts", []):
            artifacts.append(f"- [{r['_dir']}/{rel}]({r['_dir']}/{rel})")
        if "confusion" in r.get("artifacts", {}):
            artifacts.append(f"- [{r['_dir']}/confusion.csv]({r['_dir']}/confusion.csv)")
    parts += artifacts or ["No runs."]
    path = root / "report.md"
    path.write_text("\n".join(parts).rstrip() + "\n")
    return path
