"""``caspl`` command line: data, pretraining, both phases, evaluation, ablations, reports.

Exit codes: 0 ok, 1 other library error, 2 config/data error, 3 I/O error,
4 contract violation. Every subcommand writes ``resolved_config.json`` next to
its outputs; identical config and seed give byte-identical metric files.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adapt import VARIANTS, FewShotConfig, load_adapt, run_adapt_phase, save_adapt
from .boost import BoostingPrompts, run_boost_phase
from .classifier import PromptedModel
from .config import load_config, write_snapshot
from .domains import DomainDataset, linear_probe_accuracy
from .errors import CasplError, ConfigError, ContractError
from .evaluation import accuracy, eval_base_to_novel, eval_zero_shot_with_boosting
from .experiments import (
    CASCADE_COLUMNS, CASCADE_SUMMARY_COLUMNS, DEPTH_COLUMNS, EQUAL_VLP_COLUMNS,
    LENGTH_COLUMNS, UNLABELED_COLUMNS, cascade_benefit, depth_grid, equal_vlp, heldout_pool,
    length_grid, read_csv, unlabeled_sweep, write_csv,
)
from .prompts import cascade, load_prompt_sets, save_prompt_sets
from .vlm import write_model_manifest
from .world import load_world, source_domain, target_domain, world_dir

log = logging.getLogger("caspl")

ABLATIONS = ("cascade", "depth-grid", "length", "unlabeled", "equal-vlp")


def _dump(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


class Run:
    """Resolved options shared by the subcommands."""

    def __init__(self, args):
        self.args = args
        self.config = load_config(args.config)
        if args.seed is not None and args.command == "ablate":
            n = len(self.config.seeds)
            self.config = replace(self.config, seeds=tuple(args.seed + i for i in range(n)))
        self.seed = args.seed if args.seed is not None else self.config.seeds[0]
        self.out = Path(args.out or os.environ.get("CASPL_OUT") or "runs")
        self.models = Path(args.models) if args.models else self.out / "models"

    def world(self, require=True):
        return load_world(self.config.world, self.models, require=require)

    def dataset(self):
        if self.args.data:
            path = Path(self.args.data)
            return DomainDataset.load(path)
        return target_domain(self.config.world)

    def snapshot(self, directory, **extra):
        return write_snapshot(directory, self.config, command=self.args.command, seed=self.seed,
                              **extra)


# ----------------------------------------------------------------- commands
def cmd_gen_data(run):
    cfg = run.config.world
    root = run.out / "data"
    source = source_domain(cfg)
    target = target_domain(cfg)
    source.save(root / "source")
    target.save(root / "target")
    report = {
        "source_probe_acc": linear_probe_accuracy(source),
        "target_probe_acc": linear_probe_accuracy(target),
        "source_to_target_probe_acc": linear_probe_accuracy(source, target),
        "mean_pixel_distance": float(np.abs(source.train_images.mean(axis=0)
                                            - target.train_images.mean(axis=0)).mean()),
        "n_classes": source.n_classes, "train_per_class": cfg.domain.train_per_class,
        "test_per_class": cfg.domain.test_per_class,
    }
    _dump(root / "validation.json", report)
    run.snapshot(root)
    print(json.dumps(report, sort_keys=True))


def cmd_pretrain(run):
    student, teacher, ds = run.world(require=False)
    base = world_dir(run.config.world, run.models)
    write_model_manifest(base / "student_manifest.json", student)
    write_model_manifest(base / "teacher_manifest.json", teacher)
    report = {}
    for m in (student, teacher):
        plain = PromptedModel(m, template=ds.spec.template)
        report[f"{m.name}_target_zero_shot"] = accuracy(plain, ds.test_images, ds.test_labels,
                                                        ds.class_names)
        report[f"{m.name}_parameters"] = m.num_parameters()
    report["checkpoints"] = str(base)
    _dump(run.out / "pretrain" / "report.json", report)
    run.snapshot(run.out / "pretrain")
    print(json.dumps(report, sort_keys=True))


def _boost_dir(run):
    return run.out / "boost" / f"seed{run.seed}"


def cmd_boost(run):
    student, teacher, _ = run.world()
    ds = run.dataset()
    res = run_boost_phase(student, teacher, ds.unlabeled(), run.config.kd, seed=run.seed,
                          heldout=heldout_pool(ds))
    d = _boost_dir(run)
    res.write_metrics(d / "phase1_metrics.csv")
    save_prompt_sets(d / "boosting", res.prompts.sets(), {"seed": run.seed})
    run.snapshot(d)
    first, last = res.history[0], res.history[-1]
    print(json.dumps({"kd_loss": [first[1], last[1]], "heldout_agreement": [first[2], last[2]],
                      "checkpoint": str(d / "boosting")}))


def _load_boosting(stem):
    sets, _ = load_prompt_sets(stem)
    by_branch = {s.branch: s for s in sets}
    if set(by_branch) != {"text", "vision"} or any(s.role != "boosting" for s in sets):
        raise ConfigError(f"{stem}: expected one text and one vision boosting set")
    return BoostingPrompts(by_branch["text"], by_branch["vision"])


def _boosting_arg(run):
    stem = run.args.boosting
    if stem is None:
        return None
    if stem == "auto":
        stem = _boost_dir(run) / "boosting"
    return _load_boosting(stem)


def cmd_adapt(run):
    student, _, _ = run.world()
    ds = run.dataset()
    boosting = _boosting_arg(run)
    variant = run.args.variant
    strategy = run.config.strategy(variant)
    res = run_adapt_phase(student, boosting, strategy,
                          FewShotConfig(run.config.shots, run.seed), ds, seed=run.seed,
                          learnable_boosting=run.args.learnable_boosting)
    tag = variant + ("-caspl" if boosting is not None else "")
    d = run.out / "adapt" / tag / f"seed{run.seed}"
    res.write_metrics(d / "phase2_metrics.csv")
    save_adapt(res, d / "adapting", {"seed": run.seed, "boosted": boosting is not None})
    report = eval_base_to_novel(res.view, ds, variant=variant, seed=run.seed,
                                caspl=boosting is not None, shots=run.config.shots)
    report.save(d / "report.json")
    run.snapshot(d, variant=variant, boosting=None if run.args.boosting is None
                 else str(run.args.boosting))
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_eval(run):
    student, _, _ = run.world()
    ds = run.dataset()
    boosting = _boosting_arg(run)
    d = run.out / "eval"
    if run.args.adapting:
        strategy, (text, vision, coupling, meta_net) = load_adapt(student, run.args.adapting)
        tl = cascade(boosting.text if boosting else None, text)
        vl = None
        if boosting is not None or vision is not None:
            vl = cascade(boosting.vision if boosting else None, vision)
        view = PromptedModel(student, tl, vl, coupling=coupling, meta_net=meta_net)
        report = eval_base_to_novel(view, ds, variant=strategy.variant, seed=run.seed,
                                    caspl=boosting is not None)
        name = "base_to_novel.json"
    else:
        report = eval_zero_shot_with_boosting(student, boosting, ds, seed=run.seed)
        name = "zero_shot.json"
    report.save(d / name)
    run.snapshot(d)
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_ablate(run):
    kind = run.args.kind
    cfg = replace(run.config, cache=str(run.models))
    run.world()  # fail early with an I/O error if the checkpoints are missing
    d = run.out / "ablate" / kind
    w = run.args.workers
    plots = run.args.plot
    if kind == "cascade":
        rows, summary = cascade_benefit(cfg, workers=w)
        write_csv(d / "runs.csv", CASCADE_COLUMNS, rows)
        write_csv(d / "summary.csv", CASCADE_SUMMARY_COLUMNS, summary)
    elif kind == "equal-vlp":
        rows, summary = equal_vlp(cfg, workers=w)
        write_csv(d / "runs.csv", EQUAL_VLP_COLUMNS, rows)
        write_csv(d / "summary.csv", ["setting", "n_seeds", "hm_mean", "hm_std"], summary)
    elif kind == "unlabeled":
        rows, summary = unlabeled_sweep(cfg, workers=w)
        write_csv(d / "runs.csv", UNLABELED_COLUMNS, rows)
        write_csv(d / "summary.csv", ["per_class", "n_seeds", "hm_mean", "hm_std"], summary)
        if plots:
            from .plots import line_chart
            line_chart(d / "unlabeled.svg", [r["per_class"] for r in summary],
                       [r["hm_mean"] for r in summary], title="HM vs unlabeled images per class")
    elif kind == "depth-grid":
        rows = depth_grid(cfg, workers=w)
        write_csv(d / "grid.csv", DEPTH_COLUMNS, rows)
        if plots:
            from .plots import heatmap
            levels = list(dict.fromkeys(r["phase1_depth"] for r in rows))
            grid = [[r["hm_mean"] for r in rows if r["phase1_depth"] == a] for a in levels]
            heatmap(d / "depth_grid.svg", levels, levels, grid, title="HM by prompt depth",
                    xlabel="phase II depth", ylabel="phase I depth")
    elif kind == "length":
        rows = length_grid(cfg, workers=w)
        write_csv(d / "grid.csv", LENGTH_COLUMNS, rows)
        if plots:
            from .plots import heatmap
            lengths = list(dict.fromkeys(r["length"] for r in rows))
            grid = [[r["hm_mean"] for r in rows if r["length"] == L] for L in lengths]
            heatmap(d / "length.svg", lengths, ["frozen", "learnable"], grid,
                    title="HM by boosting length", ylabel="boosting length")
    run.snapshot(d, ablation=kind)
    print(str(d))


def cmd_report(run):
    """Collect every summary under ``--out`` into one markdown file."""
    lines = ["# CasPL desk-lab report", ""]
    ablate = run.out / "ablate"
    for kind in ABLATIONS:
        for name in ("summary.csv", "grid.csv"):
            path = ablate / kind / name
            if path.exists():
                rows = read_csv(path)
                lines += [f"## ablate {kind}", "", _md_table(rows), ""]
    adapt_reports = sorted((run.out / "adapt").glob("*/seed*/report.json"))
    if adapt_reports:
        lines += ["## adapt runs", "", "| run | base | novel | HM |", "|---|---|---|---|"]
        for p in adapt_reports:
            r = json.loads(p.read_text())
            tag = f"{p.parent.parent.name}/{p.parent.name}"
            lines.append(f"| {tag} | {r['base_acc']:.2f} | {r['novel_acc']:.2f} | {r['hm']:.2f} |")
        lines.append("")
    for p in sorted((run.out / "boost").glob("seed*/phase1_metrics.csv")):
        rows = read_csv(p)
        lines += [f"## boost {p.parent.name}", "",
                  f"held-out agreement {rows[0]['heldout_agreement']} -> "
                  f"{rows[-1]['heldout_agreement']} over {len(rows) - 1} epochs", ""]
    if len(lines) == 2:
        raise FileNotFoundError(f"no results found under {run.out}")
    path = run.out / "report.md"
    path.write_text("\n".join(lines))
    print(str(path))


def _md_table(rows):
    cols = list(rows[0])
    out = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    out += ["| " + " | ".join(r[c] for c in cols) + " |" for r in rows]
    return "\n".join(out)


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "boost": cmd_boost, "adapt": cmd_adapt,
    "eval": cmd_eval, "ablate": cmd_ablate, "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (see caspl.config for the schema)")
    common.add_argument("--seed", type=int, help="run seed (ablate: first of the seed range)")
    common.add_argument("--out", help="output root (default: $CASPL_OUT or ./runs)")
    common.add_argument("--workers", type=int, default=1, help="ablation worker processes")
    common.add_argument("--models", help="checkpoint root (default: <out>/models)")
    common.add_argument("--data", help="dataset directory written by gen-data "
                                       "(default: regenerate the target domain)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="caspl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write source/target domains")
    sub.add_parser("pretrain", parents=[common], help="pretrain (or reuse) student and teacher")
    sub.add_parser("boost", parents=[common], help="Phase I: train boosting prompts")
    a = sub.add_parser("adapt", parents=[common], help="Phase II: train adapting prompts")
    a.add_argument("--variant", choices=VARIANTS, default="TextShallow")
    a.add_argument("--boosting", help="boosting checkpoint stem, or 'auto' for this seed's "
                                      "boost output; omit to run without CasPL")
    a.add_argument("--learnable-boosting", action="store_true",
                   help="keep training a copy of the boosting prompts (ablation)")
    e = sub.add_parser("eval", parents=[common], help="zero-shot or base-to-novel evaluation")
    e.add_argument("--boosting", help="boosting checkpoint stem or 'auto'")
    e.add_argument("--adapting", help="adapting checkpoint stem (base-to-novel evaluation)")
    ab = sub.add_parser("ablate", parents=[common], help="multi-seed ablation grids")
    ab.add_argument("kind", choices=ABLATIONS)
    ab.add_argument("--plot", action="store_true", help="also write SVG plots")
    sub.add_parser("report", parents=[common], help="collect summaries into report.md")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        COMMANDS[args.command](Run(args))
    except (ConfigError, ContractError, CasplError) as exc:
        return _fail(exc, exc.exit_code)
    except OSError as exc:
        return _fail(exc, 3)
    return 0


def _fail(exc, code):
    kind = {2: "config", 3: "io", 4: "contract"}.get(code, "error")
    msg = str(exc)
    if isinstance(exc, OSError) and exc.filename and str(exc.filename) not in msg:
        msg = f"{msg}: {exc.filename}"
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": msg}),
          file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
