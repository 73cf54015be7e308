"""Multi-seed experiments and ablation grids over the default desk world."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapt import SHOTS, VARIANTS, AdaptStrategy, FewShotConfig, run_adapt_phase
from .boost import KDConfig, UnlabeledSet, run_boost_phase
from .errors import ConfigError, ContractError
from .evaluation import eval_base_to_novel
from .prompts import parameter_count
from .vlm import STUDENT_CONFIG
from .world import WorldConfig, load_world

log = logging.getLogger(__name__)

FULL = "Full"
UNLABELED_COUNTS = (1, 2, 4, 8, 16, 32, FULL)
LENGTHS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = WorldConfig()
    kd: KDConfig = KDConfig()
    shots: int = 16
    seeds: tuple = (0, 1, 2, 3, 4)
    variants: tuple = ("TextShallow", "IndependentDeep")
    ablation_variant: str = "IndependentDeep"
    adapt_overrides: dict = field(default_factory=dict, hash=False)  # variant -> field overrides
    cache: str | None = None

    def __post_init__(self):
        for v in self.variants + (self.ablation_variant,):
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.shots not in SHOTS:
            raise ConfigError(f"shots must be one of {SHOTS}, got {self.shots}")

    def strategy(self, variant, **extra):
        over = dict(self.adapt_overrides.get(variant, {}))
        over.update(extra)
        return AdaptStrategy.default(variant, **over)

    def to_dict(self):
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["variants"] = list(self.variants)
        return d


class Lab:
    """Lazily loaded world plus a per-process memo of Phase I results."""

    def __init__(self, config=ExperimentConfig()):
        self.config = config
        self._world = None
        self._boost = {}

    def world(self):
        if self._world is None:
            self._world = load_world(self.config.world, self.config.cache)
        return self._world

    def boosting(self, seed, kd=None, per_class=None):
        kd = kd or self.config.kd
        key = (seed, kd, per_class)
        if key not in self._boost:
            student, teacher, ds = self.world()
            pool = ds.unlabeled(per_class=per_class, seed=seed)
            self._boost[key] = run_boost_phase(student, teacher, pool, kd, seed=seed).prompts
        return self._boost[key]

    def adapt(self, variant, seed, boosting, learnable=False, **strategy_extra):
        student, _, ds = self.world()
        strategy = self.config.strategy(variant, **strategy_extra)
        res = run_adapt_phase(student, boosting, strategy, FewShotConfig(self.config.shots, seed),
                              ds, seed=seed, learnable_boosting=learnable)
        return res, eval_base_to_novel(res.view, ds)


# ------------------------------------------------------------------ helpers
def summarize(values):
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _run_tasks(fn, config, items, workers):
    """Map ``fn(config, item)`` over ``items``; results come back in item order."""
    if workers and workers > 1 and len(items) > 1:
        _lab_for(config).world()  # warm the checkpoint cache once before forking
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, [config] * len(items), items))
    return [fn(config, item) for item in items]


_LABS = {}


def _lab_for(config):
    """One :class:`Lab` per distinct config per process, so Phase I results are shared."""
    key = repr(config)
    if key not in _LABS:
        _LABS.clear()
        _LABS[key] = Lab(config)
    return _LABS[key]


# ------------------------------------------------------------ cascade benefit
CASCADE_COLUMNS = ["variant", "seed", "base", "novel", "hm", "caspl_base", "caspl_novel",
                   "caspl_hm", "delta_hm"]


def _cascade_seed(config, seed):
    lab = _lab_for(config)
    rows = []
    for variant in config.variants:
        _, plain = lab.adapt(variant, seed, None)
        _, boosted = lab.adapt(variant, seed, lab.boosting(seed))
        rows.append({"variant": variant, "seed": seed, "base": plain.base_acc,
                     "novel": plain.novel_acc, "hm": plain.hm, "caspl_base": boosted.base_acc,
                     "caspl_novel": boosted.novel_acc, "caspl_hm": boosted.hm,
                     "delta_hm": boosted.hm - plain.hm})
    return rows


def cascade_benefit(config=ExperimentConfig(), workers=1):
    """Per-seed HM of each variant with and without CasPL, plus a summary per variant."""
    per_seed = [r for rows in _run_tasks(_cascade_seed, config, list(config.seeds), workers)
                for r in rows]
    summary = []
    for v in config.variants:
        rows = [r for r in per_seed if r["variant"] == v]
        row = {"variant": v, "n_seeds": len(rows)}
        for c in ("hm", "caspl_hm", "delta_hm"):
            row[f"{c}_mean"], row[f"{c}_std"] = summarize([r[c] for r in rows])
        summary.append(row)
    return per_seed, summary


CASCADE_SUMMARY_COLUMNS = ["variant", "n_seeds", "hm_mean", "hm_std", "caspl_hm_mean",
                           "caspl_hm_std", "delta_hm_mean", "delta_hm_std"]


# ----------------------------------------------------------------- equal VLP
EQUAL_VLP_COLUMNS = ["setting", "seed", "boost_tokens", "adapt_tokens", "prompt_params",
                     "base", "novel", "hm"]


def _equal_vlp_seed(config, seed):
    lab = _lab_for(config)
    variant = config.ablation_variant
    if variant != "IndependentDeep":
        # only this layout spends its adapting tokens on the same layers and branches as Phase I
        raise ConfigError("equal-vlp compares token budgets under IndependentDeep only")
    half = config.kd.length // 2
    if half < 1 or 2 * half != config.kd.length:
        raise ConfigError("equal-vlp needs an even boosting length")
    boost = lab.boosting(seed, kd=replace(config.kd, length=half))
    res_c, rep_c = lab.adapt(variant, seed, boost, text_length=half, vision_length=half)
    res_a, rep_a = lab.adapt(variant, seed, None, text_length=2 * half, vision_length=2 * half)
    count_c, _ = parameter_count(boost.sets() + res_c.adapting_sets())
    count_a, _ = parameter_count(res_a.adapting_sets())
    if count_c != count_a:
        raise ContractError(f"equal-vlp prompt counts differ: {count_c} vs {count_a}")
    return [
        {"setting": f"L{half} frozen + N{half}", "seed": seed, "boost_tokens": half,
         "adapt_tokens": half, "prompt_params": count_c, "base": rep_c.base_acc,
         "novel": rep_c.novel_acc, "hm": rep_c.hm},
        {"setting": f"N{2 * half}", "seed": seed, "boost_tokens": 0, "adapt_tokens": 2 * half,
         "prompt_params": count_a, "base": rep_a.base_acc, "novel": rep_a.novel_acc,
         "hm": rep_a.hm},
    ]


def equal_vlp(config=ExperimentConfig(), workers=1):
    """Same prompt-token budget spent as frozen boosting + adapting versus adapting only."""
    rows = [r for rs in _run_tasks(_equal_vlp_seed, config, list(config.seeds), workers)
            for r in rs]
    return rows, _summary_by(rows, "setting")


def _summary_by(rows, key, value="hm"):
    out = []
    for k in dict.fromkeys(r[key] for r in rows):
        vals = [r[value] for r in rows if r[key] == k]
        mean, std = summarize(vals)
        out.append({key: k, "n_seeds": len(vals), f"{value}_mean": mean, f"{value}_std": std})
    return out


# ------------------------------------------------------------ unlabeled count
UNLABELED_COLUMNS = ["per_class", "seed", "pool_size", "base", "novel", "hm"]


def _unlabeled_seed(config, item):
    seed, counts = item
    lab = _lab_for(config)
    n_classes = config.world.domain.n_classes
    rows = []
    for k in counts:
        per_class = None if k == FULL else int(k)
        boost = lab.boosting(seed, per_class=per_class)
        _, rep = lab.adapt(config.ablation_variant, seed, boost)
        pool = config.world.domain.train_per_class if per_class is None else per_class
        rows.append({"per_class": k, "seed": seed, "pool_size": pool * n_classes,
                     "base": rep.base_acc, "novel": rep.novel_acc, "hm": rep.hm})
    return rows


def unlabeled_sweep(config=ExperimentConfig(), counts=UNLABELED_COUNTS, workers=1):
    """HM as a function of the unlabeled images per class seen in Phase I (nested pools)."""
    counts = tuple(counts)
    items = [(s, counts) for s in config.seeds]
    rows = [r for rs in _run_tasks(_unlabeled_seed, config, items, workers) for r in rs]
    return rows, _summary_by(rows, "per_class")


# ----------------------------------------------------------------- depth grid
DEPTH_COLUMNS = ["phase1_depth", "phase2_depth", "n_seeds", "hm_mean", "hm_std"]


def depth_levels(D):
    """``{1, D/3, D/2, 3D/4, D}`` rounded half-up, as a sorted tuple."""
    fracs = (1 / 3, 1 / 2, 3 / 4)
    mids = [max(1, int(np.floor(D * f + 0.5))) for f in fracs]
    return tuple([1] + mids + [D])


def _depth_seed(config, item):
    seed, levels = item
    lab = _lab_for(config)
    out = {}
    for d1 in levels:
        boost = lab.boosting(seed, kd=replace(config.kd, depth=d1))
        for d2 in levels:
            _, rep = lab.adapt(config.ablation_variant, seed, boost, depth=d2)
            out[(d1, d2)] = rep.hm
    return out


def depth_grid(config=ExperimentConfig(), levels=None, workers=1):
    """Phase I boosting depth x Phase II adapting depth HM grid."""
    levels = tuple(levels or depth_levels(STUDENT_CONFIG.depth))
    if len(set(levels)) != len(levels):
        raise ConfigError(f"depth levels must be distinct, got {levels}")
    results = _run_tasks(_depth_seed, config, [(s, levels) for s in config.seeds], workers)
    rows = []
    for d1 in levels:
        for d2 in levels:
            mean, std = summarize([r[(d1, d2)] for r in results])
            rows.append({"phase1_depth": d1, "phase2_depth": d2, "n_seeds": len(results),
                         "hm_mean": mean, "hm_std": std})
    return rows


# ---------------------------------------------------------------- length grid
LENGTH_COLUMNS = ["length", "boosting", "n_seeds", "hm_mean", "hm_std"]


def _length_seed(config, item):
    seed, lengths = item
    lab = _lab_for(config)
    out = {}
    for L in lengths:
        boost = lab.boosting(seed, kd=replace(config.kd, length=L))
        for mode in ("frozen", "learnable"):
            _, rep = lab.adapt(config.ablation_variant, seed, boost, learnable=mode == "learnable")
            out[(L, mode)] = rep.hm
    return out


def length_grid(config=ExperimentConfig(), lengths=LENGTHS, workers=1):
    """Boosting length x (frozen | learnable in Phase II) HM grid."""
    lengths = tuple(lengths)
    results = _run_tasks(_length_seed, config, [(s, lengths) for s in config.seeds], workers)
    rows = []
    for L in lengths:
        for mode in ("frozen", "learnable"):
            mean, std = summarize([r[(L, mode)] for r in results])
            rows.append({"length": L, "boosting": mode, "n_seeds": len(results),
                         "hm_mean": mean, "hm_std": std})
    return rows


# ------------------------------------------------------------------- schemas
SCHEMAS = {
    "cascade": CASCADE_COLUMNS,
    "cascade-summary": CASCADE_SUMMARY_COLUMNS,
    "equal-vlp": EQUAL_VLP_COLUMNS,
    "unlabeled": UNLABELED_COLUMNS,
    "depth-grid": DEPTH_COLUMNS,
    "length": LENGTH_COLUMNS,
}


def validate_csv(path, kind, expected_rows=None):
    """Check header, row count and numeric fields of an emitted report."""
    rows = read_csv(path)
    with Path(path).open() as fh:
        header = fh.readline().strip().split(",")
    if header != SCHEMAS[kind]:
        raise ContractError(f"{path}: header {header} != {SCHEMAS[kind]}")
    if expected_rows is not None and len(rows) != expected_rows:
        raise ContractError(f"{path}: {len(rows)} rows, expected {expected_rows}")
    for r in rows:
        for c in header:
            if c.endswith(("_mean", "_std")) or c in ("hm", "base", "novel"):
                v = float(r[c])
                if not (np.isfinite(v) and (c.endswith("_std") or 0.0 <= v <= 100.0)):
                    raise ContractError(f"{path}: {c}={v} out of range")
    return rows


def heldout_pool(dataset):
    """Test images with labels stripped; used only for agreement monitoring."""
    return UnlabeledSet(dataset.test_images, dataset.class_names)

