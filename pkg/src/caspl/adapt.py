"""Phase II: few-shot tuning of adapting prompts cascaded with frozen boosting prompts."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .classifier import CouplingProjector, MetaNet, PromptedModel
from .errors import ConfigError, ContractError, DataError
from .evaluation import eval_base_to_novel
from .prompts import cascade, init_prompt_set, layers_for_depth

log = logging.getLogger(__name__)

VARIANTS = ("TextShallow", "ConditionedTextShallow", "CoupledDeep", "IndependentDeep")
SHOTS = (1, 2, 4, 8, 16)

_DEFAULTS = {
    # text length, vision length, depth (None = all layers), lr, epochs, batch size
    "TextShallow": (8, 0, 1, 0.002, 50, 32),
    "ConditionedTextShallow": (8, 0, 1, 0.002, 10, 1),
    "CoupledDeep": (8, 8, None, 0.0035, 5, 4),
    "IndependentDeep": (8, 8, None, 0.0025, 20, 32),
}


@dataclass(frozen=True)
class AdaptStrategy:
    variant: str = "TextShallow"
    text_length: int = 8
    vision_length: int = 0
    depth: int | None = 1
    learning_rate: float = 0.002
    epochs: int = 50
    batch_size: int = 32
    momentum: float = 0.9

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.text_length < 1:
            raise ConfigError("text adapting length must be >= 1")
        deep = self.variant in ("CoupledDeep", "IndependentDeep")
        if deep and self.vision_length < 1:
            raise ConfigError(f"{self.variant} needs a vision adapting length >= 1")
        if not deep and self.vision_length:
            raise ConfigError(f"{self.variant} has no vision adapting prompts")
        if self.variant == "CoupledDeep" and self.vision_length != self.text_length:
            raise ConfigError("CoupledDeep maps text tokens one-to-one onto vision tokens")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError("epochs, batch_size must be >= 1 and learning_rate > 0")

    @classmethod
    def default(cls, variant, **overrides):
        if variant not in _DEFAULTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        base = cls(variant, *_DEFAULTS[variant])
        return replace(base, **overrides) if overrides else base

    @property
    def deep(self):
        return self.variant in ("CoupledDeep", "IndependentDeep")

    def layers(self, model_depth):
        return layers_for_depth(self.depth or model_depth)


@dataclass(frozen=True)
class FewShotConfig:
    shots: int = 16
    seed: int = 0
    base_only: bool = True

    def __post_init__(self):
        if self.shots not in SHOTS:
            raise ConfigError(f"shots must be one of {SHOTS}, got {self.shots}")


@dataclass
class FewShotSet:
    images: np.ndarray
    labels: np.ndarray  # indices into class_names
    class_names: list
    index: np.ndarray   # positions in the dataset's train split


def sample_few_shot(dataset, config=FewShotConfig()):
    """``shots`` train images per class, drawn only from base classes by default."""
    split = dataset.split
    classes = list(split.base) if config.base_only else list(split.base + split.novel)
    rng = np.random.default_rng([config.seed, 11])
    index, labels = [], []
    for j, c in enumerate(classes):
        members = np.asarray(split.train_index[c])
        if len(members) < config.shots:
            raise DataError(f"class {dataset.class_names[c]} has {len(members)} train images, "
                            f"needs {config.shots}")
        pick = np.sort(members[rng.permutation(len(members))[:config.shots]])
        index.extend(pick.tolist())
        labels += [j] * config.shots
    index = np.asarray(index, dtype=np.intp)
    return FewShotSet(dataset.train_images[index], np.asarray(labels, dtype=np.intp),
                      [dataset.class_names[c] for c in classes], index)


class DerivedPrompts:
    """Vision adapting slot whose tokens come from the coupling projector."""

    role = "adapting"
    branch = "vision"
    frozen = False

    def __init__(self, length, layers, width):
        self.length = length
        self.layers = tuple(layers)
        self.width = width

    def num_parameters(self):
        return 0


@dataclass
class AdaptResult:
    view: PromptedModel
    text: object
    vision: object
    coupling: CouplingProjector | None
    meta_net: MetaNet | None
    strategy: AdaptStrategy
    history: list = field(default_factory=list)  # (epoch, train_loss, base_acc, novel_acc)

    @property
    def final(self):
        return self.history[-1]

    def adapting_sets(self):
        return [s for s in (self.text, self.vision) if s is not None and hasattr(s, "params")]

    def write_metrics(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "base_acc", "novel_acc"])
            for epoch, loss, base, novel in self.history:
                w.writerow([epoch, f"{loss:.10f}",
                            "" if base is None else f"{base:.4f}",
                            "" if novel is None else f"{novel:.4f}"])
        return path


def build_adapting(student, strategy, seed):
    """Fresh adapting prompts (plus projector or meta-net) for a variant."""
    d = student.config.width
    D = student.config.depth
    layers = strategy.layers(D)
    text = init_prompt_set("adapting", "text", strategy.text_length, layers, d, seed, D)
    vision = coupling = meta_net = None
    if strategy.variant == "IndependentDeep":
        vision = init_prompt_set("adapting", "vision", strategy.vision_length, layers, d, seed, D)
    elif strategy.variant == "CoupledDeep":
        vision = DerivedPrompts(strategy.vision_length, layers, d)
        coupling = CouplingProjector(layers, d, d, seed)
    elif strategy.variant == "ConditionedTextShallow":
        meta_net = MetaNet(student.d_shared, d, seed)
    return text, vision, coupling, meta_net


def declared_trainable(text, vision, coupling, meta_net, boosting=None):
    names = {p.name for p in text.parameters()}
    if hasattr(vision, "params"):
        names |= {p.name for p in vision.parameters()}
    for extra in (coupling, meta_net):
        if extra is not None:
            names |= {p.name for p in extra.parameters()}
    if boosting is not None:
        names |= {p.name for p in boosting.parameters() if p.trainable}
    return names


def _boosting_for_phase(boosting, learnable):
    if boosting is None:
        return None
    if learnable:
        from .boost import BoostingPrompts
        return BoostingPrompts(boosting.text.copy().unfreeze(), boosting.vision.copy().unfreeze())
    if not boosting.frozen:
        raise ContractError("boosting prompts must be frozen before Phase II "
                            "(pass learnable_boosting=True for the learnability ablation)")
    return boosting


def run_adapt_phase(student, boosting, strategy, fewshot, dataset, seed=0,
                    learnable_boosting=False, eval_every=0, init=None):
    """Train adapting prompts with plain cross-entropy over few-shot base-class data.

    ``boosting`` is a frozen :class:`~caspl.boost.BoostingPrompts` or None.
    With ``learnable_boosting`` a private copy of the boosting prompts keeps
    training here; the caller's sets are never touched. Base/novel accuracy is
    evaluated every ``eval_every`` epochs (0: final epoch only).
    """
    student.freeze()
    boosting = _boosting_for_phase(boosting, learnable_boosting)
    shots = sample_few_shot(dataset, fewshot) if isinstance(fewshot, FewShotConfig) else fewshot
    if len(shots.labels) == 0:
        raise DataError("few-shot set is empty")
    text, vision, coupling, meta_net = init or build_adapting(student, strategy, seed)
    text_layout = cascade(boosting.text if boosting else None, text,
                          allow_unfrozen=learnable_boosting)
    vision_layout = None
    if boosting is not None or vision is not None:
        vision_layout = cascade(boosting.vision if boosting else None, vision,
                                allow_unfrozen=learnable_boosting)
    view = PromptedModel(student, text_layout, vision_layout, coupling=coupling, meta_net=meta_net)
    params = view.trainable_parameters()
    declared = declared_trainable(text, vision, coupling, meta_net, boosting)
    if {p.name for p in params} != declared:
        raise ContractError(f"trainable set {sorted(p.name for p in params)} differs from the "
                            f"declared set {sorted(declared)}")
    if any(p.trainable for p in student.parameters()):
        raise ContractError("student backbone must stay frozen in Phase II")

    opt = ad.SGD(params, lr=strategy.learning_rate, momentum=strategy.momentum)
    rng = np.random.default_rng([seed, 202])
    n = len(shots.labels)
    history = []
    for epoch in range(1, strategy.epochs + 1):
        opt.lr = ad.cosine_lr(strategy.learning_rate, epoch - 1, strategy.epochs)
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, strategy.batch_size):
            idx = order[i:i + strategy.batch_size]
            with ad.Tape() as tape:
                logits = view.logits(shots.images[idx], shots.class_names)
                loss = ad.cross_entropy(logits, shots.labels[idx])
            opt.step(ad.backward(tape, loss, params))
            total += loss.item() * len(idx)
        base = novel = None
        if epoch == strategy.epochs or (eval_every and epoch % eval_every == 0):
            report = eval_base_to_novel(view, dataset)
            base, novel = report.base_acc, report.novel_acc
        history.append((epoch, total / n, base, novel))
        log.info("adapt %s epoch %d loss %.4f", strategy.variant, epoch, total / n)
    return AdaptResult(view, text, vision, coupling, meta_net, strategy, history)


def save_adapt(result, stem, meta=None):
    """Checkpoint every Phase II tensor (prompts, projector, meta-net) with the strategy."""
    tensors = {}
    for s in result.adapting_sets():
        tensors.update({p.name: p.data for p in s.parameters()})
    for extra in (result.coupling, result.meta_net):
        if extra is not None:
            tensors.update({p.name: p.data for p in extra.parameters()})
    m = {"kind": "AdaptingPrompts", "strategy": asdict(result.strategy)}
    if meta:
        m.update(meta)
    return ad.save_tensors(stem, tensors, m)


def load_adapt(student, stem):
    """``(strategy, (text, vision, coupling, meta_net))`` restored from :func:`save_adapt`."""
    tensors, meta = ad.load_tensors(stem)
    if meta.get("kind") != "AdaptingPrompts":
        raise DataError(f"{stem}: not an adapting-prompt checkpoint")
    strategy = AdaptStrategy(**meta["strategy"])
    parts = build_adapting(student, strategy, seed=0)
    params = []
    for obj in parts:
        if obj is not None and hasattr(obj, "parameters"):
            params.extend(obj.parameters())
    for p in params:
        if p.name not in tensors:
            raise DataError(f"{stem}: missing tensor {p.name}")
        p.data = tensors[p.name].copy()
    return strategy, parts
