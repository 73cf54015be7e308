"""Phase I: distil a frozen teacher into boosting prompts over unlabeled images."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .classifier import PromptedModel
from .errors import ConfigError, ContractError, ShapeError
from .prompts import cascade, init_prompt_set, layers_for_depth
from .vlm import text as tx

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KDConfig:
    tau_kd: float = 1.0
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.0025
    momentum: float = 0.9
    teacher_template: str = "default"
    length: int = 8
    depth: int | None = None  # None: every student layer

    def __post_init__(self):
        if not self.tau_kd > 0:
            raise ConfigError(f"tau_kd must be > 0, got {self.tau_kd}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError("batch_size must be >= 1 and learning_rate > 0")
        if self.length < 1:
            raise ConfigError("boosting length must be >= 1")


class UnlabeledSet:
    """Domain images with no labels attached, plus the domain's class names.

    There is deliberately no way to read a per-image label from this object.
    """

    __slots__ = ("images", "class_names", "source_index")

    def __init__(self, images, class_names, source_index=None):
        self.images = np.asarray(images, dtype=np.float64)
        self.class_names = list(class_names)
        self.source_index = None if source_index is None else np.asarray(source_index)

    def __len__(self):
        return len(self.images)


@dataclass
class BoostingPrompts:
    text: object
    vision: object

    def sets(self):
        return [self.text, self.vision]

    def freeze(self):
        self.text.freeze()
        self.vision.freeze()
        return self

    @property
    def frozen(self):
        return self.text.frozen and self.vision.frozen

    def parameters(self):
        return self.text.parameters() + self.vision.parameters()


@dataclass
class BoostResult:
    prompts: BoostingPrompts
    history: list = field(default_factory=list)  # (epoch, kd_loss, heldout_agreement)

    def write_metrics(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "kd_loss", "heldout_agreement"])
            for epoch, loss, agree in self.history:
                w.writerow([epoch, f"{loss:.10f}", f"{agree:.6f}"])
        return path


def teacher_logits(teacher, images, template, class_names, batch_size=256):
    """Frozen-teacher logits ``[batch, C]``; evaluated with no tape."""
    if any(p.trainable for p in teacher.parameters()):
        raise ContractError("teacher must be fully frozen")
    if isinstance(template, tx.TemplateSpec):
        template = template.template
    y = teacher.encode_text(class_names, template).data
    out = []
    for i in range(0, len(images), batch_size):
        x = teacher.encode_image(images[i:i + batch_size]).data
        out.append(x @ y.T / teacher.tau_clip)
    return np.concatenate(out)


def kd_loss(student_logits, teacher_logits, tau_kd=1.0):
    """Batch-mean ``KL(softmax(f_T / tau) || softmax(f_S / tau))``; no gradient into ``f_T``."""
    if not tau_kd > 0:
        raise ConfigError(f"tau_kd must be > 0, got {tau_kd}")
    fs = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    ft = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if fs.shape != ft.shape:
        raise ShapeError("kd_loss", fs.shape, ft.shape)
    p = ad.softmax(Tensor(ft), tau=tau_kd)
    q = ad.softmax(fs, tau=tau_kd)
    return ad.kl_divergence(p, q)


def boosted_student(student, prompts, allow_unfrozen=False):
    text = cascade(prompts.text, None, allow_unfrozen=allow_unfrozen)
    vision = cascade(prompts.vision, None, allow_unfrozen=allow_unfrozen)
    return PromptedModel(student, text, vision)


def agreement(student_view, images, class_names, target_logits):
    pred = student_view.predict(images, class_names)
    return float(np.mean(pred == np.asarray(target_logits).argmax(axis=1)))


def run_boost_phase(student, teacher, unlabeled, config=KDConfig(), seed=0, heldout=None,
                    template=None, init=None):
    """Train text and vision boosting prompts against the teacher; return them frozen.

    ``heldout`` is an :class:`UnlabeledSet` used only to report top-1
    agreement between student and teacher after every epoch (epoch 0 is the
    untrained prompt state).
    """
    if len(unlabeled) == 0:
        raise ConfigError("unlabeled set is empty")
    student.freeze()
    teacher.freeze()
    depth = config.depth or student.config.depth
    layers = layers_for_depth(depth)
    d = student.config.width
    if init is None:
        prompts = BoostingPrompts(
            init_prompt_set("boosting", "text", config.length, layers, d, seed, student.config.depth),
            init_prompt_set("boosting", "vision", config.length, layers, d, seed, student.config.depth))
    else:
        prompts = init
    template = template or tx.TEMPLATES.get(config.teacher_template, tx.TEMPLATES["default"])
    names = unlabeled.class_names
    ft_all = teacher_logits(teacher, unlabeled.images, template, names)
    held_ft = None
    if heldout is not None and len(heldout):
        held_ft = teacher_logits(teacher, heldout.images, template, names)

    view = boosted_student(student, prompts, allow_unfrozen=True)
    params = prompts.parameters()
    opt = ad.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    rng = np.random.default_rng([seed, 101])
    n = len(unlabeled)

    def heldout_agreement():
        if held_ft is None:
            return float("nan")
        return agreement(view, heldout.images, names, held_ft)

    def pool_loss():
        total = 0.0
        for i in range(0, n, 256):
            fs = view.logits(unlabeled.images[i:i + 256], names)
            total += kd_loss(fs, ft_all[i:i + 256], config.tau_kd).item() * len(fs.data)
        return total / n

    history = [(0, pool_loss(), heldout_agreement())]
    for epoch in range(1, config.epochs + 1):
        opt.lr = ad.cosine_lr(config.learning_rate, epoch - 1, config.epochs)
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            with ad.Tape() as tape:
                fs = view.logits(unlabeled.images[idx], names)
                loss = kd_loss(fs, ft_all[idx], config.tau_kd)
            opt.step(ad.backward(tape, loss, params))
            losses.append((loss.item(), len(idx)))
        mean_loss = sum(l * k for l, k in losses) / n
        history.append((epoch, mean_loss, heldout_agreement()))
        log.info("boost epoch %d kd %.5f agreement %.4f", epoch, mean_loss, history[-1][2])
    prompts.freeze()
    return BoostResult(prompts, history)
