"""The default desk world: a source domain, a shifted target domain and two pretrained models.

The student sees only the source domain during pretraining; the teacher is
larger and sees the source plus ten independently shifted variants, which is
what gives it knowledge of the target that the student lacks. Checkpoints are
cached on disk keyed by a hash of the world configuration.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .domains import DomainSpec, generate_domain, shift_domain
from .vlm import STUDENT_CONFIG, TEACHER_CONFIG, MiniClip
from .vlm.pretrain import contrastive_pretrain

log = logging.getLogger(__name__)

CACHE_ENV = "CASPL_CACHE"


@dataclass(frozen=True)
class WorldConfig:
    domain: DomainSpec = DomainSpec()
    target_shift: float = 1.0
    target_shift_seed: int = 1
    data_seed: int = 0
    source_seed: int = 123
    student_seed: int = 0
    student_epochs: int = 5
    student_lr: float = 2e-3
    teacher_seed: int = 1
    teacher_variants: int = 10
    teacher_per_class: int = 30
    teacher_epochs: int = 4
    teacher_lr: float = 1e-3
    batch_size: int = 10
    context_max: int = 16

    def key(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def cache_dir(root=None):
    return Path(root or os.environ.get(CACHE_ENV) or ".caspl_cache")


def target_domain(cfg=WorldConfig()):
    return shift_domain(cfg.domain, cfg.target_shift, cfg.data_seed, shift_seed=cfg.target_shift_seed)


def source_domain(cfg=WorldConfig(), per_class=None):
    spec = cfg.domain if per_class is None else replace(cfg.domain, train_per_class=per_class)
    return generate_domain(spec, cfg.source_seed)


def teacher_corpus(cfg=WorldConfig()):
    spec = replace(cfg.domain, train_per_class=cfg.teacher_per_class)
    parts = [generate_domain(spec, cfg.source_seed)]
    parts += [shift_domain(spec, cfg.target_shift, 200 + i, shift_seed=100 + i)
              for i in range(cfg.teacher_variants)]
    images = np.concatenate([p.train_images for p in parts])
    labels = np.concatenate([p.train_labels for p in parts])
    return images, labels


def pretrain_student(cfg=WorldConfig()):
    src = source_domain(cfg)
    model = MiniClip(STUDENT_CONFIG, seed=cfg.student_seed, name="student")
    contrastive_pretrain(model, src.train_images, src.train_labels, src.class_names,
                         epochs=cfg.student_epochs, lr=cfg.student_lr,
                         batch_size=cfg.batch_size, seed=cfg.student_seed,
                         context_max=cfg.context_max)
    return model


def pretrain_teacher(cfg=WorldConfig()):
    images, labels = teacher_corpus(cfg)
    model = MiniClip(TEACHER_CONFIG, seed=cfg.teacher_seed, name="teacher")
    contrastive_pretrain(model, images, labels, cfg.domain.class_names,
                         epochs=cfg.teacher_epochs, lr=cfg.teacher_lr,
                         batch_size=cfg.batch_size, seed=cfg.teacher_seed,
                         context_max=cfg.context_max)
    return model


def world_dir(cfg=WorldConfig(), root=None):
    return cache_dir(root) / cfg.key()


def load_world(cfg=WorldConfig(), root=None, require=False):
    """``(student, teacher, target dataset)``, pretraining on a cache miss.

    With ``require`` a missing checkpoint raises FileNotFoundError instead.
    """
    base = world_dir(cfg, root)
    models = {}
    for name, fn in (("student", pretrain_student), ("teacher", pretrain_teacher)):
        stem = base / name
        if Path(f"{stem}.json").exists():
            models[name] = MiniClip.load(stem)
        elif require:
            raise FileNotFoundError(f"missing {name} checkpoint {stem}.json (run pretrain first)")
        else:
            log.info("pretraining %s (cache miss at %s)", name, stem)
            models[name] = fn(cfg)
            base.mkdir(parents=True, exist_ok=True)
            models[name].save(stem)
        models[name].freeze()
    return models["student"], models["teacher"], target_domain(cfg)
