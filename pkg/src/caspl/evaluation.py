"""Base-to-novel and boosted zero-shot evaluation."""
from __future__ import annotations

import numpy as np

from .classifier import PromptedModel
from .domains import EvalReport
from .errors import ContractError
from .prompts import cascade
from .vlm import text as tx


def accuracy(view, images, labels, class_names):
    """Top-1 accuracy in percent over the label space ``class_names``."""
    if len(images) == 0:
        return 0.0
    pred = view.predict(images, class_names)
    return 100.0 * float(np.mean(pred == np.asarray(labels)))


def eval_base_to_novel(view, dataset, **meta):
    """Base accuracy over base classes, novel over novel classes, and their HM."""
    split = dataset.split
    names = dataset.class_names
    xb, yb = dataset.test_subset(split.base)
    xn, yn = dataset.test_subset(split.novel)
    base = accuracy(view, xb, yb, [names[c] for c in split.base])
    novel = accuracy(view, xn, yn, [names[c] for c in split.novel])
    info = {"n_classes": dataset.n_classes, "n_base_test": len(yb), "n_novel_test": len(yn),
            "data_seed": dataset.seed}
    info.update(meta)
    return EvalReport.from_accuracies(base, novel, **info)


def eval_zero_shot_with_boosting(student, boosting, dataset, seed=None):
    """Plain zero-shot (domain template, no prompts) against template-free boosted zero-shot.

    Returns a report whose ``base_acc``/``novel_acc`` are the boosted numbers; the
    plain numbers and all-class accuracies sit in ``meta``.
    """
    names = dataset.class_names
    plain = PromptedModel(student, template=dataset.spec.template)
    sets = [] if boosting is None else [s for s in boosting.sets() if s is not None]
    if any(not s.frozen for s in sets):
        raise ContractError("boosting prompts must be frozen for zero-shot evaluation")
    text = next((s for s in sets if s.branch == "text"), None)
    vision = next((s for s in sets if s.branch == "vision"), None)
    if text is None and vision is None:
        boosted = plain
    else:
        boosted = PromptedModel(student,
                                cascade(text, None) if text is not None else None,
                                cascade(vision, None) if vision is not None else None,
                                template=tx.BARE_TEMPLATE)
    plain_r = eval_base_to_novel(plain, dataset)
    boost_r = eval_base_to_novel(boosted, dataset)
    all_plain = accuracy(plain, dataset.test_images, dataset.test_labels, names)
    all_boost = accuracy(boosted, dataset.test_images, dataset.test_labels, names)
    meta = dict(boost_r.meta)
    meta.update({
        "plain_base_acc": round(plain_r.base_acc, 4), "plain_novel_acc": round(plain_r.novel_acc, 4),
        "plain_hm": round(plain_r.hm, 4), "plain_all_acc": round(all_plain, 4),
        "boosted_all_acc": round(all_boost, 4), "n_train": len(dataset.train_labels),
        "seed": seed,
    })
    return EvalReport(boost_r.base_acc, boost_r.novel_acc, boost_r.hm, meta)
