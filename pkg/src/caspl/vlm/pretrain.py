"""Contrastive image/caption pretraining that stands in for released CLIP weights."""
from __future__ import annotations

import logging

import numpy as np

from .. import autodiff as ad
from ..errors import ConfigError, ContractError
from . import text as tx

log = logging.getLogger(__name__)

MIN_TAU = 0.01


def contrastive_loss(model, images, class_names, template):
    """Symmetric in-batch cross-entropy; pair ``i`` is (images[i], caption i)."""
    n = len(class_names)
    if n < 2:
        raise ContractError("contrastive loss needs a batch of at least 2 pairs")
    x = model.encode_image(images)
    y = model.encode_text(class_names, template)
    logits = model.logits(x, y)
    target = np.arange(n)
    loss = ad.mul(ad.add(ad.cross_entropy(logits, target),
                         ad.cross_entropy(ad.transpose(logits), target)), 0.5)
    return loss, logits


def _batches(labels, batch_size, rng):
    """Batches of distinct classes so that no two captions in a batch coincide."""
    pools = {c: list(rng.permutation(np.flatnonzero(labels == c))) for c in np.unique(labels)}
    batches = []
    while True:
        live = [c for c in pools if pools[c]]
        if len(live) < 2:
            break
        chosen = rng.permutation(live)[:batch_size]
        batches.append([pools[c].pop() for c in chosen])
    return batches


def with_context(template, n, rng):
    """``template`` preceded by ``n`` random caption words."""
    if n <= 0:
        return template
    words = [tx.WORDS[i] for i in rng.integers(len(tx.WORDS), size=n)]
    return " ".join(words) + " " + template


def contrastive_pretrain(model, images, labels, class_names, epochs, lr, batch_size=16,
                         seed=0, templates=None, callback=None, context_max=0):
    """Train every model parameter on the paired corpus with Adam.

    ``labels`` index ``class_names``; each image's caption is its class name
    rendered through a template drawn per batch from ``templates``, preceded
    by up to ``context_max`` random words so that every text position up to
    that length is seen in training.
    Returns per-epoch ``(mean loss, in-batch image->caption top-1)``.
    """
    if batch_size < 2:
        raise ContractError("contrastive pretraining needs batch_size >= 2")
    if epochs < 1 or not lr > 0:
        raise ConfigError("epochs must be >= 1 and lr > 0")
    labels = np.asarray(labels)
    templates = list(templates or tx.TEMPLATES.values())
    rng = np.random.default_rng(seed)
    model.unfreeze()
    opt = ad.Adam(model.parameters(), lr=lr, weight_decay=1e-4)
    history = []
    for epoch in range(epochs):
        losses, hits, seen = [], 0, 0
        for idx in _batches(labels, batch_size, rng):
            names = [class_names[labels[i]] for i in idx]
            template = templates[rng.integers(len(templates))]
            if context_max:
                template = with_context(template, int(rng.integers(context_max + 1)), rng)
            with ad.Tape() as tape:
                loss, logits = contrastive_loss(model, images[idx], names, template)
            grads = ad.backward(tape, loss, model.parameters())
            opt.step(grads)
            lt = model.params["log_temp"]
            lt.data = np.maximum(lt.data, np.log(MIN_TAU))
            losses.append(loss.item())
            hits += int((logits.data.argmax(axis=1) == np.arange(len(idx))).sum())
            seen += len(idx)
        history.append((float(np.mean(losses)), hits / seen))
        log.info("pretrain %s epoch %d loss %.4f top1 %.3f", model.name, epoch,
                 history[-1][0], history[-1][1])
        if callback is not None:
            callback(epoch, *history[-1])
    model.freeze()
    return history


def retrieval_top1(model, images, labels, class_names, batch_size=16, seed=0,
                   template=tx.TEMPLATES["default"]):
    """In-batch image->caption top-1 over class-distinct batches (no training)."""
    rng = np.random.default_rng(seed)
    hits = seen = 0
    for idx in _batches(np.asarray(labels), batch_size, rng):
        names = [class_names[labels[i]] for i in idx]
        x = model.encode_image(images[idx]).data
        y = model.encode_text(names, template).data
        hits += int(((x @ y.T).argmax(axis=1) == np.arange(len(idx))).sum())
        seen += len(idx)
    return hits / seen
