"""Fixed caption vocabulary, teacher templates and tokenization."""
from __future__ import annotations

import re
from dataclasses import dataclass

from ..errors import DataError

EOS = "<eos>"
MAX_CLASSES = 64
CLASS_PLACEHOLDER = "[class]"

# Per-dataset teacher templates; domain ids name the dataset they stand in for.
TEMPLATES = {
    "pets": "a photo of a [class], a type of pet.",
    "flowers": "a photo of a [class], a type of flower.",
    "food": "a photo of [class], a type of food.",
    "aircraft": "a photo of a [class], a type of aircraft.",
    "dtd": "[class] texture.",
    "eurosat": "a centered satellite photo of [class].",
    "ucf101": "a photo of a person doing [class].",
    "default": "a photo of a [class].",
}

# Prompted inputs carry no hand-written words, only the class slot.
BARE_TEMPLATE = "[class]"

WORDS = ["a", "photo", "of", "type", "pet", "flower", "food", "aircraft", "texture",
          "centered", "satellite", "person", "doing", ",", "."]


def class_token(i):
    return f"class{i:02d}"


VOCAB = [EOS] + WORDS + [class_token(i) for i in range(MAX_CLASSES)]
TOKEN_IDS = {w: i for i, w in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)


@dataclass(frozen=True)
class TemplateSpec:
    dataset_id: str
    template: str

    def __post_init__(self):
        if self.template.count(CLASS_PLACEHOLDER) != 1:
            raise DataError(f"template {self.template!r} must contain exactly one [class]")

    @classmethod
    def for_dataset(cls, dataset_id):
        return cls(dataset_id, TEMPLATES.get(dataset_id, TEMPLATES["default"]))


def split_words(text):
    """Lowercase, split on whitespace and detach ',' and '.' as their own tokens."""
    return re.findall(r"\[class\]|[^\s,.]+|[,.]", text.strip().lower())


def tokenize(class_name, template=BARE_TEMPLATE):
    """Token ids for ``template`` with ``class_name`` substituted, EOS appended."""
    if isinstance(template, TemplateSpec):
        template = template.template
    if template.count(CLASS_PLACEHOLDER) != 1:
        raise DataError(f"template {template!r} must contain exactly one [class]")
    ids = []
    for w in split_words(template):
        words = split_words(class_name) if w == CLASS_PLACEHOLDER else [w]
        for cw in words:
            if cw not in TOKEN_IDS:
                raise DataError(f"unknown token {cw!r} (class {class_name!r})")
            ids.append(TOKEN_IDS[cw])
    ids.append(TOKEN_IDS[EOS])
    return ids


def tokenize_batch(class_names, template=BARE_TEMPLATE):
    rows = [tokenize(c, template) for c in class_names]
    if len({len(r) for r in rows}) > 1:
        raise DataError("class names tokenize to different lengths under one template")
    return rows
