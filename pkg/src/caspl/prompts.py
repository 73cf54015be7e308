"""Boosting/adapting prompt sets, their cascade layout and parameter accounting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, load_tensors, save_tensors
from .errors import ConfigError, ContractError, DataError
from .vlm.model import PromptSegment

ROLES = ("boosting", "adapting")
BRANCHES = ("text", "vision")
INIT_STD = 0.02

# Position order of the prompt region per branch. Text prompts precede the
# class tokens; vision prompts follow the class token and patches.
TEXT_ORDER = ("adapting", "boosting", "class")
VISION_ORDER = ("cls", "patches", "boosting", "adapting")


@dataclass
class PromptSet:
    role: str
    branch: str
    length: int
    layers: tuple
    width: int
    params: dict = field(repr=False)
    frozen: bool = False

    @property
    def name(self):
        return f"{self.role}.{self.branch}"

    def parameters(self):
        return [self.params[k] for k in self.layers]

    def tokens(self):
        return {k: self.params[k] for k in self.layers}

    def freeze(self):
        self.frozen = True
        for p in self.params.values():
            p.trainable = False
        return self

    def unfreeze(self):
        self.frozen = False
        for p in self.params.values():
            p.trainable = True
        return self

    def snapshot(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def copy(self):
        """Independent copy with fresh Parameter objects and the same frozen flag."""
        params = {k: Parameter(p.name, p.data.copy(), p.trainable) for k, p in self.params.items()}
        return PromptSet(self.role, self.branch, self.length, self.layers, self.width, params,
                         self.frozen)

    def num_parameters(self):
        return len(self.layers) * self.length * self.width

    def segment(self, tokens=None):
        return PromptSegment(self.role, self.length, dict(tokens or self.tokens()))


def layers_for_depth(depth):
    """Layer set ``{0, ..., depth-1}`` for a prompt depth."""
    if depth < 1:
        raise ConfigError(f"prompt depth must be >= 1, got {depth}")
    return tuple(range(depth))


def init_prompt_set(role, branch, length, layers, d, seed, model_depth=None):
    """Fresh ``[length, d]`` tokens per layer drawn from Normal(0, 0.02)."""
    if role not in ROLES:
        raise ConfigError(f"role must be one of {ROLES}, got {role!r}")
    if branch not in BRANCHES:
        raise ConfigError(f"branch must be one of {BRANCHES}, got {branch!r}")
    if length < 1:
        raise ConfigError(f"prompt length must be >= 1, got {length}")
    layers = tuple(sorted(set(int(k) for k in layers)))
    if not layers:
        raise ConfigError("prompt set needs at least one layer")
    if layers[0] != 0:
        raise ConfigError("prompt layers must include the input layer 0")
    if model_depth is not None and layers[-1] >= model_depth:
        raise ConfigError(f"prompt layer {layers[-1]} outside model depth {model_depth}")
    rng = np.random.default_rng([seed, ROLES.index(role), BRANCHES.index(branch)])
    params = {}
    for k in layers:
        key = f"prompt.{role}.{branch}.{k}"
        params[k] = Parameter(key, rng.normal(0.0, INIT_STD, (length, d)))
    return PromptSet(role, branch, length, layers, d, params)


@dataclass
class CascadeLayout:
    """Ordering of boosting and adapting prompts inside one branch's sequence."""

    branch: str
    boosting: PromptSet | None = None
    adapting: object | None = None  # PromptSet, or any object with length/layers

    @property
    def order(self):
        full = TEXT_ORDER if self.branch == "text" else VISION_ORDER
        present = {"boosting": self.boosting is not None, "adapting": self.adapting is not None}
        return tuple(r for r in full if present.get(r, True))

    def prompt_length(self):
        return sum(s.length for s in (self.boosting, self.adapting) if s is not None)

    def sequence_length(self, base_len):
        return base_len + self.prompt_length()

    def depth_masks(self):
        return {r: tuple(s.layers) for r, s in (("boosting", self.boosting),
                                                 ("adapting", self.adapting)) if s is not None}

    def trainable(self):
        out = {}
        if self.boosting is not None:
            out["boosting"] = not self.boosting.frozen
        if self.adapting is not None:
            out["adapting"] = not getattr(self.adapting, "frozen", False)
        return out

    def spans(self, base_len):
        """``{segment: (start, end)}`` for the layer-0 sequence."""
        lengths = {"boosting": self.boosting.length if self.boosting else 0,
                   "adapting": self.adapting.length if self.adapting else 0}
        spans = {}
        pos = 0
        for r in self.order:
            if r in ("class", "cls", "patches"):
                n = base_len if r == "class" else (1 if r == "cls" else base_len - 1)
            else:
                n = lengths[r]
            spans[r] = (pos, pos + n)
            pos += n
        return spans

    def segments(self, adapting_tokens=None, boosting_tokens=None):
        """Prompt segments in position order for the model's encoders."""
        segs = []
        for r in self.order:
            if r == "boosting":
                segs.append(self.boosting.segment(boosting_tokens))
            elif r == "adapting":
                toks = adapting_tokens if adapting_tokens is not None else self.adapting.tokens()
                segs.append(PromptSegment("adapting", self.adapting.length, dict(toks)))
        return segs


def cascade(boosting, adapting, allow_unfrozen=False):
    """Layout for one branch: frozen boosting tokens cascaded with adapting ones."""
    if boosting is None and adapting is None:
        raise ConfigError("cascade needs at least one prompt set")
    branch = (boosting or adapting).branch
    if boosting is not None:
        if boosting.role != "boosting":
            raise ContractError(f"{boosting.name} is not a boosting set")
        if not boosting.frozen and not allow_unfrozen:
            raise ContractError("boosting prompts must be frozen before cascading "
                                "(pass allow_unfrozen=True for the learnability ablation)")
    if adapting is not None and boosting is not None:
        if adapting.branch != boosting.branch:
            raise ConfigError(f"branch mismatch: {boosting.branch} vs {adapting.branch}")
        if adapting.width != boosting.width:
            raise ConfigError(f"width mismatch: {boosting.width} vs {adapting.width}")
    return CascadeLayout(branch, boosting, adapting)


def parameter_count(sets, model_params=0):
    """``(prompt token parameters, prompt / (prompt + model) ratio)``."""
    total = int(sum(s.num_parameters() for s in sets))
    denom = total + int(model_params)
    return total, (total / denom if denom else 0.0)


def save_prompt_sets(stem, sets, meta=None):
    tensors = {}
    info = []
    for s in sets:
        for k in s.layers:
            tensors[s.params[k].name] = s.params[k].data
        info.append({"role": s.role, "branch": s.branch, "length": s.length,
                     "layers": list(s.layers), "width": s.width, "frozen": s.frozen})
    m = {"kind": "PromptSets", "sets": info}
    if meta:
        m.update(meta)
    return save_tensors(stem, tensors, m)


def load_prompt_sets(stem):
    tensors, meta = load_tensors(stem)
    if meta.get("kind") != "PromptSets":
        raise DataError(f"{stem}: not a prompt checkpoint")
    sets = []
    for info in meta["sets"]:
        params = {}
        for k in info["layers"]:
            key = f"prompt.{info['role']}.{info['branch']}.{k}"
            params[k] = Parameter(key, tensors[key])
        s = PromptSet(info["role"], info["branch"], info["length"], tuple(info["layers"]),
                      info["width"], params)
        if info["frozen"]:
            s.freeze()
        sets.append(s)
    return sets, meta
