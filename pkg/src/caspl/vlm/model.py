"""Miniature CLIP-style dual encoder with per-layer prompt slots."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..autodiff import Parameter, Tensor
from ..errors import ConfigError, ContractError, DataError, ShapeError
from . import text as tx


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 6
    width: int = 32
    heads: int = 4
    max_seq: int = 64
    patch_size: int = 4
    image_size: int = 16
    vocab_size: int = tx.VOCAB_SIZE
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.vocab_size < tx.VOCAB_SIZE:
            raise ConfigError(f"vocab_size must be >= {tx.VOCAB_SIZE}")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2


STUDENT_CONFIG = EncoderConfig(depth=6, width=32, heads=4)
TEACHER_CONFIG = EncoderConfig(depth=8, width=64, heads=4)


@dataclass
class PromptSegment:
    """A run of ``length`` prompt positions in an encoder input.

    ``tokens[k]`` is the tensor that occupies the span at the input of layer
    ``k``, shaped ``[length, width]`` (shared over the batch) or
    ``[batch, length, width]``. Layer 0 must be present; a layer missing from
    the dict lets the previous layer's outputs flow through the span.
    """

    name: str
    length: int
    tokens: dict = field(default_factory=dict)

    def __post_init__(self):
        if 0 not in self.tokens:
            raise ConfigError(f"prompt segment {self.name!r} has no layer-0 tokens")


def _linear(x, w, b):
    return ad.add(ad.matmul(x, w), b)


class Transformer:
    """Pre-LN transformer stack; parameters live in the owning model's dict."""

    def __init__(self, prefix, depth, width, heads, mlp_ratio, params, rng):
        self.prefix = prefix
        self.depth = depth
        self.width = width
        self.heads = heads
        hidden = mlp_ratio * width
        s_in = width ** -0.5
        s_out = (2 * depth * width) ** -0.5
        for k in range(depth):
            p = f"{prefix}.layers.{k}"
            params[f"{p}.ln1.g"] = Parameter(f"{p}.ln1.g", np.ones(width))
            params[f"{p}.ln1.b"] = Parameter(f"{p}.ln1.b", np.zeros(width))
            params[f"{p}.attn.qkv.w"] = Parameter(f"{p}.attn.qkv.w", rng.normal(0, s_in, (width, 3 * width)))
            params[f"{p}.attn.qkv.b"] = Parameter(f"{p}.attn.qkv.b", np.zeros(3 * width))
            params[f"{p}.attn.out.w"] = Parameter(f"{p}.attn.out.w", rng.normal(0, s_out, (width, width)))
            params[f"{p}.attn.out.b"] = Parameter(f"{p}.attn.out.b", np.zeros(width))
            params[f"{p}.ln2.g"] = Parameter(f"{p}.ln2.g", np.ones(width))
            params[f"{p}.ln2.b"] = Parameter(f"{p}.ln2.b", np.zeros(width))
            params[f"{p}.mlp.fc.w"] = Parameter(f"{p}.mlp.fc.w", rng.normal(0, s_in, (width, hidden)))
            params[f"{p}.mlp.fc.b"] = Parameter(f"{p}.mlp.fc.b", np.zeros(hidden))
            params[f"{p}.mlp.proj.w"] = Parameter(f"{p}.mlp.proj.w", rng.normal(0, (2 * depth * hidden) ** -0.5, (hidden, width)))
            params[f"{p}.mlp.proj.b"] = Parameter(f"{p}.mlp.proj.b", np.zeros(width))
        self.params = params

    def block(self, x, k):
        P = self.params
        p = f"{self.prefix}.layers.{k}"
        S, T, d = x.shape
        H = self.heads
        dh = d // H
        h = ad.layer_norm(x, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
        qkv = _linear(h, P[f"{p}.attn.qkv.w"], P[f"{p}.attn.qkv.b"])
        qkv = ad.transpose(ad.reshape(qkv, (S, T, 3, H, dh)), (2, 0, 3, 1, 4))
        q, kk, v = qkv[0], qkv[1], qkv[2]
        scores = ad.matmul(q, ad.transpose(kk, (0, 1, 3, 2)))
        att = ad.softmax(scores, tau=dh ** 0.5)
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (S, T, d))
        x = ad.add(x, _linear(o, P[f"{p}.attn.out.w"], P[f"{p}.attn.out.b"]))
        h = ad.layer_norm(x, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
        m = ad.gelu(_linear(h, P[f"{p}.mlp.fc.w"], P[f"{p}.mlp.fc.b"]))
        return ad.add(x, _linear(m, P[f"{p}.mlp.proj.w"], P[f"{p}.mlp.proj.b"]))

    def run(self, x, spans, segments, trace=None):
        """Apply all layers, re-injecting prompt tokens at each layer that has them."""
        for k in range(self.depth):
            fresh = {s.name: (k in s.tokens) for s in segments}
            if k > 0 and any(fresh.values()):
                x = _inject(x, k, spans, segments)
            if trace is not None:
                trace.append({"branch": self.prefix, "layer": k, "length": x.shape[1],
                              "spans": {n: spans[n] for n in spans},
                              "fresh": fresh})
            x = self.block(x, k)
        return x


def _expand(tokens, S):
    if tokens.ndim == 2:
        return ad.broadcast_to(tokens, (S,) + tokens.shape)
    if tokens.shape[0] != S:
        raise ShapeError("prompt", tokens.shape, (S,), detail="per-sample prompt batch")
    return tokens


def _inject(x, k, spans, segments):
    S = x.shape[0]
    pieces = []
    cursor = 0
    for seg in sorted(segments, key=lambda s: spans[s.name][0]):
        if k not in seg.tokens:
            continue
        start, end = spans[seg.name]
        if start > cursor:
            pieces.append(x[:, cursor:start])
        pieces.append(_expand(seg.tokens[k], S))
        cursor = end
    if cursor < x.shape[1]:
        pieces.append(x[:, cursor:])
    return ad.concat(pieces, axis=1)


def _check_segment_widths(segments, width):
    for seg in segments:
        for k, t in seg.tokens.items():
            if t.shape[-2:] != (seg.length, width):
                raise ShapeError("prompt", t.shape, (seg.length, width),
                                 detail=f"segment {seg.name!r} layer {k}")


def _assemble(base, before, after, S, width, max_seq, branch):
    """Layer-0 sequence ``[before...][base][after...]`` and every segment's span."""
    total = base.shape[1] + sum(s.length for s in before) + sum(s.length for s in after)
    if total > max_seq:
        raise ConfigError(f"{branch} sequence overflow at layer 0: {total} positions "
                          f"(base {base.shape[1]}, prompts "
                          f"{[s.length for s in before + after]}) > max_seq {max_seq}")
    spans = {}
    pieces = []
    pos = 0
    for seg in before:
        pieces.append(_expand(seg.tokens[0], S))
        spans[seg.name] = (pos, pos + seg.length)
        pos += seg.length
    spans["base"] = (pos, pos + base.shape[1])
    pieces.append(base)
    pos += base.shape[1]
    for seg in after:
        pieces.append(_expand(seg.tokens[0], S))
        spans[seg.name] = (pos, pos + seg.length)
        pos += seg.length
    x = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=1)
    return x, spans


def patchify(images, patch):
    B, H, W, C = images.shape
    g = H // patch
    x = images.reshape(B, g, patch, g, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * g, patch * patch * C)


class MiniClip:
    """Text and vision transformers, projections and a log-temperature.

    ``params`` maps stable string ids to :class:`Parameter` objects.
    """

    def __init__(self, config=STUDENT_CONFIG, d_shared=32, seed=0, name="student"):
        self.config = config
        self.d_shared = d_shared
        self.seed = seed
        self.name = name
        rng = np.random.default_rng(seed)
        d = config.width
        P = {}

        def add(key, value):
            P[key] = Parameter(key, value)

        add("text.tok_emb", rng.normal(0, 0.02, (config.vocab_size, d)))
        add("text.pos_emb", rng.normal(0, 0.01, (config.max_seq, d)))
        self.text = Transformer("text", config.depth, d, config.heads, config.mlp_ratio, P, rng)
        add("text.ln_final.g", np.ones(d))
        add("text.ln_final.b", np.zeros(d))
        add("text.proj", rng.normal(0, d ** -0.5, (d, d_shared)))

        pdim = config.patch_size ** 2 * 3
        add("vision.patch.w", rng.normal(0, pdim ** -0.5, (pdim, d)))
        add("vision.patch.b", np.zeros(d))
        add("vision.cls", rng.normal(0, 0.02, (1, d)))
        add("vision.pos_emb", rng.normal(0, 0.01, (1 + config.num_patches, d)))
        add("vision.ln_pre.g", np.ones(d))
        add("vision.ln_pre.b", np.zeros(d))
        self.vision = Transformer("vision", config.depth, d, config.heads, config.mlp_ratio, P, rng)
        add("vision.ln_final.g", np.ones(d))
        add("vision.ln_final.b", np.zeros(d))
        add("vision.proj", rng.normal(0, d ** -0.5, (d, d_shared)))
        add("log_temp", np.array([np.log(0.07)]))
        self.params = P

    # ----------------------------------------------------------- bookkeeping
    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def freeze(self):
        for p in self.params.values():
            p.trainable = False
        return self

    def unfreeze(self):
        for p in self.params.values():
            p.trainable = True
        return self

    def snapshot(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    @property
    def tau_clip(self):
        return float(np.exp(self.params["log_temp"].data[0]))

    def logit_scale(self):
        """``1 / tau_clip`` as a graph tensor (learnable only while pretraining)."""
        return ad.exp(ad.mul(self.params["log_temp"], -1.0))

    # -------------------------------------------------------------- encoders
    def encode_image(self, images, prompts=(), trace=None):
        """Projected, l2-normalised class-token features ``[batch, d_shared]``.

        ``prompts`` are :class:`PromptSegment` objects appended after the patch
        tokens in the given order.
        """
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise ShapeError("encode_image", images.shape,
                             (None, cfg.image_size, cfg.image_size, 3))
        P = self.params
        B = images.shape[0]
        d = cfg.width
        prompts = list(prompts)
        _check_segment_widths(prompts, d)
        patches = ad.add(ad.matmul(Tensor(patchify(images, cfg.patch_size)), P["vision.patch.w"]),
                         P["vision.patch.b"])
        cls = ad.broadcast_to(ad.reshape(P["vision.cls"], (1, 1, d)), (B, 1, d))
        base = ad.add(ad.concat([cls, patches], axis=1), P["vision.pos_emb"])
        x, spans = _assemble(base, [], prompts, B, d, cfg.max_seq, "vision")
        x = ad.layer_norm(x, P["vision.ln_pre.g"], P["vision.ln_pre.b"])
        x = self.vision.run(x, spans, prompts, trace)
        cls_out = x[:, spans["base"][0]]
        h = ad.layer_norm(cls_out, P["vision.ln_final.g"], P["vision.ln_final.b"])
        return ad.l2_normalize(ad.matmul(h, P["vision.proj"]))

    def encode_text(self, class_names, template=tx.BARE_TEMPLATE, prompts=(), trace=None,
                    batch=None):
        """Per-class l2-normalised text features read at the final (EOS) position.

        ``prompts`` precede the tokenized template in the given order. When a
        prompt carries a per-sample leading dimension ``batch * C`` the output
        has ``batch * C`` rows ordered sample-major.
        """
        cfg = self.config
        P = self.params
        d = cfg.width
        ids = np.asarray(tx.tokenize_batch(list(class_names), template), dtype=np.intp)
        C, k = ids.shape
        if ids.max() >= cfg.vocab_size:
            raise DataError("token id outside the model vocabulary")
        prompts = list(prompts)
        _check_segment_widths(prompts, d)
        S = C
        for seg in prompts:
            for t in seg.tokens.values():
                if t.ndim == 3:
                    S = t.shape[0]
        emb = ad.take_rows(P["text.tok_emb"], ids)
        if S != C:
            if S % C:
                raise ShapeError("encode_text", (S,), (C,), detail="per-sample prompts")
            emb = ad.reshape(ad.broadcast_to(ad.reshape(emb, (1, C, k, d)), (S // C, C, k, d)),
                             (S, k, d))
        x, spans = _assemble(emb, prompts, [], S, d, cfg.max_seq, "text")
        x = ad.add(x, P["text.pos_emb"][: x.shape[1]])
        x = self.text.run(x, spans, prompts, trace)
        eos = x[:, x.shape[1] - 1]
        h = ad.layer_norm(eos, P["text.ln_final.g"], P["text.ln_final.b"])
        return ad.l2_normalize(ad.matmul(h, P["text.proj"]))

    def logits(self, image_features, text_features, scale=None):
        """Cosine logits ``S(x, y) / tau_clip``.

        ``text_features`` is ``[C, D]`` shared by the batch or ``[B, C, D]``
        per sample.
        """
        scale = self.logit_scale() if scale is None else scale
        if text_features.ndim == 2:
            sims = ad.matmul(image_features, ad.transpose(text_features))
        else:
            B, C, D = text_features.shape
            sims = ad.reshape(ad.matmul(text_features, ad.reshape(image_features, (B, D, 1))), (B, C))
        return ad.mul(sims, scale)

    # ------------------------------------------------------------ persistence
    def save(self, stem, extra=None):
        meta = {"kind": "MiniClip", "name": self.name, "seed": self.seed,
                "d_shared": self.d_shared, "config": asdict(self.config),
                "parameter_ids": sorted(self.params)}
        if extra:
            meta.update(extra)
        return ad.save_tensors(stem, {k: self.params[k].data for k in sorted(self.params)}, meta)

    @classmethod
    def load(cls, stem):
        tensors, meta = ad.load_tensors(stem)
        if meta.get("kind") != "MiniClip":
            raise DataError(f"{stem}: not a MiniClip checkpoint")
        model = cls(EncoderConfig(**meta["config"]), meta["d_shared"], meta["seed"], meta["name"])
        missing = set(model.params) - set(tensors)
        if missing:
            raise DataError(f"{stem}: checkpoint lacks parameters {sorted(missing)[:5]}")
        for k, p in model.params.items():
            p.data = tensors[k].copy()
        return model


def zero_shot_probs(x, Y, tau_clip, atol=1e-6):
    """Class probabilities ``softmax_c(S(x, y_c) / tau_clip)`` for normalised rows."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    yd = Y.data if isinstance(Y, Tensor) else np.asarray(Y, dtype=np.float64)
    for name, arr in (("image", xd), ("text", yd)):
        norms = np.sqrt((arr * arr).sum(axis=-1))
        if np.any(np.abs(norms - 1.0) > atol):
            raise ContractError(f"zero_shot_probs: {name} features are not l2-normalised")
    x = x if isinstance(x, Tensor) else Tensor(xd)
    Y = Y if isinstance(Y, Tensor) else Tensor(yd)
    return ad.softmax(ad.matmul(x, ad.transpose(Y)), tau=tau_clip)


def write_model_manifest(path, model):
    """Standalone JSON description of a model (config and parameter ids)."""
    path = Path(path)
    path.write_text(json.dumps({"name": model.name, "config": asdict(model.config),
                                "d_shared": model.d_shared,
                                "parameter_ids": sorted(model.params)}, indent=2) + "\n")
    return path
