"""A student model wrapped with its prompt layouts, producing class logits."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .vlm import text as tx


class CouplingProjector:
    """Per-layer affine map turning text prompt tokens into vision prompt tokens."""

    def __init__(self, layers, d_text, d_vision, seed, std=0.02):
        rng = np.random.default_rng([seed, 31])
        self.layers = tuple(layers)
        self.params = {}
        for k in self.layers:
            self.params[f"coupling.{k}.w"] = Parameter(f"coupling.{k}.w",
                                                       rng.normal(0, std, (d_text, d_vision)))
            self.params[f"coupling.{k}.b"] = Parameter(f"coupling.{k}.b", np.zeros(d_vision))

    def parameters(self):
        return list(self.params.values())

    def __call__(self, text_tokens):
        return {k: ad.add(ad.matmul(text_tokens[k], self.params[f"coupling.{k}.w"]),
                          self.params[f"coupling.{k}.b"])
                for k in self.layers}


class MetaNet:
    """Two affine layers (hidden ``d_in // 2``, GELU) mapping an image feature to a token offset."""

    def __init__(self, d_in, d_out, seed):
        rng = np.random.default_rng([seed, 37])
        hidden = max(1, d_in // 2)
        self.params = {
            "meta.fc1.w": Parameter("meta.fc1.w", rng.normal(0, d_in ** -0.5, (d_in, hidden))),
            "meta.fc1.b": Parameter("meta.fc1.b", np.zeros(hidden)),
            "meta.fc2.w": Parameter("meta.fc2.w", rng.normal(0, hidden ** -0.5, (hidden, d_out)) * 0.1),
            "meta.fc2.b": Parameter("meta.fc2.b", np.zeros(d_out)),
        }

    def parameters(self):
        return list(self.params.values())

    def zero_(self):
        for p in self.params.values():
            p.data = np.zeros_like(p.data)
        return self

    def __call__(self, features):
        P = self.params
        h = ad.gelu(ad.add(ad.matmul(features, P["meta.fc1.w"]), P["meta.fc1.b"]))
        return ad.add(ad.matmul(h, P["meta.fc2.w"]), P["meta.fc2.b"])


def conditioned_shift(features, meta_net):
    """Per-instance offset ``[B, d]`` added to every adapting text token."""
    return meta_net(features)


class PromptedModel:
    """Student plus text/vision :class:`~caspl.prompts.CascadeLayout` objects.

    ``coupling`` derives the vision adapting tokens from the text ones;
    ``meta_net`` conditions the text adapting tokens on the image feature.
    """

    def __init__(self, model, text_layout=None, vision_layout=None, template=tx.BARE_TEMPLATE,
                 coupling=None, meta_net=None):
        self.model = model
        self.text_layout = text_layout
        self.vision_layout = vision_layout
        self.template = template
        self.coupling = coupling
        self.meta_net = meta_net

    def _vision_segments(self):
        if self.vision_layout is None:
            return []
        adapt = None
        if self.coupling is not None and self.vision_layout.adapting is not None:
            adapt = self.coupling(self.text_layout.adapting.tokens())
        return self.vision_layout.segments(adapting_tokens=adapt)

    def image_features(self, images, trace=None):
        return self.model.encode_image(images, prompts=self._vision_segments(), trace=trace)

    def text_features(self, class_names, image_features=None, trace=None):
        """``[C, D]`` features, or ``[B, C, D]`` when conditioned on images."""
        if self.text_layout is None:
            return self.model.encode_text(class_names, self.template, trace=trace)
        if self.meta_net is None or image_features is None:
            return self.model.encode_text(class_names, self.template,
                                          prompts=self.text_layout.segments(), trace=trace)
        B = image_features.shape[0]
        C = len(class_names)
        adapting = self.text_layout.adapting
        offset = conditioned_shift(image_features, self.meta_net)
        tokens = {}
        for k, p in adapting.tokens().items():
            shifted = ad.add(ad.reshape(offset, (B, 1, 1, -1)), p) if k == 0 else None
            if shifted is not None:
                n, d = p.shape
                tokens[k] = ad.reshape(ad.broadcast_to(shifted, (B, C, n, d)), (B * C, n, d))
            else:
                tokens[k] = p
        feats = self.model.encode_text(class_names, self.template,
                                       prompts=self.text_layout.segments(adapting_tokens=tokens),
                                       trace=trace)
        return ad.reshape(feats, (B, C, feats.shape[-1]))

    def logits(self, images, class_names):
        x = self.image_features(images)
        y = self.text_features(class_names, image_features=x)
        return self.model.logits(x, y, scale=1.0 / self.model.tau_clip)

    def predict(self, images, class_names, batch_size=128):
        """Argmax class index per image, evaluated without a tape."""
        preds = []
        y = None
        if self.meta_net is None:
            y = self.text_features(class_names)
        for i in range(0, len(images), batch_size):
            chunk = images[i:i + batch_size]
            x = self.image_features(chunk)
            yy = y if y is not None else self.text_features(class_names, image_features=x)
            preds.append(self.model.logits(x, yy, scale=1.0).data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.intp)

    def trainable_parameters(self):
        params = []
        for layout in (self.text_layout, self.vision_layout):
            if layout is None:
                continue
            for s in (layout.boosting, layout.adapting):
                if s is not None and not getattr(s, "frozen", False) and hasattr(s, "parameters"):
                    params.extend(p for p in s.parameters() if p.trainable)
        for extra in (self.coupling, self.meta_net):
            if extra is not None:
                params.extend(extra.parameters())
        seen = set()
        out = []
        for p in params:
            if p.name not in seen:
                seen.add(p.name)
                out.append(p)
        return out
