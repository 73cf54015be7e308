"""Procedural image/caption domains, base/novel splits and the HM metric."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import load_tensors, save_tensors
from .errors import ConfigError, DataError, DomainError
from .vlm import text as tx

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str = "flowers"
    n_classes: int = 10
    prototype_seed: int = 0
    image_size: int = 16
    noise: float = 0.5
    max_shift: int = 1
    brightness: float = 0.25
    template_id: str = "flowers"
    train_per_class: int = 100
    test_per_class: int = 50
    class_offset: int = 0
    n_waves: int = 3
    shift_magnitude: float = 0.0
    shift_seed: int = 0

    def __post_init__(self):
        if self.n_classes < 4 or self.n_classes % 2:
            raise ConfigError(f"n_classes must be even and >= 4, got {self.n_classes}")
        if not self.noise > 0:
            raise ConfigError("noise (sigma_img) must be > 0")
        if self.class_offset + self.n_classes > tx.MAX_CLASSES:
            raise ConfigError("class ids exceed the caption vocabulary")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("train/test sizes must be >= 1")

    @property
    def class_names(self):
        return [tx.class_token(self.class_offset + c) for c in range(self.n_classes)]

    @property
    def template(self):
        return tx.TEMPLATES.get(self.template_id, tx.TEMPLATES["default"])


@dataclass(frozen=True)
class Split:
    base: tuple
    novel: tuple
    train_index: dict = field(hash=False)
    test_index: dict = field(hash=False)

    def check(self):
        if set(self.base) & set(self.novel):
            raise DataError("base and novel classes overlap")
        for name, index in (("train", self.train_index), ("test", self.test_index)):
            flat = [i for c in self.base + self.novel for i in index[c]]
            if len(flat) != len(set(flat)):
                raise DataError(f"{name} split assigns an image to more than one class")


def _wave_pattern(rng, size, n_waves):
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for _ in range(n_waves):
        freq = rng.uniform(0.5, 2.0)
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        color = rng.normal(0, 1, 3)
        wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        img += wave[:, :, None] * color[None, None, :]
    img -= img.mean()
    return img / (img.std() + 1e-12)


def prototypes(spec):
    """Per-class low-frequency colour patterns ``[C, H, W, 3]``, unit std each."""
    protos = []
    for c in range(spec.n_classes):
        rng = np.random.default_rng([spec.prototype_seed, spec.class_offset + c])
        p = _wave_pattern(rng, spec.image_size, spec.n_waves)
        if spec.shift_magnitude:
            srng = np.random.default_rng([spec.prototype_seed, spec.class_offset + c,
                                          10_000 + spec.shift_seed])
            p = p + spec.shift_magnitude * _wave_pattern(srng, spec.image_size, spec.n_waves)
        protos.append(p)
    return np.stack(protos)


def _cast(spec):
    if not spec.shift_magnitude:
        return np.zeros(3)
    rng = np.random.default_rng([spec.prototype_seed, 20_000 + spec.shift_seed])
    return spec.shift_magnitude * rng.normal(0, 0.5, 3)


def render(proto, n, rng, spec):
    """``n`` noisy views of one prototype with random shift/brightness nuisance."""
    H = spec.image_size
    out = np.empty((n, H, H, 3))
    cast = _cast(spec)
    for i in range(n):
        img = proto + rng.normal(0, spec.noise, proto.shape)
        if spec.max_shift:
            dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, 2)
            img = np.roll(img, (int(dy), int(dx)), axis=(0, 1))
        if spec.brightness:
            img = img + rng.uniform(-spec.brightness, spec.brightness)
        out[i] = img + cast
    return out


class DomainDataset:
    """Train/test images with labels, a base/novel split and class names."""

    def __init__(self, spec, seed, train_images, train_labels, test_images, test_labels):
        self.spec = spec
        self.seed = seed
        self.train_images = train_images
        self.train_labels = train_labels
        self.test_images = test_images
        self.test_labels = test_labels
        half = spec.n_classes // 2
        tr = {c: tuple(np.flatnonzero(train_labels == c).tolist()) for c in range(spec.n_classes)}
        te = {c: tuple(np.flatnonzero(test_labels == c).tolist()) for c in range(spec.n_classes)}
        self.split = Split(tuple(range(half)), tuple(range(half, spec.n_classes)), tr, te)

    @property
    def class_names(self):
        return self.spec.class_names

    @property
    def n_classes(self):
        return self.spec.n_classes

    def unlabeled(self, per_class=None, seed=0):
        """The train images with labels withheld, optionally ``per_class`` of each class.

        Subsets are nested: for one seed, the ``k``-per-class pool is contained
        in every larger pool.
        """
        if per_class is None:
            idx = np.arange(len(self.train_labels))
        else:
            if per_class < 1:
                raise ConfigError("per_class must be >= 1")
            rng = np.random.default_rng([seed, 7])
            idx = []
            for c in range(self.n_classes):
                members = np.asarray(self.split.train_index[c])
                order = members[rng.permutation(len(members))]
                idx.extend(order[:per_class].tolist())
            idx = np.sort(np.asarray(idx, dtype=np.intp))
        from .boost import UnlabeledSet
        return UnlabeledSet(self.train_images[idx], self.class_names, source_index=idx)

    def test_subset(self, classes):
        classes = list(classes)
        mask = np.isin(self.test_labels, classes)
        remap = {c: i for i, c in enumerate(classes)}
        labels = np.array([remap[c] for c in self.test_labels[mask]], dtype=np.intp)
        return self.test_images[mask], labels

    def content_hash(self):
        h = hashlib.sha256()
        for a in (self.train_images, self.train_labels, self.test_images, self.test_labels):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------ persistence
    def save(self, directory):
        """Write ``images.bin``/``images.json`` (tensor checkpoint) and ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_tensors(directory / "images", {"train": self.train_images, "test": self.test_images})
        manifest = {
            "schema": "caspl.domain", "version": MANIFEST_VERSION, "seed": self.seed,
            "spec": asdict(self.spec), "class_names": self.class_names,
            "train_labels": self.train_labels.tolist(), "test_labels": self.test_labels.tolist(),
            "split": {"base": list(self.split.base), "novel": list(self.split.novel)},
            "sha256": self.content_hash(),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        man_path = directory / "manifest.json"
        if not man_path.exists():
            raise FileNotFoundError(str(man_path))
        manifest = json.loads(man_path.read_text())
        if manifest.get("schema") != "caspl.domain":
            raise DataError(f"{man_path}: not a domain manifest")
        if manifest.get("version") != MANIFEST_VERSION:
            raise DataError(f"{man_path}: unsupported manifest version {manifest.get('version')}")
        tensors, _ = load_tensors(directory / "images")
        ds = cls(DomainSpec(**manifest["spec"]), manifest["seed"], tensors["train"],
                 np.asarray(manifest["train_labels"], dtype=np.intp), tensors["test"],
                 np.asarray(manifest["test_labels"], dtype=np.intp))
        if ds.content_hash() != manifest["sha256"]:
            raise DataError(f"{directory}: content hash mismatch")
        return ds


def generate_domain(spec, seed):
    """Deterministic dataset for ``(spec, seed)``; each class draws from its own stream."""
    protos = prototypes(spec)
    tr_img, tr_lab, te_img, te_lab = [], [], [], []
    for c in range(spec.n_classes):
        rng_tr = np.random.default_rng([seed, spec.class_offset + c, 0])
        rng_te = np.random.default_rng([seed, spec.class_offset + c, 1])
        tr_img.append(render(protos[c], spec.train_per_class, rng_tr, spec))
        te_img.append(render(protos[c], spec.test_per_class, rng_te, spec))
        tr_lab += [c] * spec.train_per_class
        te_lab += [c] * spec.test_per_class
    return DomainDataset(spec, seed, np.concatenate(tr_img), np.asarray(tr_lab, dtype=np.intp),
                         np.concatenate(te_img), np.asarray(te_lab, dtype=np.intp))


def shift_domain(spec, magnitude, seed, shift_seed=1):
    """Same classes with prototypes perturbed and a colour cast of size ``magnitude``."""
    if magnitude < 0:
        raise ConfigError("shift magnitude must be >= 0")
    shifted = replace(spec, domain_id=f"{spec.domain_id}-shift",
                      shift_magnitude=spec.shift_magnitude + magnitude,
                      shift_seed=shift_seed) if magnitude else spec
    return generate_domain(shifted, seed)


def linear_probe_accuracy(dataset, test=None, ridge=1.0):
    """Test accuracy (%) of a ridge one-vs-all classifier on raw pixels.

    Fit on ``dataset``'s train split, score on ``test``'s test split (default:
    the same dataset).
    """
    test = test or dataset
    X = dataset.train_images.reshape(len(dataset.train_images), -1)
    Xt = test.test_images.reshape(len(test.test_images), -1)
    X = np.hstack([X, np.ones((len(X), 1))])
    Xt = np.hstack([Xt, np.ones((len(Xt), 1))])
    Y = np.eye(dataset.n_classes)[dataset.train_labels]
    W = np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]), X.T @ Y)
    return 100.0 * float(np.mean((Xt @ W).argmax(axis=1) == test.test_labels))


def harmonic_mean(base_acc, novel_acc):
    """``2*B*N / (B + N)`` for accuracies in (0, 100]."""
    for name, v in (("base", base_acc), ("novel", novel_acc)):
        if not 0 < v <= 100:
            raise DomainError(f"{name} accuracy must lie in (0, 100], got {v}")
    return 2.0 * base_acc * novel_acc / (base_acc + novel_acc)


@dataclass
class EvalReport:
    base_acc: float
    novel_acc: float
    hm: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.base_acc, self.novel_acc):
            if not 0 <= v <= 100:
                raise DomainError(f"accuracy {v} outside [0, 100]")

    @classmethod
    def from_accuracies(cls, base_acc, novel_acc, **meta):
        hm = harmonic_mean(base_acc, novel_acc) if base_acc > 0 and novel_acc > 0 else 0.0
        return cls(float(base_acc), float(novel_acc), float(hm), dict(meta))

    def consistent(self, tol=0.01):
        if self.base_acc == 0 or self.novel_acc == 0:
            return self.hm == 0
        return abs(self.hm - harmonic_mean(self.base_acc, self.novel_acc)) <= tol

    def to_dict(self):
        return {"base_acc": round(self.base_acc, 4), "novel_acc": round(self.novel_acc, 4),
                "hm": round(self.hm, 4), "meta": self.meta}

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path
