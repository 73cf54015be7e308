import json
from dataclasses import replace

import numpy as np
import pytest

from caspl.domains import (
    DomainDataset, DomainSpec, EvalReport, generate_domain, harmonic_mean,
    linear_probe_accuracy, shift_domain,
)
from caspl.errors import ConfigError, DataError, DomainError

from conftest import DATA

SMALL = DomainSpec(train_per_class=20, test_per_class=10)


@pytest.fixture(scope="module")
def triples():
    return json.loads((DATA / "hm_triples.json").read_text())


def test_fixture_covers_every_base_to_novel_table(triples):
    datasets = {t["dataset"] for t in triples}
    assert len(datasets) == 12 and len(triples) == 108
    assert sum(t["dataset"] == "Average" for t in triples) == 9


def test_harmonic_mean_reproduces_published_triples(triples):
    for t in triples:
        assert harmonic_mean(t["base"], t["novel"]) == pytest.approx(t["hm"], abs=0.01), t


def test_harmonic_mean_examples_and_errors():
    assert harmonic_mean(84.26, 76.10) == pytest.approx(79.97, abs=0.01)
    assert harmonic_mean(86.11, 79.54) == pytest.approx(82.69, abs=0.01)
    assert harmonic_mean(37.5, 37.5) == pytest.approx(37.5)
    for bad in ((0, 50), (50, -1), (101, 50)):
        with pytest.raises(DomainError):
            harmonic_mean(*bad)


def test_eval_report_consistency(tmp_path):
    r = EvalReport.from_accuracies(80.0, 60.0, seed=1)
    assert r.consistent() and r.hm == pytest.approx(480 / 7)
    assert EvalReport.from_accuracies(0.0, 50.0).hm == 0.0
    with pytest.raises(DomainError):
        EvalReport(120.0, 50.0, 70.0)
    r.save(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["meta"] == {"seed": 1}


def test_spec_invariants():
    with pytest.raises(ConfigError):
        DomainSpec(n_classes=5)
    with pytest.raises(ConfigError):
        DomainSpec(noise=0.0)
    with pytest.raises(ConfigError):
        DomainSpec(class_offset=60)


def test_split_is_disjoint_and_halved():
    ds = generate_domain(SMALL, 0)
    ds.split.check()
    assert ds.split.base == (0, 1, 2, 3, 4) and ds.split.novel == (5, 6, 7, 8, 9)
    assert all(len(ds.split.train_index[c]) == 20 for c in range(10))
    train = {x.tobytes() for x in ds.train_images}
    assert not any(x.tobytes() in train for x in ds.test_images)


def test_generation_is_deterministic(tmp_path):
    a, b = generate_domain(SMALL, 3), generate_domain(SMALL, 3)
    assert a.content_hash() == b.content_hash()
    a.save(tmp_path / "a")
    b.save(tmp_path / "b")
    for name in ("images.bin", "images.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert generate_domain(SMALL, 4).content_hash() != a.content_hash()


def test_save_load_round_trip_and_tamper_check(tmp_path):
    ds = generate_domain(SMALL, 1)
    ds.save(tmp_path / "d")
    back = DomainDataset.load(tmp_path / "d")
    assert back.content_hash() == ds.content_hash() and back.spec == ds.spec
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    man["train_labels"][0] = 9
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(DataError):
        DomainDataset.load(tmp_path / "d")
    with pytest.raises(FileNotFoundError):
        DomainDataset.load(tmp_path / "missing")


def test_near_noiseless_class_images_coincide():
    spec = replace(SMALL, noise=1e-12, max_shift=0, brightness=0.0)
    ds = generate_domain(spec, 0)
    imgs = ds.train_images[ds.train_labels == 2]
    np.testing.assert_allclose(imgs, np.broadcast_to(imgs[0], imgs.shape), atol=1e-10)


def test_default_domain_is_linearly_learnable():
    assert linear_probe_accuracy(generate_domain(DomainSpec(), 0)) >= 95.0


def test_shift_identity_and_class_count():
    a = shift_domain(SMALL, 0.0, 2)
    assert a.content_hash() == generate_domain(SMALL, 2).content_hash()
    b = shift_domain(SMALL, 1.0, 2)
    assert b.n_classes == SMALL.n_classes and b.class_names == a.class_names
    assert np.abs(b.train_images.mean(axis=0) - a.train_images.mean(axis=0)).mean() > 0
    with pytest.raises(ConfigError):
        shift_domain(SMALL, -1.0, 0)


def test_source_probe_loses_accuracy_on_shifted_set():
    src = generate_domain(DomainSpec(), 123)
    same = linear_probe_accuracy(src)
    shifted = linear_probe_accuracy(src, shift_domain(DomainSpec(), 3.0, 0))
    assert shifted < same - 5


def test_unlabeled_pools_are_nested_and_label_free():
    ds = generate_domain(SMALL, 0)
    pools = {k: ds.unlabeled(per_class=k, seed=5) for k in (1, 2, 4, 8, 16)}
    for small, big in zip((1, 2, 4, 8), (2, 4, 8, 16)):
        assert set(pools[small].source_index) < set(pools[big].source_index)
    full = ds.unlabeled()
    assert len(full) == 200
    assert not hasattr(full, "labels")
    with pytest.raises(AttributeError):
        full.labels = ds.train_labels
