import numpy as np
import pytest

from caspl import autodiff as ad
from caspl.autodiff import Tensor
from caspl.boost import (
    KDConfig, UnlabeledSet, kd_loss, run_boost_phase, teacher_logits,
)
from caspl.domains import DomainSpec
from caspl.errors import ConfigError, ContractError, ShapeError
from caspl.vlm import text as tx

from conftest import tiny_images, tiny_model

NAMES = [tx.class_token(i) for i in range(4)]
TINY_KD = KDConfig(epochs=2, batch_size=4, length=2)


@pytest.fixture
def pair():
    return tiny_model(seed=0).freeze(), tiny_model(seed=1, depth=3).freeze()


def test_kd_loss_examples():
    f = np.random.default_rng(0).normal(size=(5, 4))
    assert kd_loss(f, f).item() == 0.0
    val = kd_loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), 1.0).item()
    sig = 1 / (1 + np.exp(-1.0))
    assert val == pytest.approx(sig - (1 - sig), abs=1e-12)
    assert val == pytest.approx(0.46212, abs=1e-5)


def test_kd_loss_is_nonnegative_and_fades_with_temperature():
    rng = np.random.default_rng(1)
    for tau in (0.5, 1.0, 2.0, 4.0):
        for _ in range(25):
            fs, ft = rng.normal(size=(3, 5)) * 3, rng.normal(size=(3, 5)) * 3
            assert kd_loss(fs, ft, tau).item() >= 0
    fs, ft = rng.normal(size=(4, 6)) * 2, rng.normal(size=(4, 6)) * 2
    vals = [kd_loss(fs, ft, t).item() for t in (1, 2, 4, 8, 16)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_kd_gradient_reaches_student_only():
    fs = Tensor(np.random.default_rng(2).normal(size=(2, 3)), requires_grad=True)
    ft = Tensor(np.random.default_rng(3).normal(size=(2, 3)), requires_grad=True)
    with ad.Tape() as tape:
        loss = kd_loss(fs, ft, 2.0)
    grads = tape.backward(loss)
    assert np.abs(grads[fs]).sum() > 0
    assert ft not in grads and not np.any(grads[ft])


def test_kd_loss_errors():
    with pytest.raises(ShapeError):
        kd_loss(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ConfigError):
        kd_loss(np.zeros((2, 3)), np.zeros((2, 3)), 0.0)


def test_kd_config_defaults_and_validation():
    c = KDConfig()
    assert (c.depth, c.length, c.learning_rate, c.epochs, c.tau_kd) == (None, 8, 0.0025, 20, 1.0)
    for bad in (dict(tau_kd=0), dict(epochs=0), dict(length=0), dict(learning_rate=-1)):
        with pytest.raises(ConfigError):
            KDConfig(**bad)


def test_teacher_logits_are_tape_free_and_deterministic(pair):
    _, teacher = pair
    imgs = tiny_images(5)
    with ad.Tape() as tape:
        a = teacher_logits(teacher, imgs, tx.TEMPLATES["default"], NAMES)
    assert len(tape) == 0 and a.shape == (5, 4)
    assert a.tobytes() == teacher_logits(teacher, imgs, tx.TEMPLATES["default"], NAMES).tobytes()
    teacher.params["log_temp"].trainable = True
    with pytest.raises(ContractError):
        teacher_logits(teacher, imgs, tx.TEMPLATES["default"], NAMES)


def test_flowers_domain_uses_its_template():
    assert DomainSpec().template == "a photo of a [class], a type of flower."
    assert tx.TemplateSpec.for_dataset("flowers").template == DomainSpec().template


def test_unlabeled_set_has_no_label_accessor():
    u = UnlabeledSet(tiny_images(3), NAMES)
    assert not hasattr(u, "labels")
    with pytest.raises(AttributeError):
        u.labels = [0, 1, 2]


def test_empty_pool_is_a_config_error(pair):
    student, teacher = pair
    with pytest.raises(ConfigError):
        run_boost_phase(student, teacher, UnlabeledSet(np.zeros((0, 8, 8, 3)), NAMES), TINY_KD)


def test_phase_one_trains_exactly_the_boosting_tensors(pair, monkeypatch):
    student, teacher = pair
    seen = []

    class Spy(ad.SGD):
        def __init__(self, params, **kw):
            seen.extend(params)
            super().__init__(params, **kw)

    monkeypatch.setattr(ad, "SGD", Spy)
    snaps = student.snapshot(), teacher.snapshot()
    pool = UnlabeledSet(tiny_images(10), NAMES)
    res = run_boost_phase(student, teacher, pool, TINY_KD, seed=0,
                          heldout=UnlabeledSet(tiny_images(6, seed=1), NAMES))
    depth = student.config.depth
    assert len(seen) == 2 * depth
    assert {p.name for p in seen} == {p.name for p in res.prompts.parameters()}
    assert res.prompts.frozen
    for model, snap in zip((student, teacher), snaps):
        assert all(model.params[k].data.tobytes() == v.tobytes() for k, v in snap.items())
    assert [h[0] for h in res.history] == [0, 1, 2]


def test_phase_one_is_deterministic(pair, tmp_path):
    student, teacher = pair
    pool = UnlabeledSet(tiny_images(9), NAMES)
    paths = []
    for i in range(2):
        res = run_boost_phase(student, teacher, pool, TINY_KD, seed=4)
        paths.append(res.write_metrics(tmp_path / f"m{i}.csv"))
    assert paths[0].read_bytes() == paths[1].read_bytes()
    head = paths[0].read_text().splitlines()
    assert head[0] == "epoch,kd_loss,heldout_agreement" and len(head) == 4


def test_shallow_boosting_depth(pair):
    student, teacher = pair
    res = run_boost_phase(student, teacher, UnlabeledSet(tiny_images(4), NAMES),
                          KDConfig(epochs=1, length=3, depth=1), seed=0)
    assert res.prompts.text.layers == (0,) and res.prompts.text.length == 3
