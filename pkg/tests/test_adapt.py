import numpy as np
import pytest

from caspl import autodiff as ad
from caspl.adapt import (
    VARIANTS, AdaptStrategy, FewShotConfig, build_adapting, declared_trainable, load_adapt,
    run_adapt_phase, sample_few_shot, save_adapt,
)
from caspl.autodiff import Tensor
from caspl.boost import BoostingPrompts
from caspl.classifier import PromptedModel
from caspl.domains import DomainSpec, generate_domain
from caspl.errors import ConfigError, ContractError, DataError
from caspl.prompts import cascade, init_prompt_set

from conftest import tiny_model

TINY_SPEC = DomainSpec(n_classes=4, image_size=8, train_per_class=4, test_per_class=3)
QUICK = dict(epochs=2, batch_size=4)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_domain(TINY_SPEC, 0)


def tiny_boosting(model, seed=0, frozen=True):
    layers = tuple(range(model.config.depth))
    b = BoostingPrompts(init_prompt_set("boosting", "text", 2, layers, 8, seed),
                        init_prompt_set("boosting", "vision", 2, layers, 8, seed))
    return b.freeze() if frozen else b


def quick(variant, **kw):
    over = dict(QUICK, text_length=2, **kw)
    if variant in ("CoupledDeep", "IndependentDeep"):
        over.setdefault("vision_length", 2)
    return AdaptStrategy.default(variant, **over)


def test_variant_defaults():
    ts = AdaptStrategy.default("TextShallow")
    assert (ts.text_length, ts.depth, ts.learning_rate, ts.epochs) == (8, 1, 0.002, 50)
    cd = AdaptStrategy.default("CoupledDeep")
    assert (cd.text_length, cd.vision_length, cd.depth, cd.learning_rate, cd.epochs) == \
        (8, 8, None, 0.0035, 5)
    idp = AdaptStrategy.default("IndependentDeep")
    assert (idp.text_length, idp.vision_length, idp.depth, idp.learning_rate, idp.epochs) == \
        (8, 8, None, 0.0025, 20)
    assert cd.layers(6) == tuple(range(6)) and ts.layers(6) == (0,)


def test_strategy_validation():
    with pytest.raises(ConfigError):
        AdaptStrategy.default("ProGrad")
    with pytest.raises(ConfigError):
        AdaptStrategy("TextShallow", vision_length=4)
    with pytest.raises(ConfigError):
        AdaptStrategy("IndependentDeep", vision_length=0)
    with pytest.raises(ConfigError):
        AdaptStrategy("CoupledDeep", text_length=8, vision_length=4)
    with pytest.raises(ConfigError):
        FewShotConfig(shots=3)


def test_few_shot_sampling():
    ds = generate_domain(DomainSpec(n_classes=20, train_per_class=20, test_per_class=2), 0)
    a = sample_few_shot(ds, FewShotConfig(16, seed=1))
    assert len(a.labels) == 160
    assert set(ds.train_labels[a.index]) == set(range(10))
    assert np.array_equal(a.index, sample_few_shot(ds, FewShotConfig(16, seed=1)).index)
    assert not np.array_equal(a.index, sample_few_shot(ds, FewShotConfig(16, seed=2)).index)
    both = sample_few_shot(ds, FewShotConfig(1, base_only=False))
    assert len(both.labels) == 20


def test_few_shot_shortage_names_the_class(tiny_ds):
    with pytest.raises(DataError, match="class00"):
        sample_few_shot(tiny_ds, FewShotConfig(8))


@pytest.mark.parametrize("variant", VARIANTS)
def test_trainable_set_and_freezing_per_variant(variant, tiny_ds, monkeypatch):
    model = tiny_model().freeze()
    boost = tiny_boosting(model)
    before = {p.name: p.data.copy() for p in boost.parameters()}
    backbone = model.snapshot()
    seen = []

    class Spy(ad.SGD):
        def __init__(self, params, **kw):
            seen.extend(params)
            super().__init__(params, **kw)

    monkeypatch.setattr(ad, "SGD", Spy)
    res = run_adapt_phase(model, boost, quick(variant), FewShotConfig(2), tiny_ds)
    assert {p.name for p in seen} == declared_trainable(res.text, res.vision, res.coupling,
                                                        res.meta_net)
    assert not any(n.startswith("prompt.boosting") for n in (p.name for p in seen))
    assert all(p.data.tobytes() == before[p.name].tobytes() for p in boost.parameters())
    assert all(model.params[k].data.tobytes() == v.tobytes() for k, v in backbone.items())
    assert len(res.history) == 2 and res.final[2] is not None


def test_unfrozen_boosting_needs_the_ablation_flag(tiny_ds):
    model = tiny_model().freeze()
    boost = tiny_boosting(model, frozen=False)
    with pytest.raises(ContractError):
        run_adapt_phase(model, boost, quick("IndependentDeep"), FewShotConfig(1), tiny_ds)
    boost.freeze()
    before = {p.name: p.data.copy() for p in boost.parameters()}
    res = run_adapt_phase(model, boost, quick("IndependentDeep"), FewShotConfig(1), tiny_ds,
                          learnable_boosting=True)
    trained = res.view.text_layout.boosting
    assert not trained.frozen and trained is not boost.text
    assert boost.frozen
    assert all(p.data.tobytes() == before[p.name].tobytes() for p in boost.parameters())


def test_loss_code_path_is_identical_with_and_without_boosting(tiny_ds, monkeypatch):
    calls = []
    real = ad.cross_entropy

    def spy(logits, labels):
        calls.append(logits.shape)
        return real(logits, labels)

    monkeypatch.setattr(ad, "cross_entropy", spy)
    model = tiny_model().freeze()
    for boost in (None, tiny_boosting(model)):
        run_adapt_phase(model, boost, quick("TextShallow"), FewShotConfig(2), tiny_ds)
    assert len(calls) == 2 * 2 and len(set(calls)) == 1


def test_zero_meta_net_reduces_to_text_shallow():
    model = tiny_model().freeze()
    text, _, _, meta = build_adapting(model, quick("ConditionedTextShallow"), 0)
    meta.zero_()
    imgs = np.random.default_rng(0).normal(size=(3, 8, 8, 3))
    names = ["class00", "class01", "class02"]
    cond = PromptedModel(model, cascade(None, text), meta_net=meta).logits(imgs, names).data
    plain = PromptedModel(model, cascade(None, text)).logits(imgs, names).data
    np.testing.assert_allclose(cond, plain, atol=1e-12)


def test_meta_net_gives_each_image_its_own_prompt():
    model = tiny_model().freeze()
    text, _, _, meta = build_adapting(model, quick("ConditionedTextShallow"), 0)
    view = PromptedModel(model, cascade(None, text), meta_net=meta)
    x = view.image_features(np.random.default_rng(0).normal(size=(2, 8, 8, 3)))
    offsets = meta(x).data
    assert offsets.shape == (2, 8) and not np.allclose(offsets[0], offsets[1])
    feats = view.text_features(["class00", "class01"], image_features=x)
    assert feats.shape == (2, 2, 8) and not np.allclose(feats.data[0], feats.data[1])


def test_coupling_jacobian_is_nonzero():
    model = tiny_model().freeze()
    text, _, coupling, _ = build_adapting(model, quick("CoupledDeep"), 0)
    tok = {k: Tensor(p.data) for k, p in text.tokens().items()}
    base = coupling(tok)[0].data
    eps = 1e-6
    tok[0].data = tok[0].data.copy()
    tok[0].data[0, 3] += eps
    moved = coupling(tok)[0].data
    jac = (moved - base) / eps
    assert np.abs(jac[0]).max() > 0
    np.testing.assert_allclose(jac[0], coupling.params["coupling.0.w"].data[3], rtol=1e-5)
    np.testing.assert_array_equal(jac[1:], 0)


def test_checkpoint_round_trip(tmp_path, tiny_ds):
    model = tiny_model().freeze()
    for variant in VARIANTS:
        res = run_adapt_phase(model, None, quick(variant, epochs=1), FewShotConfig(1), tiny_ds)
        save_adapt(res, tmp_path / variant, {"seed": 0})
        strategy, parts = load_adapt(model, tmp_path / variant)
        assert strategy == res.strategy
        orig = [res.text, res.vision, res.coupling, res.meta_net]
        for a, b in zip(orig, parts):
            if a is not None and hasattr(a, "parameters"):
                for p, q in zip(a.parameters(), b.parameters()):
                    assert p.data.tobytes() == q.data.tobytes()


def test_metrics_file_layout(tmp_path, tiny_ds):
    model = tiny_model().freeze()
    res = run_adapt_phase(model, None, quick("TextShallow", epochs=3), FewShotConfig(1), tiny_ds,
                          eval_every=2)
    lines = res.write_metrics(tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,base_acc,novel_acc"
    assert lines[1].endswith(",,") and not lines[2].endswith(",,") and not lines[3].endswith(",,")
