import logging
import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from t2ue import checkpoint
from t2ue.config import TrainConfig
from t2ue.evalkit import class_pools, retrieval_eval
from t2ue.surrogate import (SurrogateModel, build_vocab, distinct_batches, images_tensor, train_contrastive,
                            train_surrogate)
from t2ue.toydata import DatasetSpec, build_in_memory


@pytest.fixture()
def model(tiny_spec):
    torch.manual_seed(0)
    return SurrogateModel(build_vocab(tiny_spec)).eval()


def test_encode_image_contract(model, tiny_train):
    x = images_tensor(tiny_train[:5])
    x = torch.cat([x, x[:1]])
    with torch.no_grad():
        e = model.encode_image(x)
    assert e.shape == (6, 64)
    assert torch.allclose(e.norm(dim=1), torch.ones(6), atol=1e-5)
    assert torch.equal(e[0], e[5])


def test_encode_image_rejects_resolution(model):
    with pytest.raises(ValueError, match="shape"):
        model.encode_image(torch.zeros(2, 3, 16, 16))


def test_encode_text_contract(model):
    with torch.no_grad():
        norm, raw = model.encode_text(["a red circle", "a red circle", "a blue cross"])
    assert torch.equal(norm[0], norm[1]) and torch.equal(raw[0], raw[1])
    assert torch.allclose(norm.norm(dim=1), torch.ones(3), atol=1e-5)
    assert torch.allclose(raw / raw.norm(dim=1, keepdim=True), norm, atol=1e-6)
    assert raw.shape == (3, 64)


def test_unknown_word_uses_unk(model, caplog):
    with caplog.at_level(logging.WARNING):
        norm, _ = model.encode_text(["a purple circle"])
    assert norm.shape == (1, 64)
    assert model.text_encoder.unk_count == 1
    assert "unknown" in caplog.text


def test_empty_caption_rejected(model):
    with pytest.raises(ValueError, match="empty caption"):
        model.encode_text(["   "])


def test_vocab_closed_over_templates():
    vocab = build_vocab(DatasetSpec())
    assert vocab[:2] == ["<pad>", "<unk>"]
    assert {"red", "circle", "photo", "picture", "there"} <= set(vocab)


def test_frozen_refuses_training(model):
    model.freeze()
    with pytest.raises(RuntimeError, match="frozen"):
        model.train()
    assert not any(p.requires_grad for p in model.parameters())


@given(st.lists(st.integers(0, 5), min_size=6, max_size=80), st.integers(2, 6), st.integers(0, 1000))
def test_distinct_batches_never_repeat_a_key(keys, batch_size, seed):
    if batch_size > len(set(keys)):
        with pytest.raises(ValueError):
            list(distinct_batches(keys, batch_size, torch.Generator().manual_seed(seed)))
        return
    seen = []
    for idx in distinct_batches(keys, batch_size, torch.Generator().manual_seed(seed)):
        batch = [keys[i] for i in idx.tolist()]
        assert 2 <= len(batch) <= batch_size
        assert len(set(batch)) == len(batch)
        seen.extend(idx.tolist())
    assert len(seen) == len(set(seen))


def test_distinct_batches_cover_balanced_keys():
    keys = [c for c in range(16) for _ in range(10)]
    idx = torch.cat(list(distinct_batches(keys, 16, torch.Generator().manual_seed(0))))
    assert sorted(idx.tolist()) == list(range(160))


def _tiny_cfg(**kw):
    base = dict(epochs=3, batch_size=16, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_training_initial_loss_near_log_batch(tiny_spec, tiny_train):
    _, trace = train_surrogate(tiny_train, _tiny_cfg(epochs=1), tiny_spec)
    assert abs(trace.initial_loss - math.log(16)) <= 0.15 * math.log(16)


def test_training_reduces_loss_and_freezes(tiny_spec, tiny_train, tmp_path):
    model, trace = train_surrogate(tiny_train, _tiny_cfg(epochs=8), tiny_spec, tmp_path)
    assert trace.losses[-1] < trace.initial_loss
    assert len(trace.losses) == 8
    assert model.frozen and (tmp_path / "surrogate.ckpt").exists()


def test_training_deterministic(tiny_spec, tiny_train):
    a, la = train_surrogate(tiny_train, _tiny_cfg(), tiny_spec)
    b, lb = train_surrogate(tiny_train, _tiny_cfg(), tiny_spec)
    assert abs(la.losses[-1] - lb.losses[-1]) <= 1e-6
    assert checkpoint.state_hash(a) == checkpoint.state_hash(b)


def test_checkpoint_cadence(tiny_spec, tiny_train, tmp_path):
    _, trace = train_surrogate(tiny_train, _tiny_cfg(epochs=4, checkpoint_every=2), tiny_spec, tmp_path)
    assert [r.checkpoint is not None for r in trace.epochs] == [False, True, False, True]


def test_batch_larger_than_dataset(tiny_spec, tiny_train):
    with pytest.raises(ValueError, match="batch_size"):
        train_surrogate(tiny_train[:8], _tiny_cfg(batch_size=16), tiny_spec)


def test_divergence_reports_epoch_and_step(tiny_spec, tiny_train, model, monkeypatch):
    model.train()
    monkeypatch.setattr(SurrogateModel, "loss", lambda self, i, c: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(FloatingPointError, match="epoch 0 step 0"):
        train_contrastive(model, images_tensor(tiny_train), [s.caption for s in tiny_train], _tiny_cfg(),
                          keys=[s.class_id for s in tiny_train])


@pytest.mark.slow
def test_default_recipe_retrieval_sanity():
    from t2ue.pipeline import SurrogateSection
    spec = DatasetSpec()
    model, _ = train_surrogate(build_in_memory(spec, "pretrain"), SurrogateSection().train, spec)
    train, test = build_in_memory(spec, "train"), build_in_memory(spec, "test")
    train_hit = retrieval_eval(model, train, (1,), class_pools(train))[0].hit_at[1]
    test_hit = retrieval_eval(model, test, (1,), class_pools(test))[0].hit_at[1]
    print(f"surrogate I2T Hit@1 train {train_hit:.1f} test {test_hit:.1f}")
    assert train_hit >= 80 and test_hit >= 80
