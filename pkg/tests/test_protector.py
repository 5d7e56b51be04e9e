import math

import numpy as np
import pytest
import torch

from t2ue import checkpoint
from t2ue.config import TrainConfig
from t2ue.generator import GeneratorModel
from t2ue.protector import (ProtectionPlan, apply_noise, export_protected, generator_objective, make_plan,
                            noise_bank, protect_samples, train_generator)
from t2ue.toydata import load_dataset

EPS = 8 / 255


# --- apply_noise ---------------------------------------------------------------

def test_apply_zero_noise_is_identity():
    img = np.random.default_rng(0).random((4, 4, 3))
    assert np.array_equal(apply_noise(img, np.zeros_like(img)), img)


def test_apply_clamps_and_subtracts():
    out = apply_noise(np.array([1.0, 0.5]), np.array([EPS, -EPS]))
    assert out[0] == 1.0
    assert out[1] == pytest.approx(0.468627, abs=1e-6)


def test_apply_exact_where_unclipped():
    img = torch.full((3, 4, 4), 0.5)
    delta = torch.linspace(-EPS, EPS, 48).view(3, 4, 4)
    assert torch.equal(apply_noise(img, delta) - img, (img + delta) - img)


def test_apply_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        apply_noise(np.zeros((4, 4, 3)), np.zeros((3, 4, 4)))


# --- plans ---------------------------------------------------------------------

def test_class_wise_plan(tiny_spec):
    plan = make_plan("class_wise", tiny_spec, 7)
    assert len(plan.entries) == 16
    assert len({(e["template_id"], tuple(e["z"])) for e in plan.entries.values()}) == 16
    assert {e["template_id"] for e in plan.entries.values()} == {0}
    assert make_plan("class_wise", tiny_spec, 7).to_json() == plan.to_json()
    assert make_plan("class_wise", tiny_spec, 8).hash != plan.hash


def test_sample_wise_plan(tiny_spec):
    plan = make_plan("sample_wise", tiny_spec, 7)
    assert len(plan.entries) == tiny_spec.count("train")
    assert len({tuple(e["z"]) for e in plan.entries.values()}) == len(plan.entries)
    assert len({e["template_id"] for e in plan.entries.values()}) > 1
    own = make_plan("sample_wise", tiny_spec, 7, template_policy="own")
    assert all(e["template_id"] == int(k.split("-")[-1]) % 4 for k, e in own.entries.items())


def test_plan_validation(tiny_spec):
    with pytest.raises(ValueError, match="mode"):
        make_plan("pixel_wise", tiny_spec, 0)
    with pytest.raises(ValueError, match="fixed"):
        make_plan("class_wise", tiny_spec, 0, template_policy="draw")


def test_plan_round_trip(tiny_spec, tmp_path):
    plan = make_plan("sample_wise", tiny_spec, 3)
    back = ProtectionPlan.read(plan.write(tmp_path / "plan.json"))
    assert back.to_json() == plan.to_json() and back.hash == plan.hash


# --- zero contact --------------------------------------------------------------

class _Withheld:
    """Sample whose image raises on access; only id, caption and label are readable."""

    def __init__(self, s):
        self.id, self.caption, self.class_id, self.template_id = s.id, s.caption, s.class_id, s.template_id

    @property
    def image(self):
        raise AssertionError(f"image of {self.id} read before apply time")


@pytest.mark.parametrize("mode", ["class_wise", "sample_wise"])
def test_noise_never_reads_images(mode, tiny_spec, tiny_train, small_generator, frozen_surrogate):
    plan = make_plan(mode, tiny_spec, 7)
    sentinel = [_Withheld(s) for s in tiny_train]
    from t2ue.protector import missing_keys
    assert missing_keys(sentinel, plan) == []
    bank = noise_bank(small_generator, frozen_surrogate, plan)
    # images are only needed now, when the noise is applied
    protected = protect_samples(tiny_train, bank, plan)
    assert len(protected) == len(tiny_train)


def test_class_wise_noise_shared_within_class(tiny_spec, tiny_train, small_generator, frozen_surrogate):
    plan = make_plan("class_wise", tiny_spec, 7)
    protected = protect_samples(tiny_train, noise_bank(small_generator, frozen_surrogate, plan), plan)
    by_class = {}
    for s, p in zip(tiny_train, protected):
        raw = np.rint(p.image * 255).astype(int) - np.rint(s.image * 255).astype(int)
        unclipped = (np.rint(s.image * 255) >= 8) & (np.rint(s.image * 255) <= 247)
        by_class.setdefault(s.class_id, []).append((raw, unclipped))
    for items in by_class.values():
        (a, ma), (b, mb) = items[0], items[1]
        both = ma & mb
        assert both.any() and np.array_equal(a[both], b[both])


def test_noise_bank_rejects_epsilon_mismatch(tiny_spec, small_generator, frozen_surrogate):
    plan = make_plan("class_wise", tiny_spec, 7, epsilon=4 / 255)
    with pytest.raises(ValueError, match="epsilon"):
        noise_bank(small_generator, frozen_surrogate, plan)


def test_plan_dataset_mismatch_lists_ids(tiny_spec, tiny_train, small_generator, frozen_surrogate, tmp_path):
    plan = make_plan("sample_wise", tiny_spec, 7)
    del plan.entries[tiny_train[5].id]
    with pytest.raises(KeyError, match=tiny_train[5].id):
        export_protected(tiny_train, small_generator, frozen_surrogate, plan, tmp_path, tiny_spec)


# --- export --------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["class_wise", "sample_wise"])
def test_export_round_trip_bit_exact(mode, tiny_spec, tiny_train, small_generator, frozen_surrogate, tmp_path):
    plan = make_plan(mode, tiny_spec, 7)
    bank = noise_bank(small_generator, frozen_surrogate, plan)
    manifest = export_protected(tiny_train, small_generator, frozen_surrogate, plan, tmp_path / "a", tiny_spec,
                                generator_checkpoint_hash="abc", noise_dir=tmp_path / "noise")
    assert manifest.extra["plan_hash"] == plan.hash and manifest.extra["epsilon"] == plan.epsilon
    loaded = load_dataset(tmp_path / "a")
    expected = protect_samples(tiny_train, bank, plan)
    for got, want, clean in zip(loaded, expected, tiny_train):
        assert np.array_equal(got.image, want.image)
        assert got.caption == clean.caption and got.class_id == clean.class_id
        assert np.abs(got.image.astype(np.float64) - clean.image).max() <= EPS + 1 / 510
    assert any((tmp_path / "noise").iterdir())
    export_protected(tiny_train, small_generator, frozen_surrogate, plan, tmp_path / "b", tiny_spec)
    for e in manifest.entries:
        assert (tmp_path / "a" / e.file).read_bytes() == (tmp_path / "b" / e.file).read_bytes()


def test_exported_pixels_within_bound_for_saturated_generator(tiny_spec, tiny_train, frozen_surrogate, tmp_path):
    torch.manual_seed(0)
    gen = GeneratorModel(block_channels=(8, 8, 8), base_channels=8, head_init_scale=100.0)
    plan = make_plan("sample_wise", tiny_spec, 1)
    export_protected(tiny_train, gen, frozen_surrogate, plan, tmp_path, tiny_spec)
    loaded = load_dataset(tmp_path)
    worst = max(float(np.abs(p.image.astype(np.float64) - s.image).max()) for p, s in zip(loaded, tiny_train))
    assert 7.5 / 255 <= worst <= EPS + 1 / 510


# --- generator training --------------------------------------------------------

def _cfg(**kw):
    base = dict(epochs=3, batch_size=16, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_training_refuses_unfrozen_surrogate(tiny_spec, tiny_train, small_generator):
    from t2ue.surrogate import SurrogateModel, build_vocab
    with pytest.raises(RuntimeError, match="frozen"):
        train_generator(tiny_train, SurrogateModel(build_vocab(tiny_spec)), small_generator, _cfg())


def test_training_resolution_mismatch(tiny_train, frozen_surrogate):
    gen = GeneratorModel(block_channels=(8, 8), base_channels=8)
    with pytest.raises(ValueError, match="px"):
        train_generator(tiny_train, frozen_surrogate, gen, _cfg())


def test_training_leaves_surrogate_untouched(tiny_train, frozen_surrogate, small_generator, tmp_path):
    before = frozen_surrogate.save(tmp_path / "before.ckpt").read_bytes()
    _, trace = train_generator(tiny_train, frozen_surrogate, small_generator, _cfg(epochs=2))
    assert trace.surrogate_hash_before == trace.surrogate_hash_after == checkpoint.state_hash(frozen_surrogate)
    assert frozen_surrogate.save(tmp_path / "after.ckpt").read_bytes() == before


def test_initial_loss_close_to_clean_loss(tiny_train, frozen_surrogate):
    torch.manual_seed(0)
    gen = GeneratorModel(block_channels=(16, 8, 8), base_channels=16)  # small head init
    _, trace = train_generator(tiny_train, frozen_surrogate, gen, _cfg(epochs=1))
    assert abs(trace.initial_loss - trace.clean_initial_loss) <= 0.2 * trace.clean_initial_loss


def test_training_lowers_objective_and_checkpoints(tiny_spec, tiny_train, frozen_surrogate, small_generator,
                                                    tmp_path):
    held_out = tiny_train[1::4]
    torch.manual_seed(1)
    untrained = GeneratorModel(block_channels=(16, 8, 8), base_channels=16, head_init_scale=1.0)
    gen, trace = train_generator(tiny_train, frozen_surrogate, small_generator, _cfg(epochs=6, checkpoint_every=3),
                                 tmp_path)
    assert generator_objective(gen, frozen_surrogate, held_out) < generator_objective(untrained, frozen_surrogate,
                                                                                      held_out)
    assert [r.checkpoint is not None for r in trace.epochs] == [False, False, True, False, False, True]
    assert (tmp_path / "generator.ckpt").exists()
    assert len(trace.epochs) == 6 and all(math.isfinite(r.loss) for r in trace.epochs)


def test_training_aborts_on_non_finite_loss(tiny_train, frozen_surrogate, small_generator, monkeypatch):
    import t2ue.protector as P
    monkeypatch.setattr(P, "info_nce", lambda *a: torch.tensor(float("inf"), requires_grad=True))
    with pytest.raises(FloatingPointError, match="step 0"):
        train_generator(tiny_train, frozen_surrogate, small_generator, _cfg())


@pytest.mark.parametrize("policy,per_epoch_fresh", [("resample", True), ("per_sample", False)])
def test_z_policy_controls_latent_reuse(tiny_train, frozen_surrogate, small_generator, policy, per_epoch_fresh):
    seen = []
    small_generator.register_forward_pre_hook(lambda m, args: seen.extend(map(tuple, args[1].tolist())))
    train_generator(tiny_train, frozen_surrogate, small_generator, _cfg(epochs=2), z_policy=policy)
    assert len(seen) == 2 * len(tiny_train)
    assert len(set(seen)) == (2 * len(tiny_train) if per_epoch_fresh else len(tiny_train))


def test_z_policy_validated(tiny_train, frozen_surrogate, small_generator):
    with pytest.raises(ValueError, match="z_policy"):
        train_generator(tiny_train, frozen_surrogate, small_generator, _cfg(), z_policy="fixed")
