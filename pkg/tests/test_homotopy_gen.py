import numpy as np
import pytest

from dxtk import homotopy_gen as hg
from dxtk import synth
from dxtk.io import CheckpointError
from dxtk.types import EMBED_DIM, embed_task, validate_task


@pytest.fixture(scope="module")
def embeddings(small_library):
    return np.stack([embed_task(t) for t in small_library])


@pytest.fixture(scope="module")
def base_model(embeddings):
    return hg.train_unconditional(embeddings, 100, 0)


def test_cosine_schedule_shape():
    betas = hg.cosine_betas(64)
    assert betas.shape == (64,) and np.all((betas > 0) & (betas < 1))
    abar = np.cumprod(1 - betas)
    assert np.all(np.diff(abar) < 0) and abar[-1] < 1e-3


def test_overfit_single_point(small_library):
    x = embed_task(small_library[0])
    model = hg.train_unconditional(np.stack([x] * 4), 500, 0)
    draws = hg.sample(model, 100, 1)
    dist = np.linalg.norm(draws - model.standardize(x), axis=1)
    assert np.mean(dist < 0.1) >= 0.9


def test_zero_epochs_keeps_initialisation(embeddings):
    model = hg.train_unconditional(embeddings, 0, 5)
    assert not model.trained
    assert np.array_equal(model.flat(), hg.init_model(embeddings, 5).flat())


def test_training_is_deterministic(embeddings):
    a = hg.train_unconditional(embeddings, 3, 2)
    b = hg.train_unconditional(embeddings, 3, 2)
    assert np.array_equal(a.flat(), b.flat())
    assert np.array_equal(hg.sample(a, 4, 9), hg.sample(b, 4, 9))
    assert not np.array_equal(a.flat(), hg.train_unconditional(embeddings, 3, 3).flat())


def test_identity_finetune_concentrates_near_condition(base_model, embeddings):
    model = hg.finetune_conditional(base_model, [(e, e) for e in embeddings], 500, 0)
    z_all = model.standardize(embeddings)
    for k in range(3):
        draws = hg.sample(model, 32, 3, embeddings[k])
        nearest = np.linalg.norm(draws[:, None] - z_all[None], axis=2).argmin(axis=1)
        assert np.all(nearest == k)
        assert np.median(np.linalg.norm(draws - z_all[k], axis=1)) < 0.5


def test_one_pair_finetune_recovers_parent(base_model, embeddings, small_library):
    child, parent = embeddings[2], embeddings[5]
    model = hg.finetune_conditional(base_model, [(child, parent)], 500, 0)
    assert model.conditional and not base_model.conditional
    draws = hg.sample(model, 100, 3, child)
    assert np.mean(np.linalg.norm(draws - model.standardize(parent), axis=1) < 0.15) >= 0.8
    # unconditional sampling still works after conditional training
    free = hg.sample(model, 8, 4)
    assert free.shape == (8, EMBED_DIM) and np.all(np.isfinite(free))
    # the proposed parent takes the trajectory and geometry of the true parent
    proposal = hg.propose_parent(model, small_library[2], small_library, 11)
    assert proposal.geometry == small_library[5].geometry
    assert proposal.id == f"gen:{small_library[2].id}:11"


def test_finetune_errors(base_model):
    with pytest.raises(hg.GeneratorError):
        hg.finetune_conditional(base_model, [], 1, 0)
    with pytest.raises(hg.GeneratorError):
        hg.train_unconditional(np.zeros((1, EMBED_DIM)), 1, 0)
    with pytest.raises(hg.GeneratorError):
        hg.train_unconditional(np.zeros((0, EMBED_DIM)), 1, 0)


def test_untrained_model_refuses_proposals(embeddings, small_library):
    model = hg.train_unconditional(embeddings, 0, 0)
    with pytest.raises(hg.GeneratorError):
        hg.propose_parent(model, small_library[0], small_library, 0)
    with pytest.raises(hg.GeneratorError):
        hg.propose_parent(hg.train_unconditional(embeddings, 1, 0), small_library[0], [], 0)


def test_proposals_are_valid_tasks(base_model, small_library):
    for seed in range(6):
        child = small_library[seed % len(small_library)]
        parent = hg.propose_parent(base_model, child, small_library, seed)
        validate_task(parent)
        assert parent.n_steps == child.n_steps and parent.dt == child.dt
    lone = [small_library[3]]
    for seed in range(4):
        assert hg.propose_parent(base_model, small_library[0], lone, seed).geometry == lone[0].geometry


def test_materialize_clamps_wild_samples(small_library):
    raw = np.random.default_rng(0).normal(0, 50, EMBED_DIM)
    task = hg.materialize(raw, small_library[0], small_library, "wild")
    validate_task(task)


def test_upsample_hits_keyframes():
    from dxtk.types import N_KEYFRAMES, STATE_DIM, keyframe_indices

    frames = np.random.default_rng(1).uniform(-0.5, 0.5, (N_KEYFRAMES, STATE_DIM))
    out = hg.upsample_keyframes(frames, 45)
    np.testing.assert_allclose(out[keyframe_indices(45)], frames, atol=1e-12)


def test_path_lengths_and_determinism(base_model, small_library):
    child = small_library[1]
    chain, rec = hg.propose_path(base_model, child, small_library, 0, 0)
    assert chain == [child] and rec.chain == [child.id] and rec.effective == []
    chain, rec = hg.propose_path(base_model, child, small_library, 3, 4)
    assert len(chain) == 4 and chain[-1] is child and rec.effective == [None] * 3
    again, _ = hg.propose_path(base_model, child, small_library, 3, 4)
    assert all(np.array_equal(a.ref, b.ref) for a, b in zip(chain, again))
    with pytest.raises(hg.GeneratorError):
        hg.propose_path(base_model, child, small_library, -1, 0)


def test_loss_halves_on_64_task_library():
    lib = synth.gen_library(64, 2, synth.default_families(), synth.default_geometries())
    emb = np.stack([embed_task(t) for t in lib])
    val = emb[::4]
    start = hg.denoising_loss(hg.init_model(emb, 0), val, 123)
    model = hg.train_unconditional(emb, 200, 0)
    assert hg.denoising_loss(model, val, 123) <= 0.5 * start


def test_save_load_round_trip(base_model, tmp_path, small_library):
    path = tmp_path / "gen.dxtk"
    hg.save_generator(path, base_model)
    back = hg.load_generator(path)
    assert np.array_equal(back.flat(), base_model.flat())
    np.testing.assert_array_equal(back.mean, base_model.mean)
    assert back.trained and back.steps == base_model.steps
    assert np.array_equal(hg.sample(back, 3, 2, embed_task(small_library[0])),
                          hg.sample(base_model, 3, 2, embed_task(small_library[0])))
    from dxtk import io

    io.save_checkpoint(tmp_path / "other.dxtk", np.zeros(3), {"kind": "controller"})
    with pytest.raises(CheckpointError):
        hg.load_generator(tmp_path / "other.dxtk")
