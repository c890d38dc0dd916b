from __future__ import annotations

import numpy as np
import pytest

from gada.autodiff import ContractError, ParamStore, Tensor, backward
from gada.losses import loss_classification
from gada.nets import (
    AdamState,
    CheckpointFormatError,
    ClassifierModel,
    DiscriminatorModel,
    GeneratorModel,
    NetSpec,
    adam_step,
    forward_classifier,
    forward_discriminator,
    forward_generator,
    init_params,
    read_checkpoint,
    write_checkpoint,
)


def _classifier(K=2, seed=0):
    return ClassifierModel(NetSpec([2, 8], head="none"), NetSpec([8, 4, K + 1]), K, seed)


def test_init_deterministic_in_seed():
    a, b = ParamStore(), ParamStore()
    spec = NetSpec([3, 5, 2])
    init_params(spec, 42, "n", a)
    init_params(spec, 42, "n", b)
    for name in a.names():
        assert np.array_equal(a[name].data, b[name].data)


def test_init_differs_across_seeds():
    a, b = ParamStore(), ParamStore()
    spec = NetSpec([3, 5, 2])
    init_params(spec, 1, "n", a)
    init_params(spec, 2, "n", b)
    assert not np.array_equal(a["n.W0"].data, b["n.W0"].data)


def test_init_weight_variance_matches_he_scale():
    # 250 re-inits of an 8->5 layer give 10^4 weight draws; var target 2/8.
    draws = []
    for seed in range(250):
        ps = ParamStore()
        init_params(NetSpec([8, 5]), seed, "n", ps)
        draws.append(ps["n.W0"].data.reshape(-1))
    var = np.concatenate(draws).var()
    assert 0.8 * 0.25 < var < 1.2 * 0.25


def test_classifier_output_width_is_k_plus_one():
    model = _classifier(K=2)
    logits, features, phi = forward_classifier(model, Tensor(np.zeros((1, 2))))
    assert logits.shape == (1, 3)
    assert features.shape == (1, 8)
    assert phi.shape == (1, 4)


def test_classifier_construction_rejects_wrong_head_width():
    with pytest.raises(ContractError):
        ClassifierModel(NetSpec([2, 8], head="none"), NetSpec([8, 4, 5]), K=2, seed=0)


def test_zero_weight_classifier_is_uniform():
    model = _classifier()
    for _, p in model.params.items():
        p.data[:] = 0.0
    logits, _, _ = forward_classifier(model, Tensor(np.ones((4, 2))))
    assert np.array_equal(logits.data, np.zeros((4, 3)))
    assert np.allclose(logits.softmax().data, 1.0 / 3.0, atol=1e-15)


def test_zero_weight_discriminator_is_half():
    disc = DiscriminatorModel(NetSpec([8, 4, 1], head="sigmoid"), seed=0)
    for _, p in disc.params.items():
        p.data[:] = 0.0
    out = forward_discriminator(disc, Tensor(np.ones((3, 8))))
    assert out.shape == (3, 1)
    assert np.all(out.data == 0.5)


def test_discriminator_clamps_extreme_confidence():
    disc = DiscriminatorModel(NetSpec([1, 1], head="sigmoid"), seed=0)
    disc.params["D.W0"].data[:] = 100.0
    disc.params["D.b0"].data[:] = 0.0
    out = forward_discriminator(disc, Tensor([[5.0]]))
    assert out.data[0, 0] == 1.0 - 1e-7


def test_zero_weight_generator_outputs_zero():
    gen = GeneratorModel(NetSpec([4, 8, 2], head="tanh"), seed=0)
    for _, p in gen.params.items():
        p.data[:] = 0.0
    out = forward_generator(gen, Tensor(np.ones((3, 4))))
    assert np.array_equal(out.data, np.zeros((3, 2)))


def test_generator_outputs_bounded_and_deterministic():
    gen = GeneratorModel(NetSpec([4, 8, 2], head="tanh"), seed=3)
    z = Tensor(np.random.default_rng(0).standard_normal((16, 4)))
    a = forward_generator(gen, z).data
    b = forward_generator(gen, z).data
    assert np.all((a > -1.0) & (a < 1.0))
    assert np.array_equal(a, b)


def test_forward_purity_bit_identical():
    model = _classifier(seed=5)
    x = Tensor(np.random.default_rng(1).uniform(-2, 2, (6, 2)))
    l1, f1, p1 = forward_classifier(model, x)
    l2, f2, p2 = forward_classifier(model, x)
    assert np.array_equal(l1.data, l2.data)
    assert np.array_equal(f1.data, f2.data)
    assert np.array_equal(p1.data, p2.data)


def test_adam_zero_gradients_keep_params():
    ps = ParamStore()
    ps.add("p", Tensor(np.array([1.0, -2.0]), requires_grad=True))
    state = AdamState(ps, lr=0.1)
    adam_step(ps, {"p": Tensor(np.zeros(2))}, state)
    assert np.array_equal(ps["p"].data, [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_hand_computed():
    # g=1, lr=0.1: bias-corrected first step moves by lr*g/(sqrt(g^2)+eps).
    ps = ParamStore()
    ps.add("p", Tensor(np.array([5.0]), requires_grad=True))
    state = AdamState(ps, lr=0.1)
    adam_step(ps, {"p": Tensor(np.array([1.0]))}, state)
    expected = 5.0 - 0.1 * 1.0 / (1.0 + 1e-8)
    assert abs(ps["p"].data[0] - expected) < 1e-15
    assert abs(ps["p"].data[0] - 4.9) < 1e-8


def test_adam_trajectories_reproducible():
    def run():
        ps = ParamStore()
        init_params(NetSpec([3, 3]), 7, "n", ps)
        state = AdamState(ps, lr=0.01)
        for step in range(5):
            grads = {name: Tensor(np.full_like(p.data, 0.25))
                     for name, p in ps.items()}
            adam_step(ps, grads, state)
        return {name: p.data.copy() for name, p in ps.items()}

    a, b = run(), run()
    for name in a:
        assert np.array_equal(a[name], b[name])


def test_adam_missing_gradient_key_errors():
    ps = ParamStore()
    ps.add("p", Tensor(np.zeros(2), requires_grad=True))
    state = AdamState(ps, lr=0.1)
    with pytest.raises(ContractError):
        adam_step(ps, {}, state)


def test_adam_lr_zero_updates_moments_only():
    ps = ParamStore()
    ps.add("p", Tensor(np.array([1.5]), requires_grad=True))
    state = AdamState(ps, lr=0.0)
    adam_step(ps, {"p": Tensor(np.array([2.0]))}, state)
    assert ps["p"].data[0] == 1.5
    assert state.m["p"][0] != 0.0 and state.v["p"][0] != 0.0


def test_default_architecture_learns_separable_blobs():
    # Desk-scale default shapes reach >= 99% source accuracy with the
    # supervised loss alone on two well-separated Gaussians.
    rng = np.random.default_rng(0)
    n = 256
    x = np.concatenate([rng.normal((-2.0, 0.0), 0.3, (n // 2, 2)),
                        rng.normal((2.0, 0.0), 0.3, (n // 2, 2))])
    y = np.concatenate([np.ones(n // 2, dtype=int), np.full(n // 2, 2)])
    model = ClassifierModel(NetSpec([2, 64, 64], head="none"),
                            NetSpec([64, 32, 3]), K=2, seed=0)
    state = AdamState(model.params, lr=2e-4)
    for step in range(500):
        idx = rng.choice(n, size=64, replace=False)
        loss = loss_classification(model, Tensor(x[idx]), y[idx])
        adam_step(model.params, backward(loss, model.params), state)
    logits, _, _ = forward_classifier(model, Tensor(x))
    pred = logits.data[:, :2].argmax(axis=1) + 1
    assert (pred == y).mean() >= 0.99


def _roundtrip_payload():
    meta = {"K": 2, "step": 7, "taps": {"disc": "features"}}
    rng = np.random.default_rng(0)
    tensors = [("g.W0", rng.uniform(-1, 1, (3, 4))),
               ("g.b0", rng.uniform(-1, 1, 4)),
               ("adam.g.W0.m", rng.uniform(-1, 1, (3, 4)))]
    return meta, tensors


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    meta, tensors = _roundtrip_payload()
    path = tmp_path / "ckpt.bin"
    write_checkpoint(path, meta, tensors)
    meta2, loaded = read_checkpoint(path)
    assert meta2 == meta
    assert list(loaded) == [name for name, _ in tensors]
    for name, arr in tensors:
        assert np.array_equal(loaded[name], arr)
    # save -> load -> save is byte-identical
    path2 = tmp_path / "ckpt2.bin"
    write_checkpoint(path2, meta2, list(loaded.items()))
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_bad_magic_reports_offset(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOT-A-CKPT\n")
    with pytest.raises(CheckpointFormatError) as err:
        read_checkpoint(path)
    assert err.value.offset == 0


def test_checkpoint_truncated_file_errors(tmp_path):
    meta, tensors = _roundtrip_payload()
    path = tmp_path / "ckpt.bin"
    write_checkpoint(path, meta, tensors)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(CheckpointFormatError):
        read_checkpoint(path)
