import numpy as np
import pytest

from toys import TOY_DRUGS, TOY_GENES, check_gradients, loss_fns, toy_cfg, toy_setup
from wiser import checkpoint
from wiser import gradcore as gc
from wiser import reprlearn as rl
from wiser.errors import ContractError, NumericError, ShapeError


def cosine_np(a, b):
    return (a @ b.T) / (np.linalg.norm(a, axis=1)[:, None] * np.linalg.norm(b, axis=1)[None, :])


def softmax_np(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# -- representation ------------------------------------------------------------------

def test_attention_zero_temperature_is_uniform():
    rng = np.random.default_rng(0)
    w = rl.attention_weights(gc.Tensor(rng.normal(size=(4, 3))), gc.Tensor(rng.normal(size=(5, 3))), 0.0)
    np.testing.assert_allclose(w.data, 0.2, rtol=0, atol=1e-15)


def test_attention_single_drug_is_one():
    rng = np.random.default_rng(1)
    w = rl.attention_weights(gc.Tensor(rng.normal(size=(4, 3))), gc.Tensor(rng.normal(size=(1, 3))), 7.0)
    assert np.all(w.data == 1.0)


def test_attention_scalar_oracle():
    # unit vectors with cosines 0.8 and 0.2 against the first axis
    cs = np.array([[1.0, 0.0]])
    r = np.array([[0.8, 0.6], [0.2, np.sqrt(1 - 0.04)]])
    w = rl.attention_weights(gc.Tensor(cs), gc.Tensor(r), 2.5).data
    e = np.exp([2.0, 0.5])
    np.testing.assert_allclose(w[0], e / e.sum(), rtol=0, atol=1e-12)


def test_attention_matches_numpy_and_cosine_scale_invariance():
    rng = np.random.default_rng(2)
    cs, r = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))
    w = rl.attention_weights(gc.Tensor(cs), gc.Tensor(r), 3.0).data
    np.testing.assert_allclose(w, softmax_np(3.0 * cosine_np(cs, r)), rtol=0, atol=1e-12)
    w2 = rl.attention_weights(gc.Tensor(cs * 7.5), gc.Tensor(r), 3.0).data
    np.testing.assert_allclose(w, w2, rtol=0, atol=1e-12)


def test_weighted_repr_examples():
    r = np.array([[1.0, 2.0], [3.0, -4.0]])
    one_hot = rl.weighted_repr(gc.Tensor([[0.0, 1.0]]), gc.Tensor(r)).data
    assert one_hot[0].tolist() == [3.0, -4.0]
    uniform = rl.weighted_repr(gc.Tensor([[0.5, 0.5]]), gc.Tensor(r)).data
    np.testing.assert_allclose(uniform[0], [2.0, -1.0], rtol=0, atol=1e-15)
    rng = np.random.default_rng(3)
    w, r = rng.dirichlet(np.ones(4), size=5), rng.normal(size=(4, 3))
    z = rl.weighted_repr(gc.Tensor(w), gc.Tensor(r)).data
    oracle = np.array([[sum(w[i, j] * r[j, k] for j in range(4)) for k in range(3)] for i in range(5)])
    np.testing.assert_allclose(z, oracle, rtol=0, atol=1e-12)


# -- losses: values ------------------------------------------------------------------

def test_recon_zero_when_decoder_reproduces_input():
    model, xc, xt, _, _ = toy_setup(0)

    class Identity(rl.WiserModel):
        def decode(self, h):
            return self._target

    m = Identity(TOY_GENES, TOY_DRUGS, toy_cfg(), seed=0)
    total = 0.0
    for x in (xc, xt):
        m._target = gc.Tensor(x)
        total += rl.recon_loss(x, x, m).item()
    assert total == 0.0


def test_recon_one_gene_closed_form():
    cfg = toy_cfg(encoder_hidden=1, latent_dim=1, decoder_hidden=(1, 1))
    model = rl.WiserModel(1, 1, cfg, seed=0)
    for k in model.params:
        model.params[k].data = np.zeros_like(model.params[k].data)
    model.params["codebook"].data[:] = 2.0
    model.params["decoder.2.bias"].data[:] = 0.5
    # one drug: W = 1 and Z = 2; decoder output is its last bias
    loss = rl.recon_loss([[3.0]], [[-1.0]], model).item()
    assert loss == (0.5 - 3.0) ** 2 + (0.5 + 1.0) ** 2


def test_ortho_examples():
    z = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    p = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert rl.ortho_loss(z, p, z, p).item() == 0.0
    rng = np.random.default_rng(4)
    zc, pc, zt, pt = (rng.normal(size=(3, 2)) for _ in range(4))
    base = rl.ortho_loss(zc, pc, zt, pt).item()
    assert rl.ortho_loss(2.5 * zc, pc, 2.5 * zt, pt).item() == pytest.approx(6.25 * base, rel=1e-12)
    oracle = sum(sum(sum(z[i, a] * p[i, b] for i in range(3)) ** 2 for a in range(2) for b in range(2)) / 3
                 for z, p in ((zc, pc), (zt, pt)))
    assert base == pytest.approx(oracle, rel=1e-12)
    with pytest.raises(ShapeError):
        rl.ortho_loss(zc[:2], pc, zt, pt)


def test_embed_value_and_zero():
    rng = np.random.default_rng(5)
    z, cs = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert rl.embed_loss(z, z).item() == 0.0
    assert rl.embed_loss(z, cs).item() == pytest.approx(2 * np.mean(((z - cs) ** 2).sum(axis=1)), rel=1e-12)


def test_embed_first_term_gives_no_gradient_to_cs():
    rng = np.random.default_rng(6)
    z, cs = gc.parameter(rng.normal(size=(4, 3))), gc.parameter(rng.normal(size=(4, 3)))
    gz, gcs = gc.grad(rl.embed_loss(z, cs, second=False), [z, cs])
    assert not gcs.data.any() and gz.data.any()
    gz, gcs = gc.grad(rl.embed_loss(z, cs, first=False), [z, cs])
    assert not gz.data.any() and gcs.data.any()


def assert_group_zero(grads, params, names, model):
    by_id = {id(p): g for p, g in zip(params, grads)}
    for p in model.groups(names):
        assert not by_id[id(p)].data.any()


def test_embed_routing_at_model_level():
    """First term only: codebook moves, encoder does not. Second only: the reverse."""
    model, xc, xt, _, _ = toy_setup(1)
    params = model.groups(("shared", "codebook"))
    cs = model.shared(xc)
    first = rl.embed_loss(model.codebook_repr(cs), cs, second=False)
    grads = gc.grad(first, params)
    assert_group_zero(grads, params, ("shared",), model)
    assert model.codebook is params[-1] and grads[-1].data.any()
    cs = model.shared(xc)
    second = rl.embed_loss(model.codebook_repr(cs), cs, first=False)
    grads = gc.grad(second, params)
    assert not grads[-1].data.any()
    assert any(g.data.any() for g in grads[:-1])


def test_triplet_examples():
    cs = np.array([[1.0, 0.0], [0.0, 1.0]])
    r = np.array([[1.0, 0.0], [0.0, 1.0]])
    # sample 0 responds to drug 0, sample 1 does not respond to drug 0
    labels = np.array([[1, -1], [0, -1]])
    assert rl.triplet_loss(cs, labels, r, 0.2).item() == 0.0  # s+ 0, s- 1
    # flipped: s+ 1, s- 0 -> 1 + margin
    assert rl.triplet_loss(cs, np.array([[0, -1], [1, -1]]), r, 0.2).item() == pytest.approx(1.2)
    assert rl.triplet_loss(cs, np.full((2, 2), -1), r, 0.2).item() == 0.0
    assert rl.triplet_loss(cs, np.ones((2, 2), dtype=int), r, 0.2).item() == 0.0


def test_triplet_hand_oracle_and_range():
    rng = np.random.default_rng(7)
    for _ in range(50):
        cs, r = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        labels = np.array([[1, 0], [0, 1]])
        dis = 1 - cosine_np(cs, r)
        s_pos = (dis[0, 0] + dis[1, 1]) / 2
        s_neg = (dis[0, 1] + dis[1, 0]) / 2
        got = rl.triplet_loss(cs, labels, r, 0.3).item()
        assert got == pytest.approx(max(s_pos - s_neg + 0.3, 0.0), abs=1e-12)
        assert 0.0 <= got <= 2.3


def test_critic_zero_network_gives_lambda():
    model, xc, xt, _, eps = toy_setup(2)
    for p in model.group("critic"):
        p.data = np.zeros_like(p.data)
    assert rl.critic_loss(xc, xt, model, 10.0, eps=eps).item() == 10.0


def test_critic_linear_penalty():
    cfg = toy_cfg(critic_hidden=())
    model = rl.WiserModel(TOY_GENES, TOY_DRUGS, cfg, seed=3)
    _, xc, xt, _, eps = toy_setup(3)
    c = model.params["critic.0.weight"].data[:, 0]
    with gc.no_grad():
        hc = model.concat_repr(gc.Tensor(xc), "cell").data
        ht = model.concat_repr(gc.Tensor(xt), "patient").data
    gap = (ht @ c).mean() - (hc @ c).mean()
    want = gap + 4.0 * (np.linalg.norm(c) - 1) ** 2
    assert rl.critic_loss(xc, xt, model, 4.0, eps=eps).item() == pytest.approx(want, rel=1e-12)


def test_critic_unequal_batches():
    model, xc, xt, _, _ = toy_setup(4)
    with pytest.raises(ContractError):
        rl.critic_loss(xc, xt[:-1], model, 10.0)


def test_gen_loss_examples():
    model, _, xt, _, _ = toy_setup(5)
    for p in model.group("critic"):
        p.data = np.zeros_like(p.data)
    assert rl.gen_loss(xt, model).item() == 0.0
    cfg = toy_cfg(critic_hidden=())
    model = rl.WiserModel(TOY_GENES, TOY_DRUGS, cfg, seed=5)
    with gc.no_grad():
        h = model.concat_repr(gc.Tensor(xt), "patient").data
    w = model.params["critic.0.weight"].data
    b = model.params["critic.0.bias"].data
    assert rl.gen_loss(xt, model).item() == pytest.approx(-np.mean(h @ w + b), rel=1e-12)
    # F(x) = sum(x) on an all-ones input of width w gives -w
    w_ones = np.ones_like(w)
    assert -np.mean(np.ones((3, w.shape[0])) @ w_ones) == -w.shape[0]


def test_loss_signs():
    model, xc, xt, y, eps = toy_setup(6)
    fns = loss_fns(model, xc, xt, y, eps)
    for name in ("recon", "ortho", "embed", "cns"):
        assert fns[name][0]().item() >= 0.0


# -- gradients -------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("name", ["recon", "ortho", "embed", "cns", "gen", "critic"])
def test_loss_gradients_vs_finite_differences(name, seed):
    model, xc, xt, y, eps = toy_setup(seed)
    err, norm = check_gradients(model, *loss_fns(model, xc, xt, y, eps)[name])
    assert norm > 0
    assert err < (1e-3 if name == "critic" else 1e-4)


def test_pl_loss_parts_add_up():
    model, xc, xt, y, _ = toy_setup(7)
    parts = {}
    total = rl.pl_loss(model, xc, y, xt, toy_cfg(), parts=parts).item()
    assert total == pytest.approx(sum(parts.values()), rel=1e-12)
    off = rl.pl_loss(model, xc, y, xt, toy_cfg(use_cns=False, use_embed=False), parts=parts).item()
    assert off == pytest.approx(parts["recon"] + parts["ortho"], rel=1e-12)
    assert parts["cns"] == 0.0 and parts["embed"] == 0.0


# -- training ------------------------------------------------------------------------

def toy_data(seed, n_cell=20, n_patient=20):
    rng = np.random.default_rng(seed)
    return rl.TrainData(rng.normal(size=(n_cell, TOY_GENES)),
                        rng.integers(-1, 2, size=(n_cell, TOY_DRUGS)),
                        rng.normal(size=(n_patient, TOY_GENES)) + 0.3)


def snapshot(model):
    return {k: v.data.copy() for k, v in model.params.items()}


def test_zero_epochs_leave_model_unchanged():
    model, *_ = toy_setup(8)
    before = snapshot(model)
    cfg = toy_cfg(pretrain_epochs=0, adv_epochs=0)
    state = rl.train_representation(model, toy_data(0), cfg, np.random.default_rng(0))
    assert state.generator_updates == 0
    for k, v in snapshot(model).items():
        assert v.tobytes() == before[k].tobytes()


def test_pretrain_reduces_loss():
    model = rl.WiserModel(TOY_GENES, TOY_DRUGS, toy_cfg(), seed=9)
    data = toy_data(1)
    cfg = toy_cfg(pretrain_epochs=50, lr_pretrain=1e-2)
    before = rl.pl_loss(model, data.x_cell, data.y_cell, data.x_patient, cfg).item()
    state = rl.pretrain(model, data, cfg, np.random.default_rng(0))
    after = rl.pl_loss(model, data.x_cell, data.y_cell, data.x_patient, cfg).item()
    assert len(state.pretrain_trace) == 50
    assert after < before


def test_training_deterministic():
    outs = []
    for _ in range(2):
        model = rl.WiserModel(TOY_GENES, TOY_DRUGS, toy_cfg(), seed=10)
        rl.train_representation(model, toy_data(2), toy_cfg(pretrain_epochs=2, adv_epochs=2),
                                np.random.default_rng(4))
        outs.append(checkpoint.dumps(model.state_dict()))
    assert outs[0] == outs[1]


@pytest.mark.parametrize("steps,ratio", [(10, 5), (12, 5), (7, 1), (9, 10)])
def test_critic_cadence_counters(steps, ratio):
    model = rl.WiserModel(TOY_GENES, TOY_DRUGS, toy_cfg(), seed=11)
    # batch 5 and 5 * steps patients give exactly `steps` batches in one epoch
    data = toy_data(3, n_cell=10, n_patient=5 * steps)
    cfg = toy_cfg(adv_epochs=1, critic_steps=ratio)
    state = rl.adversarial_train(model, data, cfg, np.random.default_rng(0))
    assert state.batch_steps == state.critic_updates == steps
    assert state.generator_updates == steps // ratio


def test_nonfinite_loss_raises():
    model = rl.WiserModel(TOY_GENES, TOY_DRUGS, toy_cfg(), seed=12)
    data = toy_data(4)
    data.x_cell[0, 0] = np.inf
    with pytest.raises(NumericError, match="epoch 0"):
        rl.pretrain(model, data, toy_cfg(pretrain_epochs=1), np.random.default_rng(0))


def test_paired_batches_cover_larger_domain():
    pb = rl.PairedBatches(7, 23, 5, np.random.default_rng(0))
    assert pb.steps_per_epoch == 5
    seen = np.concatenate([pb.next()[1] for _ in range(4)])
    assert len(np.unique(seen)) == 20


# -- encoding and persistence -----------------------------------------------------------

def test_encode_dataset_invariants():
    model, *_ = toy_setup(13)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(9, TOY_GENES))
    x[4] = x[1]
    emb = rl.encode_dataset(model, x, block=4)
    np.testing.assert_allclose(emb.W.sum(axis=1), 1.0, rtol=0, atol=1e-9)
    assert emb.Z[4].tobytes() == emb.Z[1].tobytes()
    r = model.codebook.data
    w = softmax_np(model.inv_temp * cosine_np(emb.C_S_out, r))
    np.testing.assert_allclose(emb.Z, w @ r, rtol=0, atol=1e-9)
    with pytest.raises(ShapeError):
        rl.encode_dataset(model, x[:, :-1])


def test_checkpoint_round_trip(tmp_path):
    model, xc, *_ = toy_setup(14)
    checkpoint.save(tmp_path / "m.wisr", model.state_dict())
    back = rl.WiserModel.from_state_dict(checkpoint.load(tmp_path / "m.wisr"))
    for k, v in model.params.items():
        assert back.params[k].data.tobytes() == v.data.tobytes()
    assert rl.encode_dataset(back, xc).Z.tobytes() == rl.encode_dataset(model, xc).Z.tobytes()
    assert (tmp_path / "m.wisr").read_bytes()[:4] == b"WISR"


def test_config_validation():
    from wiser.errors import ConfigError
    for bad in (dict(batch_size=0), dict(inv_temp=-1), dict(pretrain_epochs=-1), dict(lr_adv=0)):
        with pytest.raises(ConfigError):
            rl.TrainConfig(**bad).validate()


def test_checkpoint_format_edges():
    from wiser.errors import ParseError
    tensors = {"scalar": np.array(2.5), "mat": np.arange(6.0).reshape(2, 3).T}
    back = checkpoint.loads(checkpoint.dumps(tensors))
    assert back["scalar"].shape == () and back["scalar"] == 2.5
    np.testing.assert_array_equal(back["mat"], tensors["mat"])
    buf = checkpoint.dumps(tensors)
    with pytest.raises(ParseError):
        checkpoint.loads(b"XXXX" + buf[4:])
    with pytest.raises(ParseError):
        checkpoint.loads(buf[:-3])


def domain_probe_accuracy(model, x_cell, x_patient, seed):
    """Held-out accuracy of a fresh logistic probe predicting the domain from Z."""
    from wiser.nn import BinaryClassifier
    z = np.vstack([rl.encode_dataset(model, x_cell).Z, rl.encode_dataset(model, x_patient).Z])
    y = np.r_[np.zeros(len(x_cell), dtype=int), np.ones(len(x_patient), dtype=int)]
    perm = np.random.default_rng(seed).permutation(len(y))
    tr, te = perm[: len(y) // 2], perm[len(y) // 2:]
    mu, sd = z[tr].mean(axis=0), z[tr].std(axis=0) + 1e-12
    probe = BinaryClassifier(z.shape[1], hidden=(), seed=seed)
    probe.fit((z[tr] - mu) / sd, y[tr], epochs=200, lr=1e-2)
    return float(np.mean((probe.predict_proba((z[te] - mu) / sd) > 0.5) == y[te]))


@pytest.mark.slow
def test_adversarial_phase_confuses_domain_probe():
    """Probe accuracy moves toward 0.5 by >= 0.05 on average over 5 seeds."""
    from wiser.data import SynthConfig, synth_generate
    gains = []
    for seed in range(5):
        ds = synth_generate(SynthConfig(n_cell=300, n_patient=300, domain_shift_scale=1.0, seed=seed))
        cfg = rl.TrainConfig(pretrain_epochs=10, adv_epochs=100, seed=seed)
        model = rl.WiserModel(ds.cell.n_genes, 4, cfg, seed=seed)
        data = rl.TrainData(ds.cell.values, ds.cell_response.labels, ds.patient.values)
        rng = np.random.default_rng(seed)
        rl.pretrain(model, data, cfg, rng)
        before = domain_probe_accuracy(model, data.x_cell, data.x_patient, seed)
        rl.adversarial_train(model, data, cfg, rng)
        after = domain_probe_accuracy(model, data.x_cell, data.x_patient, seed)
        gains.append(abs(before - 0.5) - abs(after - 0.5))
    assert np.mean(gains) >= 0.05, f"mean gain {np.mean(gains):.3f} per seed {np.round(gains, 3)}"
