import math

import numpy as np
import pytest
import torch

from fdcheck import analytic_grad, numeric_grad, relative_error
from maskcond.conditions import MASKED, CategoricalFeature, ConditionSchema, ConditionVector, NumericalFeature
from maskcond.data import SynthSpec, split, synth_generate
from maskcond.errors import DivergenceDetected, NonFiniteInput, SchemaMismatch
from maskcond.harness.experiments import per_seed_mse
from maskcond.mcvae import McVae, VaeConfig, elbo_loss, generate, reparameterize, train_vae
from maskcond.schedules import SparsitySchedule


def tiny_schema(d_cat=2, d_num=1):
    return ConditionSchema(
        (CategoricalFeature("a", ("x", "y", "z")),), (NumericalFeature("u", 0.0, 1.0),), d_cat=d_cat, d_num=d_num
    )


def tiny_model(dtype=torch.float64, seed=0, **kw):
    cfg = VaeConfig(num_keypoints=3, d_z=2, keypoint_embedding_dim=5, encoder_hidden=(4,), decoder_hidden=(6,), **kw)
    return McVae(cfg, tiny_schema(), torch.Generator().manual_seed(seed)).to(dtype)


# --- encoder ----------------------------------------------------------------


def test_zero_final_layer_gives_zero_posterior():
    m = tiny_model()
    with torch.no_grad():
        m.encoder[-1].weight.zero_()
        m.encoder[-1].bias.zero_()
    mu, logvar = m.encode(torch.randn(4, 6, dtype=torch.float64))
    assert torch.equal(mu, torch.zeros(4, 2, dtype=torch.float64))
    assert torch.equal(logvar, torch.zeros(4, 2, dtype=torch.float64))


def test_encoder_is_condition_blind():
    m = tiny_model()
    assert m.encoder[0].in_features == 6
    x = torch.randn(3, 6, dtype=torch.float64)
    before = m.encode(x)
    with torch.no_grad():
        for p in m.embedder.parameters():
            p.add_(1.0)
    after = m.encode(x)
    assert torch.equal(before[0], after[0]) and torch.equal(before[1], after[1])


def test_encoder_rejects_nonfinite():
    with pytest.raises(NonFiniteInput):
        tiny_model().encode(torch.tensor([[float("nan")] * 6], dtype=torch.float64))


def test_encoder_jacobian_fd():
    m = tiny_model(seed=3)
    x0 = torch.randn(6, dtype=torch.float64)
    jac = torch.autograd.functional.jacobian(lambda x: m.encode(x)[0], x0).numpy()
    h = 1e-6
    fd = np.empty_like(jac)
    for i in range(6):
        e = torch.zeros(6, dtype=torch.float64)
        e[i] = h
        fd[:, i] = ((m.encode(x0 + e)[0] - m.encode(x0 - e)[0]) / (2 * h)).detach().numpy()
    assert relative_error(jac, fd) < 1e-4


# --- reparameterization and loss ----------------------------------------------


def test_reparameterize_cases():
    mu = torch.tensor([0.3, -1.0])
    assert torch.equal(reparameterize(mu, torch.tensor([0.7, 2.0]), eps=torch.zeros(2)), mu)
    e = torch.tensor([0.5, 0.25])
    assert torch.equal(reparameterize(mu, torch.zeros(2), eps=e), mu + e)


def test_reparameterize_monte_carlo():
    mu = torch.tensor([1.0, -2.0], dtype=torch.float64)
    logvar = torch.tensor([0.0, math.log(4.0)], dtype=torch.float64)
    z = reparameterize(mu.expand(100_000, 2), logvar.expand(100_000, 2), torch.Generator().manual_seed(0))
    std = torch.exp(0.5 * logvar)
    assert torch.all((z.mean(0) - mu).abs() < 4 * std / math.sqrt(1e5))
    assert torch.allclose(z.std(0), std, rtol=0.01)


def test_elbo_examples():
    x = torch.randn(4, 6)
    recon, kl, total = elbo_loss(x, x, torch.zeros(4, 2), torch.zeros(4, 2), beta=1.0)
    assert recon.item() == 0.0 and kl.item() == 0.0 and total.item() == 0.0
    _, kl, _ = elbo_loss(x[:1], x[:1], torch.tensor([[1.0]]), torch.tensor([[0.0]]), beta=1.0)
    assert kl.item() == 0.5


def test_elbo_matches_brute_force():
    rng = np.random.default_rng(0)
    x, xh = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    mu, lv = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    recon, kl, total = elbo_loss(*map(torch.from_numpy, (x, xh, mu, lv)), beta=0.3)
    exp_recon = sum((a - b) ** 2 for ra, rb in zip(x, xh) for a, b in zip(ra, rb)) / 30
    exp_kl = sum(0.5 * (m * m + math.exp(v) - 1 - v) for rm, rv in zip(mu, lv) for m, v in zip(rm, rv)) / 5
    assert recon.item() == pytest.approx(exp_recon, rel=1e-12)
    assert kl.item() == pytest.approx(exp_kl, rel=1e-12)
    assert total.item() == pytest.approx(exp_recon + 0.3 * exp_kl, rel=1e-12)


def test_kl_purity():
    m = tiny_model()
    x = torch.randn(4, 6, dtype=torch.float64)
    eps = torch.randn(4, 2, dtype=torch.float64)
    cat, num = np.array([[0], [1], [-1], [2]]), np.array([[0.1], [np.nan], [0.5], [1.0]])
    _, kl_a, _ = m.loss(x, cat, num, eps)
    with torch.no_grad():
        for p in m.embedder.parameters():
            p.mul_(-3.0).add_(0.7)
    recon_b, kl_b, _ = m.loss(x, cat, num, eps)
    assert kl_a.item() == kl_b.item()


# --- decoder ----------------------------------------------------------------


def test_decoder_width():
    schema = ConditionSchema((), (NumericalFeature("u", 0, 1),), d_num=3)
    m = McVae(VaeConfig(num_keypoints=2, d_z=2), schema)
    assert m.decoder[0].in_features == 5


def test_decoder_depends_on_conditions():
    m = tiny_model()
    z = torch.randn(2, dtype=torch.float64)
    a = m.decode_one(z, ConditionVector((MASKED,), (MASKED,)))
    b = m.decode_one(z, ConditionVector((1,), (0.4,)))
    assert not torch.equal(a, b)
    assert torch.equal(a, m.decode(z[None], np.array([[-1]]), np.array([[np.nan]]))[0])


def test_decode_schema_mismatch():
    m = tiny_model()
    with pytest.raises(SchemaMismatch):
        m.decode_one(torch.zeros(2, dtype=torch.float64), ConditionVector((0, 0), (0.1,)))


def test_mask_row_gradient_only_when_masked():
    m = tiny_model(seed=1)
    x = torch.randn(1, 6, dtype=torch.float64)
    eps = torch.randn(1, 2, dtype=torch.float64)
    table = m.embedder.cat_tables[0]
    for entry, expect in ((-1, True), (1, False)):
        fn = lambda: m.loss(x, np.array([[entry]]), np.array([[0.5]]), eps)[2]
        g = numeric_grad(fn, table).reshape(table.shape)
        assert (np.abs(g[3]).max() > 1e-8) == expect


GROUPS = {
    "encoder": lambda m: list(m.encoder.parameters()),
    "decoder": lambda m: list(m.decoder.parameters()),
    "cat_tables": lambda m: list(m.embedder.cat_tables),
    "num_projections": lambda m: [m.embedder.num_weight, m.embedder.num_bias],
}


@pytest.mark.parametrize("group", GROUPS)
def test_gradients_match_finite_differences(group):
    torch.manual_seed(0)
    m = tiny_model(seed=7, beta=0.7)
    x = torch.randn(5, 6, dtype=torch.float64)
    eps = torch.randn(5, 2, dtype=torch.float64)
    cat = np.array([[0], [1], [2], [-1], [1]])
    num = np.array([[0.2], [np.nan], [0.9], [0.0], [np.nan]])
    fn = lambda: m.loss(x, cat, num, eps)[2]
    for p in GROUPS[group](m):
        assert relative_error(analytic_grad(fn, p), numeric_grad(fn, p)) < 1e-4


# --- training ---------------------------------------------------------------


def small_data(n=60, seed=0):
    return synth_generate(SynthSpec(num_keypoints=3, d_cat=2, d_num=2), n, seed)


def test_one_epoch_single_update():
    ds = small_data(40)
    cfg = VaeConfig(num_keypoints=3, batch_size=64, epochs=1)
    rep = train_vae(McVae(cfg, ds.schema), ds, cfg, SparsitySchedule.constant(0.3), np.random.default_rng(0))
    assert len(rep.rows) == 1 and rep.rows[0][:3] == (0, 0, 0.3)


def test_update_count_and_trace():
    ds = small_data(50)
    cfg = VaeConfig(num_keypoints=3, batch_size=16, epochs=3)
    rep = train_vae(McVae(cfg, ds.schema), ds, cfg, SparsitySchedule.constant(0.0), np.random.default_rng(0))
    assert len(rep.rows) == 3 * 4
    assert np.all(rep.p_trace == 0.0)
    assert rep.column("step").tolist() == list(range(12))
    assert len(rep.per_epoch()) == 3


def test_linear_trace_endpoints():
    ds = small_data(50)
    cfg = VaeConfig(num_keypoints=3, batch_size=10, epochs=2)
    rep = train_vae(McVae(cfg, ds.schema), ds, cfg, SparsitySchedule.linear(0.1, 0.25), np.random.default_rng(0))
    tr = rep.p_trace
    assert tr[0] == 0.1 and tr[-1] == pytest.approx(0.25, abs=1e-15)
    assert np.all(np.diff(tr) > 0)


def test_training_deterministic_and_finite():
    ds = small_data()
    cfg = VaeConfig(num_keypoints=3, batch_size=16, epochs=4)
    outs = []
    for _ in range(2):
        m = McVae(cfg, ds.schema, torch.Generator().manual_seed(1))
        rep = train_vae(m, ds, cfg, SparsitySchedule.constant(0.5), np.random.default_rng(2))
        outs.append((rep.rows, [p.detach().clone() for p in m.parameters()]))
    assert outs[0][0] == outs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(outs[0][1], outs[1][1]))
    assert all(torch.isfinite(p).all() for p in outs[0][1])


def test_divergence_detected():
    ds = small_data()
    cfg = VaeConfig(num_keypoints=3, batch_size=8, epochs=2)
    m = McVae(cfg, ds.schema)

    def poison(step, row):
        if step == 2:
            with torch.no_grad():
                m.decoder[-1].bias.fill_(float("inf"))

    with pytest.raises(DivergenceDetected) as info:
        train_vae(m, ds, cfg, SparsitySchedule.constant(0.0), np.random.default_rng(0), on_step=poison)
    assert info.value.step == 3


def test_training_schema_mismatch():
    ds = small_data()
    cfg = VaeConfig(num_keypoints=3, epochs=1)
    with pytest.raises(SchemaMismatch):
        train_vae(McVae(cfg, tiny_schema()), ds, cfg, SparsitySchedule.constant(0.0), np.random.default_rng(0))


def test_report_csv(tmp_path):
    ds = small_data(20)
    cfg = VaeConfig(num_keypoints=3, batch_size=8, epochs=1)
    rep = train_vae(McVae(cfg, ds.schema), ds, cfg, SparsitySchedule.constant(0.2), np.random.default_rng(0))
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,p_t,recon,kl,total" and len(lines) == 4


# --- generation on a trained model --------------------------------------------


@pytest.fixture(scope="module")
def trained():
    ds = synth_generate(SynthSpec(), 2500, 0)
    train, test = split(ds, 0.2, 0)
    cfg = VaeConfig()
    m = McVae(cfg, train.schema, torch.Generator().manual_seed(1))
    rep = train_vae(m, train, cfg, SparsitySchedule.constant(0.7), np.random.default_rng(1))
    return m, train, test, rep


def test_prior_determinism(trained):
    m, _, test, _ = trained
    cv = ConditionVector((1, 2), (0.5,))
    a = generate(m, [cv] * 4, np.random.default_rng(3))
    b = generate(m, [cv] * 4, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_posterior_reconstruction(trained):
    m, train, test, rep = trained
    mse = per_seed_mse(m, test, 0.0, 0, "posterior")
    # the training recon loss is in standardized units and includes masked batches
    assert mse / np.mean(train.std**2) < rep.per_epoch()[-1]["recon"]
    assert mse < 0.05 * per_seed_mse(m, test, 1.0, 0, "posterior")


def test_prior_all_masked_matches_marginal(trained):
    m, train, _, _ = trained
    out = generate(m, [ConditionVector((MASKED, MASKED), (MASKED,))] * 1000, np.random.default_rng(0))
    data_std = train.keypoints.std(axis=0)
    assert np.all(np.abs(out.mean(axis=0) - train.keypoints.mean(axis=0)) < 0.05 * data_std)


def test_sparsity_trend(trained):
    m, _, test, _ = trained
    for seed in range(3):
        assert per_seed_mse(m, test, 0.9, seed) >= per_seed_mse(m, test, 0.0, seed)
