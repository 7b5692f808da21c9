import numpy as np
import pytest
import torch
from scipy.special import logsumexp
from scipy import stats
from sklearn.base import clone

from conceptbench.datasets import PairStream, apply_subset, build_schema, generate_dataset
from conceptbench.learners.gradcheck import check_gradients
from conceptbench.learners.networks import TrainConfig
from conceptbench.models.vae import (
    BetaVAE,
    VAENet,
    WeaklySupervisedVAE,
    pair_loss,
    train_vae,
    train_wvae,
    vae_loss,
)

SMALL = dict(latent_dim=4, channels=(8, 8), hidden=32, batch_size=32)


@pytest.fixture(scope="module")
def sprites():
    s = apply_subset(build_schema("dsprites"), {"rotation": [0], "pos_x": range(0, 32, 4), "pos_y": range(0, 32, 4)})
    return generate_dataset(s, 32, seed=0)


def _tiny_net(likelihood="bernoulli", latent=2, shape=(1, 4, 4)):
    torch.manual_seed(0)
    return VAENet(shape, latent, (), 16, likelihood).double()


class TestObjectives:
    def test_beta_zero_total_is_reconstruction(self, sprites):
        model = BetaVAE(beta=0.0, steps=1, **SMALL).fit(sprites.images[:64])
        recon, kl, total = model.elbo(sprites.images[:16])
        assert np.array_equal(recon, total) and np.all(kl >= 0)

    def test_pair_objective_with_empty_shared_set(self):
        net = _tiny_net()
        x1, x2 = torch.rand(5, 1, 4, 4, dtype=torch.float64), torch.rand(5, 1, 4, 4, dtype=torch.float64)
        n1, n2 = torch.randn(5, 2, dtype=torch.float64), torch.randn(5, 2, dtype=torch.float64)
        paired = pair_loss(net, x1, x2, 2.0, noise=(n1, n2), shared=torch.zeros(2, dtype=torch.bool))
        single = vae_loss(net, x1, 2.0, n1) + vae_loss(net, x2, 2.0, n2)
        assert abs(float((paired - single).detach())) < 1e-6

    @pytest.mark.parametrize("averaging", ["product_of_experts", "arithmetic"])
    @pytest.mark.parametrize("likelihood", ["bernoulli", "gaussian"])
    def test_full_pair_objective_gradient(self, averaging, likelihood):
        net = _tiny_net(likelihood)
        g = torch.Generator().manual_seed(1)
        x1 = torch.rand(3, 1, 4, 4, dtype=torch.float64, generator=g)
        x2 = x1.clone()
        x2[:, :, :2] = torch.rand(3, 1, 2, 4, dtype=torch.float64, generator=g)
        noise = (torch.randn(3, 2, dtype=torch.float64, generator=g), torch.randn(3, 2, dtype=torch.float64, generator=g))
        # the shared-set choice is piecewise constant; fix it at the base point
        _, _, _, _, mask = net.pair_terms(x1, x2, averaging, noise=noise)
        err = check_gradients(lambda: pair_loss(net, x1, x2, 1.5, averaging, noise=noise, shared=mask),
                              list(net.parameters()), max_entries=16)
        assert err < 1e-3

    def test_identical_pairs_share_every_dimension(self):
        net = _tiny_net()
        x = torch.rand(4, 1, 4, 4, dtype=torch.float64)
        r1, r2, k1, k2, mask = net.pair_terms(x, x, noise=(torch.zeros(4, 2), torch.zeros(4, 2)))
        assert mask.all() and torch.allclose(r1, r2) and torch.allclose(k1, k2)

    def test_elbo_bounds_importance_sampled_likelihood(self):
        # 2-pixel toy model: one latent draw per evaluation, many evaluations
        torch.manual_seed(3)
        net = VAENet((1, 1, 2), 1, (), 8, "bernoulli").double()
        x = torch.tensor([[[[1.0, 0.0]]]], dtype=torch.float64)
        with torch.no_grad():
            mu, lv = net.encode(x)
            eps = torch.randn(200_000, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
            z = mu + torch.exp(0.5 * lv) * eps
            ll = net.log_likelihood(x.expand(len(z), -1, -1, -1), net.decode_logits(z)).numpy()
            zq = z.numpy()[:, 0]
            sd = float(torch.exp(0.5 * lv))
            log_w = ll + stats.norm.logpdf(zq) - stats.norm.logpdf(zq, float(mu), sd)
            log_px = logsumexp(log_w) - np.log(len(log_w))
            elbo = float((ll - (0.5 * (mu**2 + lv.exp() - lv - 1)).sum().item()).mean())
        assert elbo <= log_px
        # the gap is exactly the KL from q to the true posterior, which is small but positive here
        assert log_px - elbo < 1.0


class TestBetaVAE:
    def test_training_halves_reconstruction_error(self, sprites):
        X = sprites.images
        model = BetaVAE(beta=1.0, steps=1, lr=0.0, optimizer="sgd", **SMALL).fit(X)
        before = np.abs(model.reconstruct(X) - X).mean()
        model = BetaVAE(beta=1.0, steps=600, lr=2e-3, **SMALL).fit(X)
        after = np.abs(model.reconstruct(X) - X).mean()
        assert after <= 0.5 * before

    def test_determinism(self, sprites):
        X = sprites.images[:128]
        a = BetaVAE(steps=15, seed=4, **SMALL).fit(X)
        b = BetaVAE(steps=15, seed=4, **SMALL).fit(X)
        assert np.allclose(a.losses_, b.losses_, rtol=1e-6)
        assert np.array_equal(a.transform(X), b.transform(X))

    def test_shapes_and_errors(self, sprites):
        model = BetaVAE(steps=2, **SMALL).fit(sprites.images[:64])
        post = model.encode(sprites.images[:5])
        assert post.mean.shape == (5, 4) and np.all(post.variance > 0)
        assert model.decode(np.zeros((3, 4))).shape == (3, 32, 32, 1)
        with pytest.raises(ValueError):
            model.decode(np.zeros((3, 5)))
        with pytest.raises(ValueError):
            model.transform(np.zeros((2, 16, 16, 1)))
        with pytest.raises(ValueError):
            BetaVAE(beta=-1.0, steps=1).fit(sprites.images[:8])
        assert clone(model).get_params()["latent_dim"] == 4

    def test_colour_images_use_gaussian_likelihood(self):
        X = np.random.default_rng(0).random((16, 16, 16, 3)).astype(np.float32)
        model = BetaVAE(steps=2, **SMALL).fit(X)
        assert model.likelihood_ == "gaussian" and model.decode(np.zeros((1, 4))).shape == (1, 16, 16, 3)

    def test_train_vae_series(self, sprites):
        calls = []

        def evaluate(model):
            calls.append(model.n_steps_ if hasattr(model, "n_steps_") else None)
            return {"shape": 0.5}

        model, series = train_vae(sprites.images[:64], 1.0, TrainConfig(steps=6, eval_every=3, batch_size=32),
                                  evaluate=evaluate, latent_dim=2, channels=(4, 4), hidden=8)
        assert series.index == [3, 6] and series.per_concept["shape"] == [0.5, 0.5]
        assert model.mode == "unsupervised"


class TestWeaklySupervisedVAE:
    def test_fits_pair_stream(self, sprites):
        stream = PairStream(sprites.schema, 32, k=1)
        model, series = train_wvae(stream, cfg=TrainConfig(steps=5, batch_size=8), latent_dim=3,
                                   channels=(4, 4), hidden=8)
        assert series is None and model.mode == "weak_paired" and model.n_steps_ == 5
        assert model.transform(sprites.images[:4]).shape == (4, 3)

    def test_fits_pair_array_deterministically(self, sprites):
        pairs = np.stack([sprites.images[:32], sprites.images[32:64]], axis=1)
        a = WeaklySupervisedVAE(steps=5, **SMALL).fit(pairs)
        b = WeaklySupervisedVAE(steps=5, **SMALL).fit(pairs)
        assert a.losses_ == b.losses_

    def test_rejects_bad_input(self, sprites):
        with pytest.raises(ValueError):
            WeaklySupervisedVAE(steps=1).fit(sprites.images[:8])
        with pytest.raises(ValueError):
            WeaklySupervisedVAE(steps=1, averaging="median").fit(np.zeros((4, 2, 32, 32, 1)))
