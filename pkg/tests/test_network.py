import numpy as np
import pytest
import torch

from crossreid.network import (
    BackboneConfig,
    BundleConfig,
    Decoder,
    NetworkBundle,
    ShapeError,
    build_bundle,
    images_to_tensor,
    joint_embed,
    tensor_to_images,
)

TOY = BundleConfig(num_classes=20)
SMALL = BundleConfig(
    backbone=BackboneConfig(channels=(4, 8, 8, 8, 8), height=32, width=32),
    num_classes=5,
)


@pytest.fixture(scope="module")
def toy_bundle():
    return build_bundle(TOY, seed=0)


@pytest.fixture(scope="module")
def small_bundle():
    return build_bundle(SMALL, seed=1)


def rand_images(b, h, w, seed=0):
    rng = np.random.default_rng(seed)
    return images_to_tensor(rng.uniform(size=(b, h, w, 3)).astype(np.float32))


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

class TestEncode:
    def test_toy_shape_contract(self, toy_bundle):
        x = rand_images(8, 64, 32)
        pyr = toy_bundle.encode(x)
        shapes = [tuple(m.shape) for m in pyr.maps]
        assert shapes == [
            (8, 16, 32, 16), (8, 32, 16, 8), (8, 64, 8, 4), (8, 128, 4, 2), (8, 256, 4, 2),
        ]

    def test_deterministic_in_eval_mode(self, toy_bundle):
        toy_bundle.eval()
        x = rand_images(2, 64, 32, seed=3)
        with torch.no_grad():
            a = toy_bundle.encode(x)
            b = toy_bundle.encode(x.clone())
        for ma, mb in zip(a.maps, b.maps):
            assert torch.equal(ma, mb)

    def test_pixel_perturbation_reaches_first_tap(self, small_bundle):
        small_bundle.eval()
        x = rand_images(1, 32, 32, seed=4)
        x2 = x.clone()
        x2[0, 0, 16, 16] += 1e-3
        with torch.no_grad():
            f1 = small_bundle.encode(x).level(1)
            f1p = small_bundle.encode(x2).level(1)
        assert (f1 - f1p).abs().max() > 0

    def test_bad_input_shape_rejected(self, small_bundle):
        with pytest.raises(ShapeError):
            small_bundle.encode(torch.zeros(2, 1, 32, 32))

    def test_backbone_config_validation(self):
        with pytest.raises(ShapeError):
            BackboneConfig(channels=(4, 8, 8))
        with pytest.raises(ShapeError):
            BackboneConfig(strides=(2, 2, 2, 2, 0))


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------

class TestDecode:
    def test_output_matches_input_shape(self, toy_bundle):
        for b, h, w in [(2, 64, 32), (1, 32, 16), (3, 96, 48)]:
            x = rand_images(b, h, w)
            out = toy_bundle.decode(toy_bundle.encode(x))
            assert tuple(out.shape) == (b, 3, h, w)

    def test_outputs_bounded_for_random_parameters(self):
        for seed in range(3):
            bundle = build_bundle(SMALL, seed=seed)
            out = bundle.decode(bundle.encode(rand_images(2, 32, 32, seed=seed)))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_zero_initialized_head_outputs_half(self):
        bundle = build_bundle(SMALL, seed=7)
        with torch.no_grad():
            bundle.G.head.weight.zero_()
            bundle.G.head.bias.zero_()
        out = bundle.decode(bundle.encode(rand_images(2, 32, 32, seed=9)))
        # with a zeroed head, sigmoid(0) = 0.5 exactly everywhere
        assert torch.equal(out, torch.full_like(out, 0.5))

    def test_uses_deepest_trunk_and_two_skips(self):
        dec = Decoder(TOY.backbone)
        assert len(dec.skip_levels) >= 2
        assert set(dec.fuse_taps) >= set(dec.skip_levels)

    def test_rejects_bad_skip_config(self):
        with pytest.raises(ShapeError):
            Decoder(TOY.backbone, skip_levels=(5, 2))
        with pytest.raises(ShapeError):
            Decoder(TOY.backbone, skip_levels=(2,))


# ---------------------------------------------------------------------------
# HR encoder
# ---------------------------------------------------------------------------

class TestHrEncode:
    def test_g_matches_f_geometry(self, toy_bundle):
        x = rand_images(4, 64, 32)
        f = toy_bundle.encode(x).deepest
        g = toy_bundle.hr_encode(x)
        assert f.shape == g.shape

    def test_independent_parameters(self, toy_bundle):
        x = rand_images(2, 64, 32, seed=5)
        toy_bundle.eval()
        with torch.no_grad():
            f = toy_bundle.encode(x).deepest
            g = toy_bundle.hr_encode(x)
        assert not torch.allclose(f, g)
        e_params = {id(p) for p in toy_bundle.E.parameters()}
        f_params = {id(p) for p in toy_bundle.F.parameters()}
        assert not (e_params & f_params)

    def test_finite_at_boundaries(self, small_bundle):
        x = images_to_tensor(np.concatenate([
            np.zeros((1, 32, 32, 3), dtype=np.float32),
            np.ones((1, 32, 32, 3), dtype=np.float32),
        ]))
        g = small_bundle.hr_encode(x)
        assert torch.isfinite(g).all()


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

class TestClassify:
    def test_softmax_rows_normalized(self, toy_bundle):
        v = torch.randn(8, 512, 4, 2)
        logits = toy_bundle.classify(v)
        assert tuple(logits.shape) == (8, 20)
        probs = torch.softmax(logits, dim=1)
        assert torch.allclose(probs.sum(dim=1), torch.ones(8), atol=1e-6)

    def test_spatial_permutation_invariance(self, toy_bundle):
        v = torch.randn(2, 512, 4, 2)
        perm = torch.randperm(8)
        v_perm = v.reshape(2, 512, 8)[:, :, perm].reshape(2, 512, 4, 2)
        a = toy_bundle.classify(v)
        b = toy_bundle.classify(v_perm)
        assert torch.allclose(a, b, atol=1e-5)

    def test_channel_mismatch_rejected(self, toy_bundle):
        with pytest.raises(ShapeError):
            toy_bundle.classify(torch.randn(2, 256, 4, 2))

    def test_f_only_contract_fixed_at_construction(self):
        cfg = BundleConfig(num_classes=4, embed="f_only")
        bundle = build_bundle(cfg, seed=0)
        assert bundle.C.in_ch == cfg.backbone.embed_channels
        with pytest.raises(ShapeError):
            bundle.classify(torch.randn(2, 512, 4, 2))


# ---------------------------------------------------------------------------
# Discriminators
# ---------------------------------------------------------------------------

class TestDiscriminators:
    def test_feature_outputs_in_open_interval(self, toy_bundle):
        f1 = torch.randn(6, 16, 32, 16)
        probs = toy_bundle.discriminate_feature(1, f1)
        assert tuple(probs.shape) == (6,)
        assert (probs > 0).all() and (probs < 1).all()

    def test_identical_inputs_identical_outputs(self, toy_bundle):
        f2 = torch.randn(3, 32, 16, 8)
        a = toy_bundle.discriminate_feature(2, f2)
        b = toy_bundle.discriminate_feature(2, f2.clone())
        assert torch.equal(a, b)

    def test_level_outside_alignment_set_rejected(self, toy_bundle):
        with pytest.raises(ShapeError):
            toy_bundle.discriminate_feature(4, torch.randn(2, 128, 4, 2))

    def test_image_outputs_and_batch_equivariance(self, toy_bundle):
        x = rand_images(5, 64, 32, seed=8)
        probs = toy_bundle.discriminate_image(x)
        assert tuple(probs.shape) == (5,)
        assert (probs > 0).all() and (probs < 1).all()
        perm = torch.tensor([3, 1, 4, 0, 2])
        probs_perm = toy_bundle.discriminate_image(x[perm])
        assert torch.allclose(probs[perm], probs_perm, atol=1e-6)

    @pytest.mark.parametrize("which", ["feature", "image"])
    def test_capacity_on_separable_blobs(self, which):
        # train the discriminator alone on two Gaussian blobs; it must reach
        # >0.9 accuracy, proving the head has usable capacity
        torch.manual_seed(0)
        bundle = build_bundle(SMALL, seed=3)
        if which == "feature":
            shape = (4, 16, 16)
            fwd = lambda t: bundle.discriminate_feature(1, t)
            params = bundle.D_F["1"].parameters()
        else:
            shape = (3, 32, 32)
            fwd = lambda t: bundle.discriminate_image(t)
            params = bundle.D_I.parameters()
        opt = torch.optim.SGD(params, lr=0.5, momentum=0.9)
        real = torch.randn(32, *shape) * 0.1 + 0.8
        fake = torch.randn(32, *shape) * 0.1 - 0.8
        for _ in range(120):
            opt.zero_grad()
            loss = -(torch.log(fwd(real).clamp_min(1e-7)).mean()
                     + torch.log((1 - fwd(fake)).clamp_min(1e-7)).mean())
            loss.backward()
            opt.step()
        with torch.no_grad():
            acc = ((fwd(real) > 0.5).float().mean() + (fwd(fake) < 0.5).float().mean()) / 2
        assert float(acc) > 0.9


# ---------------------------------------------------------------------------
# Joint embedding
# ---------------------------------------------------------------------------

class TestJointEmbed:
    def test_constant_maps_pool_to_constant(self):
        f = torch.full((2, 4, 3, 3), 0.7)
        g = torch.full((2, 4, 3, 3), 0.7)
        emb = joint_embed(f, g)
        assert tuple(emb.v.shape) == (2, 8, 3, 3)
        assert torch.allclose(emb.u, torch.full((2, 8), 0.7))

    def test_channel_order_f_then_g(self):
        f = torch.zeros(1, 2, 2, 2)
        g = torch.ones(1, 2, 2, 2)
        emb = joint_embed(f, g)
        assert torch.equal(emb.v[:, :2], f)
        assert torch.equal(emb.v[:, 2:], g)

    def test_toy_dimension_is_512(self, toy_bundle):
        x = rand_images(2, 64, 32)
        emb = toy_bundle.embed_images(x)
        assert tuple(emb.u.shape) == (2, 512)
        assert torch.isfinite(emb.u).all()

    def test_f_only_equals_mean_of_f(self):
        f = torch.randn(3, 6, 4, 4)
        g = torch.randn(3, 6, 4, 4)
        emb = joint_embed(f, g, mode="f_only")
        assert tuple(emb.u.shape) == (3, 6)
        assert torch.allclose(emb.u, f.mean(dim=(2, 3)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            joint_embed(torch.randn(1, 2, 3, 3), torch.randn(1, 3, 3, 3))


# ---------------------------------------------------------------------------
# Bundle-level invariants
# ---------------------------------------------------------------------------

class TestBundle:
    def test_parameter_namespace_is_flat_and_prefixed(self, small_bundle):
        names = [n for n, _ in small_bundle.named_parameters()]
        assert len(names) == len(set(names))
        prefixes = {n.split(".")[0] for n in names}
        assert prefixes == {"E", "G", "F", "C", "D_F", "D_I"}

    def test_build_deterministic(self):
        a = build_bundle(SMALL, seed=11)
        b = build_bundle(SMALL, seed=11)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_updating_e_never_changes_f(self, small_bundle):
        x = rand_images(2, 32, 32, seed=12)
        f_before = [p.clone() for p in small_bundle.F.parameters()]
        loss = small_bundle.encode(x).deepest.mean()
        loss.backward()
        opt = torch.optim.SGD(small_bundle.E.parameters(), lr=0.1)
        opt.step()
        for before, after in zip(f_before, small_bundle.F.parameters()):
            assert torch.equal(before, after)
        opt.zero_grad()

    def test_align_set_sizes_discriminators(self):
        cfg = BundleConfig(num_classes=3, align_levels=(1, 2, 3, 4, 5))
        bundle = build_bundle(cfg, seed=0)
        assert set(bundle.D_F.keys()) == {"1", "2", "3", "4", "5"}

    def test_images_tensor_roundtrip(self):
        rng = np.random.default_rng(13)
        arr = rng.uniform(size=(3, 16, 8, 3)).astype(np.float32)
        back = tensor_to_images(images_to_tensor(arr))
        assert np.allclose(arr, back)
