import numpy as np
import pytest

from meshbench import adcore as ad
from meshbench.adcore import Tensor
from meshbench.errors import ShapeError
from meshbench.models import EncoderHead, MGNMini, UNetMini, param_report
from meshbench.transforms import MeshGraph, knn_graph

from gradcheck import RTOL, check

SEEDS = range(10)
ENTRIES = 6


def randomize(model, rng, scale=0.5):
    """Break zero-initialised heads so every parameter carries gradient."""
    for p in model.parameters():
        p.data = scale * rng.standard_normal(p.shape)
        p.trainable = True


def small_graph(rng, n=12, k=3, feat=3):
    pts = rng.random((n, 2))
    return knn_graph(pts, rng.standard_normal((n, feat)), k)


def tiny_unet(seed):
    return UNetMini(2, 1, depth=1, base_channels=2, seed=seed)


def tiny_encoder(seed):
    return EncoderHead(1, 1, 16, embed_dim=8, n_blocks=2, n_heads=2, trainable_last=1,
                       decoder_channels=(4, 4, 2, 2), seed=seed)


def tiny_mgn(seed):
    return MGNMini(3, 2, latent=4, n_mp=2, seed=seed)


def model_case(name, seed):
    rng = np.random.default_rng(seed)
    if name == "unet":
        model = tiny_unet(seed)
        x = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
        mask = rng.random((2, 4, 4)) > 0.2
        forward = lambda: model(x, mask)
        inputs = [x]
    elif name == "encoder":
        model = tiny_encoder(seed)
        x = Tensor(rng.standard_normal((1, 1, 16, 16)), requires_grad=True)
        forward = lambda: model(x)
        inputs = [x]
    else:
        model = tiny_mgn(seed)
        g = small_graph(rng)
        forward = lambda: model(g)
        inputs = []
    randomize(model, rng)
    with ad.no_grad():
        w = rng.standard_normal(forward().shape)
    build = lambda: ad.sum_all(ad.mul(forward(), Tensor(w)))
    return model, inputs, build, rng


@pytest.mark.parametrize("name", ["unet", "encoder", "mgn"])
def test_full_model_gradients(name):
    worst = 0.0
    for seed in SEEDS:
        model, inputs, build, rng = model_case(name, seed)
        worst = max(worst, check(build, inputs + model.parameters(), max_entries=ENTRIES, rng=rng))
    assert worst <= RTOL


class TestUNet:
    def test_shapes_and_zero_head(self):
        m = UNetMini(1, 2, depth=2, base_channels=4)
        out = m(np.ones((3, 1, 8, 8)))
        assert out.shape == (3, 2, 8, 8)
        assert np.all(out.data == 0)

    def test_indivisible_size(self):
        with pytest.raises(ShapeError):
            UNetMini(1, 1, depth=3, base_channels=2)(np.ones((1, 1, 12, 12)))

    def test_mask_zero_fills_padding(self):
        rng = np.random.default_rng(0)
        m = UNetMini(1, 1, depth=1, base_channels=2)
        randomize(m, rng)
        x = rng.standard_normal((1, 1, 4, 4))
        mask = np.zeros((1, 4, 4), bool)
        mask[:, :2, :2] = True
        y = x.copy()
        y[:, :, ~mask[0]] = 99.0
        np.testing.assert_array_equal(m(x, mask).data, m(y, mask).data)


class TestEncoderHead:
    def test_precondition(self):
        with pytest.raises(ShapeError):
            EncoderHead(1, 1, 32, patch_size=8)
        with pytest.raises(ShapeError):
            EncoderHead(1, 1, 40)

    def test_frozen_layout(self):
        m = EncoderHead(1, 1, 32, n_blocks=4, trainable_last=2)
        assert not m.patch_embed.weight.trainable and not m.pos_embed.trainable
        for i, blk in enumerate(m.blocks):
            flags = {p.trainable for p in blk.parameters()}
            scales = {p.lr_scale for p in blk.parameters()}
            assert flags == {i >= 2}
            if i >= 2:
                assert scales == {0.01}
        assert all(p.trainable and p.lr_scale == 1.0 for p in m.decoder_parameters())
        assert m(np.zeros((1, 1, 32, 32))).shape == (1, 1, 32, 32)

    def test_one_step_changes_only_last_two_blocks(self):
        rng = np.random.default_rng(0)
        m = EncoderHead(1, 1, 16, embed_dim=16, n_blocks=4, n_heads=2, trainable_last=2)
        # a fresh head is zero and would block all upstream gradient
        m.head.weight.data = 0.1 * rng.standard_normal(m.head.weight.shape)
        before = {k: v.data.copy() for k, v in m.named_parameters()}
        opt = ad.Adam(m.trainable_parameters(), lr=1e-3)
        x = rng.standard_normal((2, 1, 16, 16))
        ad.mse_loss(m(x), rng.standard_normal((2, 1, 16, 16))).backward()
        opt.step()
        changed = {k for k, v in m.named_parameters() if not np.array_equal(v.data, before[k])}
        enc_changed = {k for k in changed if k.startswith(("blocks", "patch_embed", "pos_embed"))}
        expected = {k for k, _ in m.named_parameters() if k.startswith(("blocks.2.", "blocks.3."))}
        assert enc_changed == expected


class TestMGN:
    def test_output_shape_and_zero_decoder(self):
        rng = np.random.default_rng(0)
        m = MGNMini(3, 2, latent=8, n_mp=2)
        out = m(small_graph(rng))
        assert out.shape == (12, 2) and np.all(out.data == 0)

    def test_feature_mismatch(self):
        with pytest.raises(ShapeError):
            MGNMini(4, 1, latent=4, n_mp=1)(small_graph(np.random.default_rng(0)))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        m = MGNMini(3, 2, latent=8, n_mp=3)
        randomize(m, rng, 0.3)
        g = small_graph(rng, n=30, k=4)
        perm = rng.permutation(g.n_nodes)
        out = m(g).data
        out_perm = m(g.permuted(perm)).data
        np.testing.assert_array_equal(out_perm[perm], out)

    def test_receptive_field_grows_one_hop_per_step(self):
        n = 6
        pts = np.column_stack([np.arange(float(n)), np.zeros(n)])
        edges = np.array([(i, i + 1) for i in range(n - 1)] + [(i + 1, i) for i in range(n - 1)])
        d = pts[edges[:, 1]] - pts[edges[:, 0]]
        g = MeshGraph(pts, np.zeros((n, 3)), edges, np.column_stack([d, np.abs(d[:, 0])]))
        rng = np.random.default_rng(0)
        for n_mp in (1, 2, 3):
            m = MGNMini(3, 1, latent=4, n_mp=n_mp)
            randomize(m, rng)
            base = m(g).data.copy()
            feat = g.node_feat.copy()
            feat[0] = 1.0
            moved = np.flatnonzero(np.abs(m(g.with_features(feat)).data - base).max(1) > 0)
            assert moved.tolist() == list(range(n_mp + 1))


class TestModuleUtilities:
    def test_state_dict_round_trip(self, tmp_path):
        a, b = tiny_unet(0), tiny_unet(1)
        randomize(a, np.random.default_rng(2))
        ad.save_checkpoint(tmp_path / "m.ckpt", a.state_dict())
        b.load_state_dict(ad.load_checkpoint(tmp_path / "m.ckpt"))
        x = np.random.default_rng(3).standard_normal((1, 2, 4, 4))
        np.testing.assert_array_equal(a(x).data, b(x).data)
        with pytest.raises(ShapeError):
            b.load_state_dict({})

    def test_astype(self):
        m = tiny_mgn(0).astype(np.float32)
        assert m.dtype == np.float32
        out = m(small_graph(np.random.default_rng(0)))
        assert out.dtype == np.float32

    def test_param_report(self):
        row = param_report({"U-Net": tiny_unet(0), "Enc": tiny_encoder(0)})
        assert row.startswith("n_param | U-Net:")
        enc = tiny_encoder(0)
        assert enc.n_params(trainable_only=True) < enc.n_params()
