import numpy as np
import pytest
import torch

from anoclick.clicks import Click, encode_clicks
from anoclick.config import ModelConfig, tiny_model_config
from anoclick.model import AnomalyMaskNet, ZeroConv2d, normalize_image, predict_scores
from anoclick.training import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)


def tiny_cfg(**kw):
    return tiny_model_config(**kw)


def random_inputs(cfg, batch=1, seed=0, with_clicks=True):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(batch, 3, cfg.image_size, cfg.image_size, generator=g)
    img = (img - 0.5) / 0.5
    aux = torch.zeros(batch, 3, cfg.image_size, cfg.image_size)
    if with_clicks:
        aux[:, 0, 10:14, 10:14] = 1.0
    res = torch.rand(batch, cfg.residual_grid, cfg.residual_grid, cfg.residual_dim,
                     generator=g)
    tokens = torch.randn(5, cfg.linguistic_dim, generator=g)
    return img, aux, res, tokens


class TestZeroConv:
    def test_outputs_zero_at_init(self):
        zc = ZeroConv2d(8)
        x = torch.randn(2, 8, 4, 4)
        assert torch.equal(zc(x), torch.zeros(2, 8, 4, 4))


class TestForward:
    def test_output_contract(self):
        torch.manual_seed(0)
        cfg = tiny_cfg()
        model = AnomalyMaskNet(cfg).eval()
        img, aux, res, tokens = random_inputs(cfg, batch=2)
        with torch.no_grad():
            scores = model(img, aux, res, tokens=tokens)
        assert scores.shape == (2, cfg.image_size, cfg.image_size)
        assert scores.min() >= 0.0 and scores.max() <= 1.0

    def test_click_mode_zero_init_identity(self):
        torch.manual_seed(1)
        cfg = tiny_cfg()
        model = AnomalyMaskNet(cfg).eval()
        img, aux, res, tokens = random_inputs(cfg)
        with torch.no_grad():
            _, pyramid = model(img, aux, res, tokens=tokens, return_pyramid=True)
        for fused, image_side in zip(pyramid["fused"], pyramid["image"]):
            assert torch.equal(fused, image_side)

    def test_click_mode_residual_perturbation_invisible_at_init(self):
        torch.manual_seed(2)
        cfg = tiny_cfg()
        model = AnomalyMaskNet(cfg).eval()
        img, aux, res, tokens = random_inputs(cfg)
        with torch.no_grad():
            a, pa = model(img, aux, res, tokens=tokens, return_pyramid=True)
            b, pb = model(img, aux, res + 3.0, tokens=tokens, return_pyramid=True)
        for fa, fb in zip(pa["fused"], pb["fused"]):
            assert torch.equal(fa, fb)
        assert torch.equal(a, b)

    def test_seg_mode_zero_init_identity(self):
        torch.manual_seed(3)
        cfg = tiny_cfg(mode="seg")
        model = AnomalyMaskNet(cfg).eval()
        img, aux, res, tokens = random_inputs(cfg, with_clicks=False)
        with torch.no_grad():
            _, pyramid = model(img, aux, res, tokens=tokens, return_pyramid=True)
        for fused, res_side in zip(pyramid["fused"], pyramid["residual"]):
            assert torch.equal(fused, res_side)

    def test_seg_mode_drops_coarse_scales(self):
        cfg = tiny_cfg(mode="seg")
        assert cfg.active_scales == (1 / 8, 1 / 4)
        model = AnomalyMaskNet(cfg).eval()
        img, aux, res, tokens = random_inputs(cfg, with_clicks=False)
        with torch.no_grad():
            _, pyramid = model(img, aux, res, tokens=tokens, return_pyramid=True)
        assert len(pyramid["fused"]) == 2

    def test_seg_mode_rejects_clicks(self):
        cfg = tiny_cfg(mode="seg")
        model = AnomalyMaskNet(cfg).eval()
        img, aux, res, tokens = random_inputs(cfg, with_clicks=True)
        with pytest.raises(ValueError):
            model(img, aux, res, tokens=tokens)

    def test_flexible_resolution(self):
        torch.manual_seed(4)
        cfg = tiny_cfg()
        model = AnomalyMaskNet(cfg).eval()
        for size in (32, 64, 96):
            img = torch.randn(1, 3, size, size)
            aux = torch.zeros(1, 3, size, size)
            res = torch.rand(1, cfg.residual_grid, cfg.residual_grid, cfg.residual_dim)
            with torch.no_grad():
                scores = model(img, aux, res)
            assert scores.shape == (1, size, size)
        with pytest.raises(ValueError):
            model(torch.randn(1, 3, 40, 40), torch.zeros(1, 3, 40, 40), res)

    def test_deterministic_given_seed(self):
        outs = []
        for _ in range(2):
            torch.manual_seed(11)
            cfg = tiny_cfg()
            model = AnomalyMaskNet(cfg).eval()
            img, aux, res, tokens = random_inputs(cfg, seed=11)
            with torch.no_grad():
                outs.append(model(img, aux, res, tokens=tokens))
        assert torch.equal(outs[0], outs[1])

    def test_language_optional(self):
        cfg = tiny_cfg(use_language=False)
        model = AnomalyMaskNet(cfg).eval()
        assert model.fusion is None
        img, aux, res, _ = random_inputs(cfg)
        with torch.no_grad():
            scores = model(img, aux, res)
        assert scores.shape == (1, cfg.image_size, cfg.image_size)

    def test_wrong_residual_grid_rejected(self):
        cfg = tiny_cfg()
        model = AnomalyMaskNet(cfg).eval()
        img, aux, _, _ = random_inputs(cfg)
        bad = torch.rand(1, cfg.residual_grid + 4, cfg.residual_grid + 4,
                         cfg.residual_dim)
        with pytest.raises(ValueError):
            model(img, aux, bad)


class TestGradientFlow:
    def test_all_submodules_receive_gradient_after_one_step(self):
        torch.manual_seed(5)
        cfg = tiny_cfg()
        model = AnomalyMaskNet(cfg).train()
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        img, aux, res, _ = random_inputs(cfg, batch=2)
        emb = torch.randn(6, cfg.text_dim)
        gt = torch.zeros(2, cfg.image_size, cfg.image_size)
        gt[:, 20:40, 20:40] = 1.0

        def step():
            tokens = model.linguistic_encoder(emb)
            pred = model(img, aux, res, tokens=tokens)
            loss = torch.nn.functional.binary_cross_entropy(pred, gt)
            opt.zero_grad()
            loss.backward()
            return loss

        step()
        opt.step()
        step()  # second backward: the zero convs have moved off zero
        for name, module in model.trainable_submodules().items():
            has_grad = any(
                p.grad is not None and bool((p.grad != 0).any())
                for p in module.parameters()
            )
            assert has_grad, f"no gradient reached {name}"


class TestCheckpoint:
    def test_round_trip_bit_identical_forward(self, tmp_path):
        torch.manual_seed(6)
        cfg = tiny_cfg()
        model = AnomalyMaskNet(cfg).eval()
        img, aux, res, tokens = random_inputs(cfg, seed=6)
        with torch.no_grad():
            before = model(img, aux, res, tokens=tokens)
        path = save_checkpoint(tmp_path / "m.pt", model, step=7)
        loaded, step, _ = load_checkpoint(path)
        assert step == 7
        with torch.no_grad():
            after = loaded(img, aux, res, tokens=tokens)
        assert torch.equal(before, after)

    def test_structural_mismatch_rejected(self, tmp_path):
        model = AnomalyMaskNet(tiny_cfg())
        path = save_checkpoint(tmp_path / "m.pt", model, step=0)
        other = tiny_cfg(image_dim=128)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected_config=other)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.pt")


class TestPredictScores:
    def test_numpy_boundary(self):
        torch.manual_seed(7)
        cfg = tiny_cfg()
        model = AnomalyMaskNet(cfg).eval()
        rng = np.random.default_rng(7)
        image = rng.random((cfg.image_size, cfg.image_size, 3)).astype(np.float32)
        enc = encode_clicks([Click(8, 8, True)], None,
                            (cfg.image_size, cfg.image_size), cfg.click_radius)
        res = rng.random((cfg.residual_grid, cfg.residual_grid,
                          cfg.residual_dim)).astype(np.float32)
        scores = predict_scores(model, image, enc, res)
        assert scores.shape == (cfg.image_size, cfg.image_size)
        assert scores.dtype == np.float32
        assert 0.0 <= scores.min() and scores.max() <= 1.0

    def test_normalize_image(self):
        img = np.zeros((4, 4, 3), dtype=np.float32)
        out = normalize_image(img)
        assert out.shape == (3, 4, 4)
        assert np.allclose(out, -1.0)
