"""Backbone contracts: patch arithmetic, positional handling, encoder properties.

The permutation-equivariance checks run the forward graph twice (once with
permuted prompt rows) in double precision so reduction-order noise cannot
mask a real positional leak.
"""

import numpy as np
import pytest

from ivit import tensor as T
from ivit.backbone import Backbone, BackboneConfig, TokenSequence, broadcast_cls
from ivit.errors import ShapeError
from ivit.gradcheck import check_gradients
from ivit.tensor import Tensor


def make_backbone(dim=16, depth=1, heads=2, image_size=8, patch_size=4, dtype=np.float64, seed=0):
    cfg = BackboneConfig(image_size=image_size, patch_size=patch_size, channels=3,
                         dim=dim, depth=depth, heads=heads, mlp_ratio=2.0)
    return Backbone(cfg, np.random.default_rng(seed), dtype=dtype)


class TestConfig:
    def test_indivisible_image_size_rejected(self):
        with pytest.raises(ShapeError, match="divisible"):
            BackboneConfig(image_size=30, patch_size=8, channels=3, dim=16, depth=1, heads=2)

    def test_dim_must_divide_by_heads(self):
        with pytest.raises(ShapeError, match="heads"):
            BackboneConfig(image_size=32, patch_size=8, channels=3, dim=30, depth=1, heads=4)

    def test_patch_counts(self):
        assert BackboneConfig(32, 8, 3, 16, 1, 2).n_patches == 16
        # the standard full-scale point: 224px, patch 16, 196 tokens
        assert BackboneConfig(224, 16, 3, 768, 12, 12).n_patches == 196


class TestPatchEmbed:
    def test_output_shape(self):
        bb = make_backbone(image_size=32, patch_size=8)
        out = bb.patch_embed(Tensor(np.zeros((2, 3, 32, 32)), dtype=np.float64))
        assert out.shape == (2, 16, 16)

    def test_zero_image_embeds_to_bias(self):
        bb = make_backbone()
        out = bb.patch_embed(Tensor(np.zeros((1, 3, 8, 8)), dtype=np.float64))
        np.testing.assert_allclose(out.data, np.broadcast_to(bb.patch_proj.bias.data, out.shape))

    def test_wrong_size_rejected(self):
        bb = make_backbone()
        with pytest.raises(ShapeError):
            bb.patch_embed(Tensor(np.zeros((1, 3, 12, 12))))

    def test_patch_pixels_route_to_their_patch(self):
        # lighting up one pixel may only change the patch that contains it
        bb = make_backbone(image_size=8, patch_size=4)
        base = np.zeros((1, 3, 8, 8))
        lit = base.copy()
        lit[0, 1, 6, 1] = 1.0  # row 6, col 1 -> patch row 1, col 0 -> patch index 2
        delta = bb.patch_embed(Tensor(lit, dtype=np.float64)).data - bb.patch_embed(
            Tensor(base, dtype=np.float64)).data
        changed = np.flatnonzero(np.abs(delta).sum(axis=2)[0])
        assert list(changed) == [2]


class TestPositional:
    def test_zero_table_is_identity(self):
        bb = make_backbone()
        bb.pos_embed.data[...] = 0.0
        patches = Tensor(np.random.default_rng(0).normal(size=(2, 4, 16)))
        cls = broadcast_cls(bb.cls_token, 2)
        out = bb.add_positional(cls, patches)
        np.testing.assert_array_equal(out.data[:, 1:], patches.data)

    def test_output_shape(self):
        bb = make_backbone()
        out = bb.add_positional(broadcast_cls(bb.cls_token, 3), Tensor(np.zeros((3, 4, 16))))
        assert out.shape == (3, 5, 16)

    def test_patch_count_mismatch(self):
        bb = make_backbone()
        with pytest.raises(ShapeError):
            bb.add_positional(broadcast_cls(bb.cls_token, 1), Tensor(np.zeros((1, 9, 16))))


class TestEncoder:
    def test_depth_zero_is_final_layer_norm(self):
        bb = make_backbone(depth=0)
        x = Tensor(np.random.default_rng(1).normal(size=(2, 5, 16)), dtype=np.float64)
        out = bb.encoder_forward(TokenSequence(x, 4, 0))
        expected = T.layer_norm(x, bb.final_ln.gain, bb.final_ln.bias)
        np.testing.assert_array_equal(out.tokens.data, expected.data)

    def test_shape_preserved_through_blocks(self):
        bb = make_backbone(depth=3)
        x = Tensor(np.random.default_rng(2).normal(size=(2, 7, 16)), dtype=np.float64)
        out = bb.encoder_forward(TokenSequence(x, 4, 2))
        assert out.tokens.shape == x.shape

    def test_attention_rows_are_distributions(self):
        bb = make_backbone(depth=2)
        for block in bb.blocks:
            block.attn.capture_attn = True
        x = Tensor(np.random.default_rng(3).normal(size=(2, 7, 16)), dtype=np.float64)
        bb.encoder_forward(TokenSequence(x, 4, 2))
        for block in bb.blocks:
            rows = block.attn.last_attn
            assert rows is not None and rows.shape == (2, 2, 7, 7)
            np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-6)

    def test_prompt_permutation_equivariance(self):
        """Permuting prompt tokens permutes their outputs and leaves the rest alone."""
        bb = make_backbone(depth=2)
        rng = np.random.default_rng(4)
        n_patches, n_prompts = 4, 6
        x = rng.normal(size=(2, 1 + n_patches + n_prompts, 16))
        base = bb.encoder_forward(TokenSequence(Tensor(x, dtype=np.float64), n_patches, n_prompts))
        for trial in range(5):
            perm = np.random.default_rng(trial).permutation(n_prompts)
            xp = x.copy()
            xp[:, 1 + n_patches :] = x[:, 1 + n_patches :][:, perm]
            out = bb.encoder_forward(TokenSequence(Tensor(xp, dtype=np.float64), n_patches, n_prompts))
            np.testing.assert_allclose(
                out.tokens.data[:, : 1 + n_patches], base.tokens.data[:, : 1 + n_patches], atol=1e-6
            )
            np.testing.assert_allclose(
                out.tokens.data[:, 1 + n_patches :],
                base.tokens.data[:, 1 + n_patches :][:, perm],
                atol=1e-6,
            )

    def test_block_gradient_vs_finite_differences(self):
        bb = make_backbone(depth=1)
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(-1, 1, (1, 5, 16)), requires_grad=True, dtype=np.float64)
        coeffs = Tensor(rng.uniform(-1, 1, (80, 1)), dtype=np.float64)

        def loss():
            out = bb.encoder_forward(TokenSequence(x, 4, 0))
            return T.reshape(T.matmul(T.reshape(out.tokens, (1, 80)), coeffs), ())

        params = [x] + [p for _, p in bb.blocks[0].named_parameters()]
        assert check_gradients(loss, params) < 1e-4


def test_parameter_names_are_unique_and_prefixed():
    bb = make_backbone(depth=2)
    names = [n for n, _ in bb.named_parameters()]
    assert len(names) == len(set(names))
    assert "cls_token" in names and "pos_embed" in names
    assert any(n.startswith("blocks.1.attn.wq") for n in names)
