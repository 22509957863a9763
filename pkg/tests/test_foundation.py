import itertools

import pytest
import torch
import torch.nn.functional as F

from amalgseg.foundation import (PromptEncoder, StudentConfig, build_student,
                                 load_student, save_student)
from amalgseg.synthdata import PromptBox
from amalgseg.training import remap_labels

from conftest import TINY_SHAPE, finite_difference_check, make_micro_setup

SMALL_CFG = StudentConfig(embed_dim=8, num_heads=2, decoder_channels=8, mlp_ratio=1.0)
TASKS = {"t0": (1, 2), "t1": (3,)}


@pytest.fixture(scope="module")
def small_student():
    return build_student(SMALL_CFG, TASKS, seed=0).eval()


class TestEncoder:
    def test_bottleneck_shape_arithmetic(self):
        # patch 2, 3 stages of x2: 32x96x96 -> (2, 6, 6) grid, 72 tokens
        student = build_student(StudentConfig(embed_dim=8, num_heads=2,
                                              decoder_channels=8), TASKS, seed=0)
        skips, tokens = student.encoder_forward(torch.randn(2, 1, 32, 96, 96))
        assert tuple(tokens.shape) == (2, 72, student.model_dim)
        assert len(skips) == 3

    def test_batch_order_permutation(self, small_student):
        x = torch.randn(3, 1, *TINY_SHAPE)
        perm = torch.tensor([2, 0, 1])
        with torch.no_grad():
            _, tokens = small_student.encoder_forward(x)
            _, tokens_p = small_student.encoder_forward(x[perm])
        assert torch.equal(tokens[perm], tokens_p)

    def test_zero_input_finite(self, small_student):
        with torch.no_grad():
            skips, tokens = small_student.encoder_forward(torch.zeros(1, 1, *TINY_SHAPE))
        assert torch.isfinite(tokens).all()
        assert all(torch.isfinite(s).all() for s in skips)

    def test_indivisible_shape_rejected(self, small_student):
        with pytest.raises(ValueError, match="not divisible"):
            small_student.encoder_forward(torch.randn(1, 1, 32, 40, 40))


class TestPromptEncoder:
    def test_full_volume_box_normalizes_to_unit_corners(self):
        box = PromptBox((0, 0, 0), TINY_SHAPE, 1)
        lo, hi = PromptEncoder.normalize_box(box, TINY_SHAPE)
        assert lo == (0.0, 0.0, 0.0)
        assert hi == (1.0, 1.0, 1.0)

    def test_identical_boxes_identical_embeddings(self, small_student):
        box = PromptBox((2, 3, 4), (10, 12, 14), 1)
        a = small_student.encode_prompt(box, TINY_SHAPE)
        b = small_student.encode_prompt(box, TINY_SHAPE)
        assert torch.equal(a, b)
        assert a.shape == (1, 3, small_student.model_dim)

    def test_grid_boxes_pairwise_distinct(self):
        # every box with corners on an 8^3 grid embeds distinctly
        enc = PromptEncoder(dim=16, num_freqs=6).double()
        torch.manual_seed(0)
        corners = list(itertools.combinations(range(9), 2))  # lo < hi per axis
        seen = set()
        n = 0
        with torch.no_grad():
            for (zl, zh), (yl, yh), (xl, xh) in itertools.product(corners, repeat=3):
                box = PromptBox((zl, yl, xl), (zh, yh, xh), 1)
                emb = enc(box, (8, 8, 8))
                seen.add(emb.numpy().tobytes())
                n += 1
        assert len(seen) == n == 36 ** 3

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            PromptBox((2, 2, 2), (2, 5, 5), 1)


class TestDecoder:
    def test_resolution_round_trip(self, small_student):
        for shape in (TINY_SHAPE, (32, 64, 64)):
            x = torch.randn(1, 1, *shape)
            with torch.no_grad():
                skips, tokens = small_student.encoder_forward(x)
                dense = small_student.decoder_forward(tokens, skips)
            assert tuple(dense.shape[2:]) == shape
            assert dense.shape[1] == SMALL_CFG.decoder_channels

    def test_gradient_flows_to_tokens(self, small_student):
        x = torch.randn(1, 1, *TINY_SHAPE)
        skips, tokens = small_student.encoder_forward(x)
        tokens = tokens.detach().requires_grad_(True)
        dense = small_student.decoder_forward(tokens, skips)
        dense.sum().backward()
        assert tokens.grad is not None
        assert tokens.grad.abs().sum() > 0

    def test_skip_ablation_changes_output(self, small_student):
        x = torch.randn(1, 1, *TINY_SHAPE)
        with torch.no_grad():
            skips, tokens = small_student.encoder_forward(x)
            dense = small_student.decoder_forward(tokens, skips)
            ablated = small_student.decoder_forward(tokens, [torch.zeros_like(s) for s in skips])
        assert dense.numpy().tobytes() != ablated.numpy().tobytes()


class TestFusePrompt:
    def test_zero_projection_reduces_to_normalized_dense(self):
        student = build_student(SMALL_CFG, TASKS, seed=0).eval()
        x = torch.randn(2, SMALL_CFG.decoder_channels, 8, 8, 8)
        e_pro = torch.randn(2, 3, student.model_dim)
        with torch.no_grad():
            student.prompt_to_dense.weight.zero_()
            student.prompt_to_dense.bias.zero_()
            fused = student.fuse_prompt(x, e_pro)
            mu = x.mean(dim=1, keepdim=True)
            var = x.var(dim=1, unbiased=False, keepdim=True)
            expected = (x - mu) / torch.sqrt(var + student.fuse_eps)
        assert torch.allclose(fused, expected)

    def test_per_position_zero_mean_unit_variance(self, small_student):
        x = torch.randn(2, SMALL_CFG.decoder_channels, 6, 6, 6)
        e_pro = torch.randn(2, 3, small_student.model_dim)
        with torch.no_grad():
            fused = small_student.fuse_prompt(x, e_pro)
        assert fused.mean(dim=1).abs().max() < 1e-5
        assert (fused.var(dim=1, unbiased=False) - 1).abs().max() < 1e-5

    def test_different_prompts_fuse_differently(self, small_student):
        x = torch.randn(1, SMALL_CFG.decoder_channels, 8, 8, 8)
        a = small_student.encode_prompt(PromptBox((0, 0, 0), (8, 8, 8), 1), TINY_SHAPE)
        b = small_student.encode_prompt(PromptBox((2, 2, 2), (6, 6, 6), 1), TINY_SHAPE)
        with torch.no_grad():
            fa = small_student.fuse_prompt(x, a)
            fb = small_student.fuse_prompt(x, b)
        assert fa.numpy().tobytes() != fb.numpy().tobytes()


class TestMaskDecode:
    def _fused(self, student, batch=2):
        x = torch.randn(batch, 1, *TINY_SHAPE)
        with torch.no_grad():
            skips, tokens = student.student_tokens(x)
            dense = student.decoder_forward(tokens, skips)
            e_pro = student.encode_prompts(
                [PromptBox((1, 1, 1), (9, 9, 9), 1)] * batch, TINY_SHAPE)
            return student.fuse_prompt(dense, e_pro), e_pro

    def test_softmax_rows_sum_to_one(self, small_student):
        fused, e_pro = self._fused(small_student)
        logits, _ = small_student.mask_decode(fused, e_pro, "t0")
        sums = torch.softmax(logits, dim=1).sum(dim=1)
        assert (sums - 1).abs().max() < 1e-6
        assert logits.shape[1] == len(TASKS["t0"]) + 1

    def test_argmax_invariant_to_constant_shift(self, small_student):
        fused, e_pro = self._fused(small_student)
        logits, _ = small_student.mask_decode(fused, e_pro, "t0")
        assert torch.equal(logits.argmax(dim=1), (logits + 3.7).argmax(dim=1))

    def test_binary_mask_within_bounds_and_semantics(self, small_student):
        fused, e_pro = self._fused(small_student)
        logits, binary = small_student.mask_decode(fused, e_pro, "t0", target_label=2)
        assert binary.shape == logits.shape[:1] + logits.shape[2:]
        assert binary.dtype == torch.bool
        assert torch.equal(binary, logits.argmax(dim=1) == 2)  # channel of label 2

    def test_unknown_task_rejected(self, small_student):
        fused, e_pro = self._fused(small_student)
        with pytest.raises(KeyError, match="no segmentation head"):
            small_student.mask_decode(fused, e_pro, "never-registered")

    def test_label_outside_task_rejected(self, small_student):
        fused, e_pro = self._fused(small_student)
        with pytest.raises(ValueError, match="not in task"):
            small_student.mask_decode(fused, e_pro, "t0", target_label=3)


class TestModelContracts:
    def test_eval_determinism_bitwise(self, small_student):
        x = torch.randn(1, 1, *TINY_SHAPE)
        box = PromptBox((2, 2, 2), (20, 20, 20), 1)
        outs = []
        for _ in range(2):
            with torch.no_grad():
                skips, tokens = small_student.student_tokens(x)
                dense = small_student.decoder_forward(tokens, skips)
                e_pro = small_student.encode_prompt(box, TINY_SHAPE)
                fused = small_student.fuse_prompt(dense, e_pro)
                logits, _ = small_student.mask_decode(fused, e_pro, "t0")
            outs.append(logits.numpy().tobytes())
        assert outs[0] == outs[1]

    def test_checkpoint_round_trip(self, tmp_path, small_student):
        pt = save_student(small_student, str(tmp_path), manifest_ref="m.json")
        loaded = load_student(pt)
        assert loaded.task_labels == small_student.task_labels
        x = torch.randn(1, 1, *TINY_SHAPE)
        with torch.no_grad():
            _, a = small_student.encoder_forward(x)
            _, b = loaded.encoder_forward(x)
        assert torch.equal(a, b)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            StudentConfig(embed_dim=10, num_heads=4)
        with pytest.raises(ValueError):
            StudentConfig(num_stages=0)

    def test_finite_difference_gradients_float64(self):
        """CE through the whole student: sampled 32-entry check at 1e-5."""
        setup = make_micro_setup(dtype=torch.float64)
        student, batch = setup.student, setup.batch

        def closure():
            skips, tokens = student.student_tokens(batch.images)
            dense = student.decoder_forward(tokens, skips)
            e_pro = student.encode_prompts(batch.boxes, batch.volume_shape)
            fused = student.fuse_prompt(dense, e_pro)
            loss = batch.images.new_zeros(())
            for i, task in enumerate(batch.tasks):
                logits, _ = student.mask_decode(fused[i:i + 1], e_pro[i:i + 1], task)
                target = remap_labels(batch.labels[i:i + 1], student.task_labels[task])
                loss = loss + F.cross_entropy(logits, target)
            return loss

        params = [p for p in student.parameters() if p.requires_grad]
        err = finite_difference_check(closure, params, n_sample=32, seed=1)
        assert err < 1e-5
