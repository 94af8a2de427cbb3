import numpy as np
import pytest
import torch

from alignseg.alignment import (
    PixelProjector,
    PrototypeBank,
    TextBranch,
    ToyTextEncoder,
    build_prompts,
    build_text_encoder,
    cosine_logits,
    l2_normalize,
)
from alignseg.config import AlignConfig, TextEncoderConfig


def _text_cfg(**kw) -> TextEncoderConfig:
    cfg = TextEncoderConfig(vocab_size=32, token_dim=8, text_dim=12, seq_len=12)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def _align_cfg(**kw) -> AlignConfig:
    cfg = AlignConfig(embed_dim=8, class_names=["stroma", "gland"])
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


class TestNormalize:
    def test_rows_have_unit_norm(self, rng):
        x = torch.from_numpy(rng.standard_normal((10_000, 8)))
        norms = l2_normalize(x).norm(dim=-1).numpy()
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_zero_rows_stay_finite(self):
        x = torch.zeros(3, 8)
        out = l2_normalize(x)
        assert torch.isfinite(out).all()
        torch.testing.assert_close(out, torch.zeros(3, 8))

    def test_direction_preserved(self, rng):
        x = torch.from_numpy(rng.standard_normal((5, 8)))
        out = l2_normalize(x)
        cos = (out * x).sum(-1) / x.norm(dim=-1)
        np.testing.assert_allclose(cos.numpy(), 1.0, atol=1e-6)


class TestCosineLogits:
    def test_matches_per_pixel_loop(self, rng):
        z = l2_normalize(torch.from_numpy(rng.standard_normal((2, 6, 8))))
        anchors = torch.from_numpy(rng.standard_normal((3, 8)))
        out = cosine_logits(z, anchors, (2, 3))
        a_n = l2_normalize(anchors)
        for b in range(2):
            for n in range(6):
                for c in range(3):
                    expected = float((z[b, n] * a_n[c]).sum())
                    assert abs(out[b, c, n // 3, n % 3].item() - expected) < 1e-6

    def test_values_bounded(self, rng):
        z = l2_normalize(torch.from_numpy(rng.standard_normal((4, 16, 8))))
        anchors = torch.from_numpy(rng.standard_normal((2, 8)) * 100)
        out = cosine_logits(z, anchors, (4, 4))
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_anchor_rescaling_is_invariant(self, rng):
        z = l2_normalize(torch.from_numpy(rng.standard_normal((1, 4, 8))))
        anchors = torch.from_numpy(rng.standard_normal((2, 8)))
        a = cosine_logits(z, anchors, (2, 2))
        b = cosine_logits(z, anchors * 3.7, (2, 2))
        torch.testing.assert_close(a, b, rtol=0, atol=1e-6)

    def test_bad_grid_rejected(self, rng):
        z = torch.zeros(1, 6, 8)
        with pytest.raises(ValueError):
            cosine_logits(z, torch.zeros(2, 8), (2, 2))

    def test_temperature_scales(self, rng):
        z = l2_normalize(torch.from_numpy(rng.standard_normal((1, 4, 8))))
        anchors = torch.from_numpy(rng.standard_normal((2, 8)))
        a = cosine_logits(z, anchors, (2, 2), temperature=1.0)
        b = cosine_logits(z, anchors, (2, 2), temperature=0.5)
        torch.testing.assert_close(b, a / 0.5)


class TestPixelProjector:
    def test_embeddings_are_normalized(self, rng):
        proj = PixelProjector(16, 8)
        z, grid = proj(torch.from_numpy(rng.standard_normal((2, 16, 4, 5))).float())
        assert z.shape == (2, 20, 8)
        assert grid == (4, 5)
        np.testing.assert_allclose(z.norm(dim=-1).detach().numpy(), 1.0, atol=1e-5)


class TestPrototypes:
    def test_init_scale(self):
        torch.manual_seed(0)
        bank = PrototypeBank(64, 256)
        assert abs(bank.weight.std().item() - 1 / 16) < 0.01

    def test_logits_shape(self, rng):
        bank = PrototypeBank(3, 8)
        z = l2_normalize(torch.from_numpy(rng.standard_normal((2, 4, 8))).float())
        assert bank.logits(z, (2, 2)).shape == (2, 3, 2, 2)


class TestPrompts:
    def test_layout(self):
        enc = ToyTextEncoder(_text_cfg())
        templates = build_prompts(["gland tissue"], num_context=4, encoder=enc)
        t = templates[0]
        ids = t.token_ids
        assert len(ids) == enc.seq_len
        assert ids[0] == enc.bos_id
        assert ids[1:5] == [enc.pad_id] * 4
        assert t.context_start == 1 and t.context_len == 4
        assert ids[t.eot_index] == enc.eot_id
        assert all(i == enc.pad_id for i in ids[t.eot_index + 1 :])
        # two class words sit between the context slots and EOT
        assert t.eot_index == 1 + 4 + 2

    def test_zero_context_tokens(self):
        enc = ToyTextEncoder(_text_cfg())
        t = build_prompts(["gland"], num_context=0, encoder=enc)[0]
        assert t.eot_index == 2

    def test_name_too_long_rejected(self):
        enc = ToyTextEncoder(_text_cfg(seq_len=8))
        with pytest.raises(ValueError, match="context"):
            build_prompts(["a b c d e f"], num_context=4, encoder=enc)

    def test_tokenizer_is_stable_and_in_range(self):
        enc = ToyTextEncoder(_text_cfg())
        ids = enc.tokenize("Gland Tissue")
        assert ids == enc.tokenize("gland tissue")
        assert all(3 <= i < enc.vocab_size for i in ids)

    def test_empty_class_list_rejected(self):
        enc = ToyTextEncoder(_text_cfg())
        with pytest.raises(ValueError):
            build_prompts([], num_context=2, encoder=enc)


class TestTextEncoder:
    def test_frozen(self):
        enc = ToyTextEncoder(_text_cfg())
        assert list(enc.parameters()) == []

    def test_registry(self):
        assert isinstance(build_text_encoder(_text_cfg()), ToyTextEncoder)
        with pytest.raises(ValueError):
            build_text_encoder(_text_cfg(kind="bert"))

    def test_deterministic_across_builds(self):
        a = ToyTextEncoder(_text_cfg())
        b = ToyTextEncoder(_text_cfg())
        torch.testing.assert_close(a.token_table, b.token_table)


class TestTextBranch:
    def _branch(self, **kw) -> TextBranch:
        torch.manual_seed(0)
        return TextBranch(_align_cfg(**kw), ToyTextEncoder(_text_cfg()))

    def test_embedding_shape(self):
        branch = self._branch()
        t = branch.embeddings()
        assert t.shape == (2, 8)

    def test_gradients_reach_only_context_and_projection(self):
        branch = self._branch()
        branch.embeddings().sum().backward()
        assert branch.context.grad is not None
        assert branch.project.weight.grad is not None
        trainable = {name for name, p in branch.named_parameters() if p.requires_grad}
        assert trainable == {"context", "project.weight", "project.bias"}

    def test_context_tokens_change_embeddings(self):
        branch = self._branch()
        before = branch.embeddings().detach().clone()
        with torch.no_grad():
            branch.context += 0.5
        assert not torch.equal(branch.embeddings().detach(), before)

    def test_zero_context_branch_works(self):
        branch = self._branch(num_context_tokens=0)
        assert branch.embeddings().shape == (2, 8)

    def test_token_count_matches_config(self):
        branch = self._branch(num_context_tokens=3)
        assert branch.context.shape == (2, 3, 8)

    def test_logit_range(self, rng):
        branch = self._branch()
        z = l2_normalize(torch.from_numpy(rng.standard_normal((1, 4, 8))).float())
        logits = branch.logits(z, branch.embeddings(), (2, 2))
        assert logits.shape == (1, 2, 2, 2)
        assert logits.min() >= -1.0 and logits.max() <= 1.0
