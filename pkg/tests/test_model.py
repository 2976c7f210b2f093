import numpy as np
import pytest

from bridgekit.autograd import grad_check
from bridgekit.config import parse_config
from bridgekit.model import ModelConfig, VisionLanguageModel, collate, paper_scale_config
from bridgekit.rng import make_rng
from bridgekit.text import LABEL_IGNORE, PAD_ID, apply_mlm_masking, bpe_encode, bpe_train
from bridgekit.training import Trainer

SMALL = dict(image_size=8, patch_size=4, vocab_size=40, max_text_len=12,
             visual_depth=2, visual_width=16, visual_heads=2,
             text_depth=2, text_width=16, text_heads=2,
             cross_depth=2, cross_width=16, cross_heads=2, ffn_expansion=2)


@pytest.fixture(scope="module")
def vocab():
    return bpe_train(["red square at 0 0", "blue circle at 1 1; red cross at 0 1"], 40)


def batch_for(vocab, captions, seed=0, size=8):
    r = np.random.default_rng(seed)
    images = [r.random((size, size, 3)) for _ in captions]
    return collate(images, [bpe_encode(c, vocab, max_len=12) for c in captions], 4)


class TestCollate:
    def test_trims_padding_columns(self, vocab):
        b = batch_for(vocab, ["red square at 0 0", "red"])
        assert b.ids.shape[1] == int(b.text_mask.sum(1).max())
        assert b.text_mask[:, -1].any()

    def test_untrimmed(self, vocab):
        seqs = [bpe_encode("red", vocab, max_len=12)]
        b = collate([np.zeros((8, 8, 3))], seqs, 4, trim=False)
        assert b.ids.shape == (1, 12) and (b.ids[0, b.text_mask[0].sum():] == PAD_ID).all()

    def test_patches_shape_and_dtype(self, vocab):
        seqs = [bpe_encode("red", vocab)] * 2
        b = collate([np.zeros((8, 8, 3))] * 2, seqs, 4, dtype=np.float32)
        assert b.patches.shape == (2, 4, 48) and b.patches.dtype == np.float32

    def test_mixed_labels_fill_ignore(self, vocab):
        seq = bpe_encode("red square at 0 0", vocab)
        masked = apply_mlm_masking(seq, make_rng(0, "test"), vocab.size)
        b = collate([np.zeros((8, 8, 3))] * 2, [masked, seq], 4)
        assert (b.mlm_labels[1] == LABEL_IGNORE).all()
        assert (b.mlm_labels[0] != LABEL_IGNORE).any()

    def test_no_labels(self, vocab):
        assert batch_for(vocab, ["red"]).mlm_labels is None


class TestModel:
    def test_forward_shapes(self, vocab):
        model = VisionLanguageModel(ModelConfig(**SMALL))
        b = batch_for(vocab, ["red square at 0 0", "blue circle at 1 1"])
        state = model(b)
        assert state.last_visual.shape == (2, 5, 16)
        assert state.last_textual.shape == (2, b.ids.shape[1], 16)
        assert model.itm_logits(b).shape == (2, 2)
        img, txt = model.itc_embeddings(b)
        assert img.shape == txt.shape == (2, 16)

    def test_seeded_init_is_reproducible(self):
        a = VisionLanguageModel(ModelConfig(**SMALL), seed=3).state_dict()
        b = VisionLanguageModel(ModelConfig(**SMALL), seed=3).state_dict()
        c = VisionLanguageModel(ModelConfig(**SMALL), seed=4).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not all(np.array_equal(a[k], c[k]) for k in a)

    def test_zero_init_bridge_matches_add_at_init(self, vocab):
        a = VisionLanguageModel(ModelConfig(**SMALL, bridge="a"))
        i = VisionLanguageModel(ModelConfig(**SMALL, bridge="i"))
        sa, si = a.state_dict(), i.state_dict()
        for key in sa:
            np.testing.assert_array_equal(sa[key], si[key])
        extra = set(si) - set(sa)
        assert extra and all(not si[k].any() or k.endswith("gain") for k in extra)
        b = batch_for(vocab, ["red square at 0 0", "blue circle at 1 1"])
        np.testing.assert_allclose(a.itm_logits(b).data, i.itm_logits(b).data, rtol=0, atol=1e-14)

    def test_float32(self, vocab):
        model = VisionLanguageModel(ModelConfig(**SMALL), dtype=np.float32)
        assert model.dtype == np.float32
        assert model.itm_logits(batch_for(vocab, ["red"])).data.dtype == np.float32

    def test_task_head_only_with_classes(self):
        assert not hasattr(VisionLanguageModel(ModelConfig(**SMALL)), "task_head")
        assert hasattr(VisionLanguageModel(ModelConfig(**SMALL, num_classes=3)), "task_head")

    def test_meta_model_counts_without_memory(self):
        model = VisionLanguageModel.meta(paper_scale_config())
        assert model.num_parameters() > 300_000_000

    def test_validation(self):
        with pytest.raises(ValueError):
            VisionLanguageModel(ModelConfig(**{**SMALL, "patch_size": 3}))
        with pytest.raises(ValueError):
            VisionLanguageModel(ModelConfig(**{**SMALL, "cross_depth": 3}))

    def test_config_dict_round_trip(self):
        cfg = ModelConfig(**SMALL, bridge="e")
        assert ModelConfig.from_dict({**cfg.to_dict(), "unknown": 1}) == cfg

    def test_end_to_end_gradient(self, vocab):
        model = VisionLanguageModel(ModelConfig(**{**SMALL, "bridge": "c"}))
        b = batch_for(vocab, ["red square at 0 0", "red"])
        w = np.random.default_rng(1).standard_normal((2, 2))
        params = dict(model.named_parameters())
        for name in ("visual_encoder.patch_proj.bias", "visual_encoder.class_token", "cross_modal.type_text",
                     "cross_modal.bridges_text.1.combiner.alpha"):
            rep = grad_check(lambda _: (model.itm_logits(b) * w).sum(), params[name], tol=1e-3)
            assert rep.passed, f"{name}: {rep.max_rel_error:.2e}"


class TestFixedBatchOverfit:
    def test_fifty_steps(self):
        """Repeating one pre-training step on an unchanging batch drives the loss below a fifth."""
        tr = Trainer(parse_config("[train]\nlr = 3e-4\n"))
        idx = np.arange(8)
        losses = []
        for _ in range(51):
            out = tr.pretrain_losses(idx, tr.data.train, make_rng(0, "test"))
            losses.append(out["loss"].item())
            tr.model.zero_grad()
            out["loss"].backward()
            tr.opt.step(1.0)
        assert losses[-1] < 0.2 * losses[0]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])
