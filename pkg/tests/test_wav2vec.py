import math

import numpy as np
import pytest
import torch

from adspeech.checkpoints import Checkpoint
from adspeech.wav2vec import (CONV_SPEC, AsrFinetuneConfig, ContextEncoder,
                              FeatureEncoder, GumbelQuantizer, MaskPlan,
                              SslAsrModel, SslConfig, SslError, SslModel,
                              SslTrainConfig, asr_finetune, contrastive_loss,
                              conv_out_length, load_ssl_encoders,
                              receptive_field, sample_masks, ssl_pretrain,
                              ssl_step)


def tiny_ssl_cfg(**kw):
    defaults = dict(dim=32, n_context_layers=2, n_heads=2, ff_dim=64,
                    dropout=0.0, groups=2, entries=8, mask_prob=0.2,
                    mask_span=5, n_distractors=5)
    defaults.update(kw)
    return SslConfig(**defaults)


def tiny_waves(n=6, duration=0.5, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(-0.5, 0.5, int(duration * 16000)).astype(np.float32)
            for _ in range(n)]


class TestConvGeometry:
    def test_ten_seconds_hand_computed(self):
        # (160000-10)//5+1 = 31999 -> 7998 -> 1998 -> 498, worked by hand
        assert conv_out_length(160000) == 498

    def test_stride_product_is_320(self):
        prod = 1
        for _, s in CONV_SPEC:
            prod *= s
        assert prod == 320

    def test_doubling_samples_roughly_doubles_frames(self):
        a = conv_out_length(16000)
        b = conv_out_length(32000)
        assert abs(b - 2 * a) <= 4

    def test_receptive_field_hand_computed(self):
        # 1 + 9*1 + 7*5 + 7*20 + 7*80 = 745
        assert receptive_field() == 745

    def test_feature_encoder_shape_and_finiteness(self):
        torch.manual_seed(0)
        enc = FeatureEncoder(dim=32)
        wave = torch.zeros(2, 4000)
        z = enc(wave)
        assert z.shape == (2, conv_out_length(4000), 32)
        assert torch.all(torch.isfinite(z))

    def test_too_short_waveform_rejected(self):
        enc = FeatureEncoder(dim=32)
        with pytest.raises(SslError):
            enc(torch.zeros(1, receptive_field() - 1))


class TestMaskSampling:
    def test_p_zero_forces_one_span(self):
        rng = np.random.default_rng(0)
        plan = sample_masks(100, 0.0, 10, rng)
        assert len(plan.starts) == 1
        assert plan.mask.sum() == 10
        s = plan.starts[0]
        assert plan.mask[s:s + 10].all()

    def test_short_sequence_with_p_one_masks_everything(self):
        rng = np.random.default_rng(0)
        plan = sample_masks(8, 1.0, 10, rng)
        assert plan.mask.all()

    def test_short_sequence_without_p_one_rejected(self):
        with pytest.raises(SslError):
            sample_masks(8, 0.5, 10, np.random.default_rng(0))

    def test_masked_fraction_matches_closed_form(self):
        # steady-state masked probability of frame t is 1 - (1-p)^M
        p, M, n = 0.065, 10, 200
        expected = 1.0 - (1.0 - p) ** M
        rng = np.random.default_rng(1)
        fractions = [sample_masks(n, p, M, rng).mask.mean() for _ in range(1000)]
        got = float(np.mean(fractions))
        assert abs(got - expected) < 0.2 * expected

    def test_empty_mask_plan_rejected(self):
        with pytest.raises(SslError):
            MaskPlan(np.zeros(5, dtype=bool), [], 0.1, 2)

    def test_spans_clip_at_sequence_end(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            plan = sample_masks(30, 0.3, 10, rng)
            assert plan.mask.shape == (30,)


def uniform_plan(n_frames):
    return MaskPlan(np.ones(n_frames, dtype=bool), [0], 1.0, n_frames)


class TestContrastiveLoss:
    def test_identical_codes_give_ln_k_plus_one(self):
        # positive and distractors are the same vector: uniform softmax
        T, d, K = 12, 8, 5
        torch.manual_seed(0)
        context = torch.randn(T, d, dtype=torch.float64)
        quantized = torch.ones(T, d, dtype=torch.float64)
        loss = contrastive_loss(context, quantized, uniform_plan(T), K, 0.1,
                                np.random.default_rng(0))
        assert float(loss.detach()) == pytest.approx(math.log(K + 1), abs=1e-9)

    def test_matches_brute_force_softmax(self):
        T, d, K, temp = 5, 6, 3, 0.2
        torch.manual_seed(1)
        context = torch.randn(T, d)
        quantized = torch.randn(T, d)
        plan = uniform_plan(T)
        loss = contrastive_loss(context, quantized, plan, K, temp,
                                np.random.default_rng(7))

        # recompute with numpy, replaying the same distractor draws
        rng = np.random.default_rng(7)
        c = context.numpy()
        q = quantized.numpy()
        masked = np.flatnonzero(plan.mask)
        want = []
        for t in masked:
            others = masked[masked != t]
            dist = rng.choice(others, size=K, replace=False)
            cn = c[t] / np.linalg.norm(c[t])
            cand = np.stack([q[t], *q[dist]])
            cand = cand / np.linalg.norm(cand, axis=1, keepdims=True)
            sims = cand @ cn / temp
            want.append(-(sims[0] - np.log(np.exp(sims).sum())))
        assert float(loss.detach()) == pytest.approx(float(np.mean(want)), abs=1e-6)

    def test_gradient_matches_finite_differences(self):
        T, d, K, temp = 4, 5, 2, 0.3
        torch.manual_seed(2)
        base_c = torch.randn(T, d, dtype=torch.float64)
        base_q = torch.randn(T, d, dtype=torch.float64)
        plan = uniform_plan(T)

        def f(c, q):
            return contrastive_loss(c, q, plan, K, temp, np.random.default_rng(3))

        c = base_c.clone().requires_grad_(True)
        q = base_q.clone().requires_grad_(True)
        f(c, q).backward()
        eps = 1e-6
        for tensor, grad in ((base_c, c.grad), (base_q, q.grad)):
            flat = tensor.flatten()
            for i in range(0, flat.numel(), 7):
                plus, minus = tensor.clone(), tensor.clone()
                plus.view(-1)[i] += eps
                minus.view(-1)[i] -= eps
                if tensor is base_c:
                    num = (f(plus, base_q) - f(minus, base_q)) / (2 * eps)
                else:
                    num = (f(base_c, plus) - f(base_c, minus)) / (2 * eps)
                got = float(grad.view(-1)[i])
                want = float(num.detach())
                assert got == pytest.approx(want, rel=1e-4, abs=1e-6)

    def test_distractor_count_reduced_with_warning(self, caplog):
        T, d = 4, 6
        torch.manual_seed(3)
        with caplog.at_level("WARNING"):
            contrastive_loss(torch.randn(T, d), torch.randn(T, d),
                             uniform_plan(T), 20, 0.1, np.random.default_rng(0))
        assert any("reducing distractors" in r.message for r in caplog.records)

    def test_needs_two_masked_frames(self):
        mask = np.zeros(5, dtype=bool)
        mask[2] = True
        plan = MaskPlan(mask, [2], 0.1, 1)
        with pytest.raises(SslError):
            contrastive_loss(torch.randn(5, 4), torch.randn(5, 4), plan, 2,
                             0.1, np.random.default_rng(0))

    def test_easy_positives_drive_loss_to_zero(self):
        # each target aligns with its context; distractors are orthogonal
        d, K = 8, 3
        T = d  # one basis direction per frame
        context = torch.eye(d)
        quantized = torch.eye(d)
        loss = contrastive_loss(context, quantized, uniform_plan(T), K, 0.01,
                                np.random.default_rng(0))
        assert float(loss.detach()) < 1e-6


class TestQuantizer:
    def test_eval_mode_selects_codebook_entries(self):
        torch.manual_seed(0)
        qz = GumbelQuantizer(dim=16, groups=2, entries=4)
        qz.eval()
        z = torch.randn(3, 16)
        q, probs = qz(z)
        assert q.shape == (3, 16)
        assert probs.shape == (3, 2, 4)
        logits = qz.logits_proj(z).view(3, 2, 4)
        picks = logits.argmax(dim=-1)
        for b in range(3):
            for g in range(2):
                sub = q[b, g * 8:(g + 1) * 8]
                assert torch.equal(sub, qz.codebook[g, picks[b, g]])

    def test_codebook_gradient_is_selection_pattern(self):
        # eval-mode selection is a fixed one-hot, so d(sum q)/d(codebook)
        # must be exactly the selection counts
        torch.manual_seed(1)
        qz = GumbelQuantizer(dim=8, groups=2, entries=3)
        qz.eval()
        z = torch.randn(4, 8)
        q, _ = qz(z)
        q.sum().backward()
        picks = qz.logits_proj(z).view(4, 2, 3).argmax(dim=-1)
        want = torch.zeros_like(qz.codebook)
        for b in range(4):
            for g in range(2):
                want[g, picks[b, g]] += 1.0
        assert torch.equal(qz.codebook.grad, want)

    def test_uniform_probs_zero_diversity_loss(self):
        qz = GumbelQuantizer(dim=8, groups=2, entries=4)
        probs = torch.full((10, 2, 4), 0.25)
        assert float(qz.perplexity(probs)) == pytest.approx(4.0, abs=1e-5)
        assert float(qz.diversity_loss(probs)) == pytest.approx(0.0, abs=1e-5)

    def test_collapsed_probs_max_diversity_loss(self):
        qz = GumbelQuantizer(dim=8, groups=2, entries=4)
        probs = torch.zeros(10, 2, 4)
        probs[:, :, 0] = 1.0
        assert float(qz.perplexity(probs)) == pytest.approx(1.0, abs=1e-5)
        assert float(qz.diversity_loss(probs)) == pytest.approx(0.75, abs=1e-5)

    def test_dim_must_divide_by_groups(self):
        with pytest.raises(SslError):
            GumbelQuantizer(dim=5, groups=2, entries=4)

    def test_training_mode_output_in_codebook_span(self):
        torch.manual_seed(2)
        qz = GumbelQuantizer(dim=8, groups=2, entries=3)
        qz.train()
        q, _ = qz(torch.randn(5, 8))
        assert q.shape == (5, 8)
        assert torch.all(torch.isfinite(q))


class TestContextEncoder:
    def test_return_layers_gives_per_layer_hiddens(self):
        cfg = tiny_ssl_cfg()
        enc = ContextEncoder(cfg)
        enc.eval()
        z = torch.randn(2, 12, cfg.dim)
        hiddens = enc(z, torch.tensor([12, 12]), return_layers=True)
        assert len(hiddens) == cfg.n_context_layers
        final = enc(z, torch.tensor([12, 12]))
        assert torch.equal(hiddens[-1], final)

    def test_mask_embedding_changes_masked_frames_only_under_identity(self):
        cfg = tiny_ssl_cfg(n_context_layers=1)
        enc = ContextEncoder(cfg)
        enc.eval()
        z = torch.randn(1, 10, cfg.dim)
        mask = torch.zeros(1, 10, dtype=torch.bool)
        mask[0, 3:6] = True
        with torch.no_grad():
            plain = enc(z, torch.tensor([10]))
            masked = enc(z, torch.tensor([10]), mask=mask)
        # attention mixes frames, so just require the outputs to differ
        assert not torch.allclose(plain, masked)


class TestSslStep:
    def test_forced_unmasked_has_exactly_zero_gradient(self):
        torch.manual_seed(0)
        model = SslModel(tiny_ssl_cfg())
        loss, _ = ssl_step(model, tiny_waves(2), np.random.default_rng(0),
                           force_unmasked=True)
        assert float(loss.detach()) == 0.0
        loss.backward()
        for p in model.parameters():
            if p.grad is not None:
                assert torch.count_nonzero(p.grad) == 0

    def test_normal_step_finite_loss_and_perplexity(self):
        torch.manual_seed(1)
        model = SslModel(tiny_ssl_cfg())
        loss, ppl = ssl_step(model, tiny_waves(3), np.random.default_rng(1))
        assert torch.isfinite(loss)
        assert 1.0 <= float(ppl.detach()) <= tiny_ssl_cfg().entries


@pytest.fixture(scope="module")
def ssl_pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("ssl")
    cfg = tiny_ssl_cfg()
    summary = ssl_pretrain(tiny_waves(), cfg, SslTrainConfig(epochs=2, batch_size=3,
                                                             lr=1e-3, seed=0), out)
    return cfg, out, summary


class TestSslPretrain:
    def test_outputs_persisted(self, ssl_pretrained):
        _, out, summary = ssl_pretrained
        assert (out / "epoch000.pt").is_file()
        assert (out / "best.pt").is_file()
        assert (out / "curves.csv").is_file()
        assert len(summary["curves"]) == 2
        header = (out / "curves.csv").read_text().splitlines()[0]
        assert header == "epoch,train_loss,codebook_perplexity"

    def test_truncation_contract(self, ssl_pretrained):
        """Loading only the two encoders reproduces the context output."""
        cfg, out, _ = ssl_pretrained
        ckpt = Checkpoint.load(out / "best.pt")
        torch.manual_seed(99)
        asr = SslAsrModel(cfg, ["a", "b"])
        load_ssl_encoders(ckpt, asr)
        assert ckpt.accessed == {"feature_encoder", "context_encoder"}

        full = SslModel(cfg)
        full.feature_encoder.load_state_dict(ckpt.state("feature_encoder"))
        full.context_encoder.load_state_dict(ckpt.state("context_encoder"))
        full.quantizer.load_state_dict(ckpt.state("quantizer"))
        asr.eval()
        full.eval()
        wave = torch.from_numpy(tiny_waves(1, seed=5)[0]).unsqueeze(0)
        with torch.no_grad():
            za = asr.feature_encoder(wave)
            zb = full.feature_encoder(wave)
            ca = asr.context_encoder(za)
            cb = full.context_encoder(zb)
        assert torch.equal(za, zb)
        assert torch.equal(ca, cb)

    def test_dim_mismatch_rejected(self, ssl_pretrained):
        cfg, out, _ = ssl_pretrained
        ckpt = Checkpoint.load(out / "best.pt")
        other = SslAsrModel(tiny_ssl_cfg(dim=16), ["a"])
        with pytest.raises(SslError):
            load_ssl_encoders(ckpt, other)


def tiny_ssl_corpus(n=6, seed=0):
    rng = np.random.default_rng(seed)
    vocab = ["a", "b"]
    corpus = []
    for _ in range(n):
        toks = [vocab[int(rng.integers(2))] for _ in range(2)]
        corpus.append((rng.uniform(-0.5, 0.5, 8000).astype(np.float32), toks))
    return corpus, vocab


class TestAsrFinetune:
    def test_vocab_mismatch_rejected(self, ssl_pretrained, tmp_path):
        cfg, out, _ = ssl_pretrained
        corpus, _ = tiny_ssl_corpus()
        ckpt_path = tmp_path / "v.pt"
        ckpt = Checkpoint.load(out / "best.pt")
        # re-save with an explicit vocabulary that disagrees with the corpus
        from adspeech.checkpoints import save_checkpoint
        save_checkpoint(ckpt_path, {n: ckpt.state(n) for n in ckpt.module_names},
                        "", ckpt.meta | {"vocab": ["x", "y", "z"]})
        with pytest.raises(SslError):
            asr_finetune(corpus, ["a", "b"], cfg, AsrFinetuneConfig(epochs=0),
                         tmp_path / "ft", init_checkpoint=Checkpoint.load(ckpt_path))

    def test_zero_epochs_keeps_pretrained_encoders(self, ssl_pretrained, tmp_path):
        cfg, out, _ = ssl_pretrained
        corpus, vocab = tiny_ssl_corpus()
        init = Checkpoint.load(out / "best.pt")
        asr_finetune(corpus, vocab, cfg, AsrFinetuneConfig(epochs=0, seed=3),
                     tmp_path, init_checkpoint=init)
        saved = Checkpoint.load(tmp_path / "epoch000.pt")
        for module in ("feature_encoder", "context_encoder"):
            want = init.state(module)
            got = saved.state(module)
            for k in want:
                assert torch.equal(got[k], want[k])

    def test_short_training_reduces_loss(self, tmp_path):
        corpus, vocab = tiny_ssl_corpus(n=8, seed=1)
        summary = asr_finetune(corpus, vocab, tiny_ssl_cfg(),
                               AsrFinetuneConfig(epochs=3, batch_size=4, seed=0),
                               tmp_path)
        assert not summary["diverged"]
        losses = [row["train_loss"] for row in summary["curves"]]
        assert losses[-1] < losses[0]
