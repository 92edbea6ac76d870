import math

import pytest
import torch

from stylediff.cpln import CPLN, layer_normalize
from stylediff.layers import BinEmbedding
from stylediff.generator import Generator, GeneratorConfig, length_regulate
from tests.fd import gradient_error
from tests.micro import micro_batch, micro_generator_loss, micro_models

SMALL = dict(n_phonemes=20, hidden=16, n_heads=2, conv_kernel=3, ffn_filter=32,
             n_denoiser_blocks=2, denoiser_hidden=16, predictor_filter=16, mel_bins=10,
             max_frames=64, max_phonemes=32)


def small_generator(seed=0, **overrides):
    torch.manual_seed(seed)
    gen = Generator(GeneratorConfig(**{**SMALL, **overrides}))
    gen.set_variance_stats([30.0, 15.0, 8.0, 52.0], [0.1, 0.05, 0.0, 0.3])
    return gen.eval()


class TestConfig:
    def test_hidden_divisible(self):
        with pytest.raises(ValueError):
            GeneratorConfig(hidden=10, n_heads=3)

    def test_positive(self):
        with pytest.raises(ValueError):
            GeneratorConfig(n_denoiser_blocks=0)

    def test_full_scale_values(self):
        cfg = GeneratorConfig.full_scale()
        assert (cfg.n_fft_blocks, cfg.hidden, cfg.n_heads, cfg.conv_kernel, cfg.ffn_filter) == \
            (4, 256, 2, 9, 1024)
        assert (cfg.n_denoiser_blocks, cfg.denoiser_hidden, cfg.denoiser_dropout) == (20, 512, 0.2)
        assert (cfg.predictor_kernel, cfg.predictor_filter, cfg.predictor_dropout) == (3, 256, 0.5)


class TestEncoder:
    def test_shape_hidden_256(self):
        gen = small_generator(hidden=256, n_fft_blocks=1, ffn_filter=64)
        y = torch.tensor([[3, 5, 7, 2, 9]])
        h = gen.encode_phonemes(y, torch.randn(1, 128))
        assert h.shape == (1, 5, 256)

    def test_position_breaks_equivariance(self):
        gen = small_generator()
        s = torch.randn(1, 128)
        y = torch.tensor([[3, 5, 7, 2]])
        perm = torch.tensor([2, 0, 3, 1])
        h = gen.encode_phonemes(y, s)
        h_perm = gen.encode_phonemes(y[:, perm], s)
        assert not torch.allclose(h_perm, h[:, perm], atol=1e-4)

    def test_neutralized_sublayers_reduce_to_normalized_embeddings(self):
        gen = small_generator().double()
        with torch.no_grad():
            for block in gen.encoder.blocks:
                for p in list(block.attn.out.parameters()) + list(block.ff.parameters()):
                    p.zero_()
                for norm in (block.norm1, block.norm2):
                    norm.rho.fill_(1.0)
                    norm.gamma_ln.fill_(1.0)
                    norm.beta_ln.zero_()
        y = torch.tensor([[3, 5, 7, 2]])
        embedded = gen.embed(y) + gen.encoder.positions[:4].double()
        expected = embedded
        for _ in range(2 * len(gen.encoder.blocks)):
            expected, _ = layer_normalize(expected)
        torch.testing.assert_close(gen.encode_phonemes(y, torch.randn(1, 128).double()),
                                   expected, atol=1e-10, rtol=0)

    def test_too_long(self):
        gen = small_generator(max_phonemes=4)
        with pytest.raises(ValueError):
            gen.encode_phonemes(torch.ones(1, 5, dtype=torch.long), torch.randn(1, 128))

    def test_unknown_phoneme(self):
        with pytest.raises(ValueError):
            small_generator().encode_phonemes(torch.tensor([[25]]), torch.randn(1, 128))


class TestVariancePredictors:
    def test_full_predictor_layout(self):
        torch.manual_seed(0)
        cfg = GeneratorConfig(hidden=256, predictor_filter=256, n_fft_blocks=1, ffn_filter=16,
                              n_denoiser_blocks=1, denoiser_hidden=8)
        pred = Generator(cfg).duration_predictor
        assert (pred.conv1.in_channels, pred.conv1.out_channels) == (256, 256)
        assert (pred.conv2.in_channels, pred.conv2.out_channels) == (256, 256)
        assert pred.conv1.kernel_size == (3,) and pred.conv2.kernel_size == (3,)
        assert pred.dropout.p == 0.5

    def test_eval_deterministic_and_lengths(self):
        gen = small_generator()
        y = torch.tensor([[3, 5, 7, 2, 9, 1]])
        s = torch.randn(1, 128)
        h = gen.encode_phonemes(y, s)
        mask = torch.ones(1, 6, dtype=torch.bool)
        a = gen.predict_variances(h, s, mask)
        b = gen.predict_variances(h, s, mask)
        for u, v in zip(a, b):
            assert torch.equal(u, v)
            assert u.shape == (1, 6)

    def test_train_mode_dropout_varies(self):
        gen = small_generator().train()
        y = torch.tensor([[3, 5, 7, 2, 9, 1]])
        s = torch.randn(1, 128)
        mask = torch.ones(1, 6, dtype=torch.bool)
        h = gen.encode_phonemes(y, s)
        assert not torch.equal(gen.predict_variances(h, s, mask)[0],
                               gen.predict_variances(h, s, mask)[0])


class TestLengthRegulate:
    def test_identity(self):
        h = torch.randn(4, 3)
        out, n = length_regulate(h, torch.ones(4, dtype=torch.long))
        assert torch.equal(out, h) and n.item() == 4

    def test_repeat(self):
        h = torch.tensor([[1.0, 1.0], [2.0, 2.0]])
        out, _ = length_regulate(h, torch.tensor([2, 3]))
        assert out[:, 0].tolist() == [1, 1, 2, 2, 2]

    def test_zero_drop(self):
        h = torch.tensor([[1.0], [2.0]])
        out, _ = length_regulate(h, torch.tensor([0, 4]))
        assert out[:, 0].tolist() == [2, 2, 2, 2]

    def test_all_zero(self):
        with pytest.raises(ValueError):
            length_regulate(torch.randn(2, 3), torch.tensor([0, 0]))

    def test_batched_padding(self):
        h = torch.arange(6.0).reshape(2, 3, 1)
        out, n = length_regulate(h, torch.tensor([[1, 1, 0], [2, 0, 1]]))
        assert n.tolist() == [2, 3]
        assert out[..., 0].tolist() == [[0, 1, 0], [3, 3, 5]]

    def test_negative(self):
        with pytest.raises(ValueError):
            length_regulate(torch.randn(2, 3), torch.tensor([-1, 2]))


class TestQuantization:
    def test_log_bins_equal_ratio(self):
        gen = small_generator()
        stats = torch.tensor([0.0, 1.0, 0.1, 1.0])
        # geometric edges: each bin spans the same factor
        v = torch.logspace(-1.01, 0.01, 2001)
        idx = gen._bucket(v, stats)
        assert idx.min().item() == 0 and idx.max().item() == gen.cfg.n_bins - 1
        counts = torch.bincount(idx, minlength=gen.cfg.n_bins)[1:-1]
        assert counts.max() - counts.min() <= 2

    def test_linear_fallback(self):
        # energy minimum of zero cannot anchor a geometric grid
        gen = small_generator()
        assert gen._bucket(torch.tensor([0.15]), gen.energy_stats).item() == 127
        lin = small_generator(log_bins=False)
        stats = torch.tensor([0.0, 1.0, 0.1, 1.0])
        assert lin._bucket(torch.tensor([0.55]), stats).item() == 127
        assert gen._bucket(torch.tensor([0.55]), stats).item() > 127

    def test_shared_embedding_is_smooth(self):
        emb = BinEmbedding(256, 16)
        v = emb(torch.arange(256))
        step = (v[1:] - v[:-1]).norm(dim=-1)
        far = (v[128:] - v[:128]).norm(dim=-1)
        assert step.max() < far.mean()
        assert not any(k.endswith("code") for k in emb.state_dict())

    def test_table_option(self):
        assert isinstance(small_generator().pitch_embed, BinEmbedding)
        assert isinstance(small_generator(shared_bin_embedding=False).pitch_embed, torch.nn.Embedding)

    def test_out_of_range_clamps(self):
        gen = small_generator()
        stats = torch.tensor([0.0, 1.0, 0.1, 1.0])
        idx = gen._bucket(torch.tensor([-5.0, 0.0, 50.0]), stats)
        assert idx.tolist() == [0, 0, gen.cfg.n_bins - 1]


class TestDecoderAndDenoiser:
    def test_decode_shape_and_style_sensitivity(self):
        gen = small_generator()
        frames = torch.randn(1, 7, 16)
        mask = torch.ones(1, 7, dtype=torch.bool)
        a = gen.decode_context(frames, torch.randn(1, 128), mask)
        b = gen.decode_context(frames, torch.randn(1, 128), mask)
        assert a.shape == (1, 7, 16)
        assert (a - b).abs().max() > 1e-4

    def test_decode_zero_frames(self):
        gen = small_generator()
        with pytest.raises(ValueError):
            gen.decode_context(torch.randn(1, 0, 16), torch.randn(1, 128),
                               torch.ones(1, 0, dtype=torch.bool))

    def test_decode_too_many_frames(self):
        gen = small_generator(max_frames=8)
        with pytest.raises(ValueError):
            gen.decode_context(torch.randn(1, 9, 16), torch.randn(1, 128),
                               torch.ones(1, 9, dtype=torch.bool))

    def test_denoise_shape_and_timestep_sensitivity(self):
        gen = small_generator()
        y = torch.tensor([[3, 5, 7]])
        s = torch.randn(1, 128)
        cond = gen.prepare(y, s, durations=torch.tensor([[2, 1, 3]]))
        x_t = torch.randn(1, 6, 10)
        out1 = gen.denoise(x_t, cond, torch.tensor([1]))
        out2 = gen.denoise(x_t, cond, torch.tensor([2]))
        assert out1.shape == x_t.shape
        assert (out1 - out2).abs().max() > 1e-5

    def test_denoise_frame_mismatch(self):
        gen = small_generator()
        cond = gen.prepare(torch.tensor([[3, 5]]), torch.randn(1, 128),
                           durations=torch.tensor([[2, 2]]))
        with pytest.raises(ValueError):
            gen.denoise(torch.randn(1, 5, 10), cond, torch.tensor([1]))


class TestGeneratorForward:
    def test_teacher_forcing_frames(self):
        gen = small_generator()
        durations = torch.tensor([[3, 0, 2, 4]])
        x_t = torch.randn(1, 9, 10)
        x0, var = gen(x_t, torch.tensor([[1, 2, 3, 4]]), torch.randn(1, 128), torch.tensor([3]),
                      durations=durations)
        assert x0.shape == x_t.shape
        assert var.log_duration.shape == (1, 4) and var.pitch.shape == (1, 9)

    def test_inference_duration_rule(self):
        log_d = torch.tensor([[math.log(1 + 5), math.log(1 + 2.4), math.log(1 + 2.6), -3.0, 0.0]])
        mask = torch.tensor([[True, True, True, True, False]])
        d = Generator.durations_from_log(log_d, mask)
        assert d.tolist() == [[5, 2, 3, 1, 0]]

    def test_predicted_durations_drive_frames(self):
        gen = small_generator()
        y = torch.tensor([[3, 5, 7]])
        cond = gen.prepare(y, torch.randn(1, 128))
        d = cond.variances.durations
        assert bool((d >= 1).all())
        assert cond.context.shape[1] == int(d.sum())

    def test_eval_deterministic(self):
        gen = small_generator()
        args = (torch.randn(1, 4, 10), torch.tensor([[3, 5]]), torch.randn(1, 128),
                torch.tensor([2]))
        a, _ = gen(*args, durations=torch.tensor([[1, 3]]))
        b, _ = gen(*args, durations=torch.tensor([[1, 3]]))
        assert torch.equal(a, b)

    def test_batch_elements_independent(self):
        gen = small_generator()
        s = torch.randn(2, 128)
        y = torch.tensor([[3, 5, 7], [4, 2, 0]])
        d = torch.tensor([[2, 1, 2], [1, 2, 0]])
        x_t = torch.randn(2, 5, 10)
        x0, _ = gen(x_t, y, s, torch.tensor([1, 3]), durations=d)
        single, _ = gen(x_t[1:, :3], y[1:, :2], s[1:], torch.tensor([3]), durations=d[1:, :2])
        torch.testing.assert_close(x0[1, :3], single[0], atol=1e-5, rtol=1e-5)
        assert torch.count_nonzero(x0[1, 3:]) == 0

    def test_every_norm_is_cpln(self):
        gen = small_generator()
        assert not any(isinstance(m, torch.nn.LayerNorm) for m in gen.modules())
        cfg = gen.cfg
        expected = 2 * cfg.n_fft_blocks + 2 * cfg.n_fft_blocks + cfg.n_denoiser_blocks + 3 * 2
        assert gen.n_cpln_sites() == expected
        assert all(isinstance(m, CPLN) for m in gen.modules() if "norm" in type(m).__name__.lower())

    def test_gradient_through_total_loss(self):
        gen, disc = micro_models()
        batch = micro_batch()
        params = [p for p in gen.parameters() if p.requires_grad]
        err = gradient_error(lambda: micro_generator_loss(gen, disc, batch), params,
                             max_per_tensor=6)
        assert err < 1e-5
