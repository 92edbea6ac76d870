import hashlib
import json

import numpy as np
import pytest
import torch

from stylediff.checkpoint import latest_checkpoint, load_checkpoint, save_checkpoint
from stylediff.engine import (batch_order, collate, embed_prompts, eval_mel_mae, fit,
                              sample_timesteps,
                              synthesize, synthesize_batch, train_step)
from stylediff.schedule import q_posterior
from stylediff.seeding import torch_generator
from tests.tiny import tiny_setup


def params_hash(module) -> str:
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def grads_hash(module) -> str:
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(b"none" if p.grad is None else p.grad.numpy().tobytes())
    return h.hexdigest()


class TestTrainStep:
    def test_metrics_keys(self):
        state, ex, _ = tiny_setup()
        m = train_step(state, collate(ex[:4], state.factors))
        assert {"step", "loss_g", "loss_d", "style", "adv", "fm", "duration", "pitch", "energy",
                "mel"} <= set(m)
        assert m["step"] == state.step == 1
        assert all(np.isfinite(v) for v in m.values())

    def test_deterministic(self):
        a, ex, _ = tiny_setup()
        b, _, _ = tiny_setup()
        batch = collate(ex[:4], a.factors)
        for _ in range(3):
            assert train_step(a, batch) == train_step(b, batch)
        assert params_hash(a.generator) == params_hash(b.generator)

    def test_single_step_schedule(self):
        state, ex, _ = tiny_setup(**{"schedule.T": 1})
        rng = torch_generator(0, "x")
        assert set(sample_timesteps(100, 1, rng).tolist()) == {1}
        x0 = torch.randn(2, 5, 80)
        a = q_posterior(x0, torch.randn(2, 5, 80), 1, state.schedule)
        assert torch.equal(a.sample(torch.randn(2, 5, 80)), a.sample(torch.randn(2, 5, 80)))
        assert torch.equal(a.mean, x0)
        m = train_step(state, collate(ex[:4], state.factors))
        assert np.isfinite(m["loss_g"])

    def test_disjoint_updates(self):
        state, ex, _ = tiny_setup()
        batch = collate(ex[:4], state.factors)
        train_step(state, batch)  # populate optimizer moments
        record = {}
        g_step, d_step = state.opt_g.step, state.opt_d.step

        def wrapped_g(*a, **k):
            assert all(p.grad is None for p in state.discriminator.parameters())
            record["d_before_g"] = params_hash(state.discriminator)
            out = g_step(*a, **k)
            record["d_after_g"] = params_hash(state.discriminator)
            record["g_grads"] = grads_hash(state.generator)
            return out

        def wrapped_d(*a, **k):
            record["g_before_d"] = params_hash(state.generator)
            record["g_grads_at_d"] = grads_hash(state.generator)
            out = d_step(*a, **k)
            record["g_after_d"] = params_hash(state.generator)
            return out

        state.opt_d.zero_grad(set_to_none=True)
        state.opt_g.step, state.opt_d.step = wrapped_g, wrapped_d
        train_step(state, batch)
        assert record["d_before_g"] == record["d_after_g"]
        assert record["g_before_d"] == record["g_after_d"]
        assert record["g_grads"] == record["g_grads_at_d"]

    def test_rho_stays_clamped(self):
        state, ex, _ = tiny_setup(**{"optim.lr_g": 0.5})
        batch = collate(ex[:4], state.factors)
        for _ in range(3):
            train_step(state, batch)
        rhos = [m.rho.item() for m in state.generator.modules() if hasattr(m, "rho")]
        assert rhos and all(0.0 <= r <= 1.0 for r in rhos)

    def test_non_finite_aborts(self):
        state, ex, _ = tiny_setup()
        batch = collate(ex[:4], state.factors)
        batch.energy[0, 0] = float("inf")
        with pytest.raises(FloatingPointError, match="non-finite energy loss at step 0"):
            train_step(state, batch)

    def test_frozen_style_encoder(self):
        state, ex, _ = tiny_setup(**{"style.freeze": True})
        before = params_hash(state.style_encoder)
        m = train_step(state, collate(ex[:4], state.factors))
        assert params_hash(state.style_encoder) == before and m["style"] == 0.0


def test_uniform_timestep_coverage():
    counts = np.zeros(5)
    for step in range(10_000):
        t = sample_timesteps(1, 4, torch_generator(0, "training", step))
        counts[int(t)] += 1
    freqs = counts[1:] / counts.sum()
    assert np.all((freqs >= 0.22) & (freqs <= 0.28)), freqs


def test_batch_order_covers_epoch():
    seen = np.concatenate([batch_order(10, 4, 3, s) for s in range(3)])
    assert sorted(seen.tolist()) == list(range(10))
    assert not np.array_equal(batch_order(10, 4, 3, 0), batch_order(10, 4, 3, 3))


class TestFit:
    def test_zero_steps(self, tmp_path):
        state, ex, _ = tiny_setup()
        before = params_hash(state.generator)
        fit(state, ex, max_steps=0, run_dir=tmp_path)
        assert state.step == 0 and params_hash(state.generator) == before
        assert not (tmp_path / "checkpoints").exists()

    def test_empty_dataset(self):
        state, _, _ = tiny_setup()
        with pytest.raises(ValueError):
            fit(state, [], max_steps=2)

    def test_checkpoint_schedule_and_log(self, tmp_path):
        state, ex, _ = tiny_setup()
        fit(state, ex, max_steps=25, checkpoint_every=10, run_dir=tmp_path)
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["step_00000010", "step_00000020", "step_00000025"]
        records = [json.loads(l) for l in (tmp_path / "metrics.log").read_text().splitlines()]
        assert [r["step"] for r in records] == list(range(1, 26))
        assert all("wall_time" in r and "mel" in r for r in records)
        assert latest_checkpoint(tmp_path).name == "step_00000025"

    def test_resume_matches_uninterrupted(self, tmp_path):
        straight, ex, _ = tiny_setup()
        full = []
        fit(straight, ex, max_steps=8, on_step=full.append)

        first, _, _ = tiny_setup()
        fit(first, ex, max_steps=5, checkpoint_every=5, run_dir=tmp_path)
        resumed = load_checkpoint(tmp_path / "checkpoints" / "step_00000005")
        tail = []
        fit(resumed, ex, max_steps=8, on_step=tail.append)
        assert tail == full[5:]
        assert params_hash(resumed.generator) == params_hash(straight.generator)


class TestCheckpoint:
    def test_round_trip_forward(self, tmp_path):
        state, ex, _ = tiny_setup()
        fit(state, ex, max_steps=2)
        save_checkpoint(state, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert loaded.step == 2
        for name, module in state.modules().items():
            other = loaded.modules()[name]
            for (k, a), (_, b) in zip(module.state_dict().items(), other.state_dict().items()):
                assert torch.equal(a, b), (name, k)
        ph = [ex[0].phonemes.tolist()]
        a = synthesize_batch(state, ph, prompts=["a loud girl with a bass"], seed=4)[0]
        b = synthesize_batch(loaded, ph, prompts=["a loud girl with a bass"], seed=4)[0]
        assert np.array_equal(a.mel, b.mel)
        assert eval_mel_mae(state, ex) == eval_mel_mae(loaded, ex)

    def test_tensor_files_are_raw_f32(self, tmp_path):
        state, _, _ = tiny_setup()
        root = save_checkpoint(state, tmp_path / "ck")
        manifest = json.loads((root / "manifest.json").read_text())
        assert manifest["rng"] == {"seed": 0, "step": 0}
        entry = manifest["tensors"]["generator.embed.weight"]
        raw = (root / "tensors" / entry["file"]).read_bytes()
        assert len(raw) == 4 * int(np.prod(entry["shape"]))
        np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(entry["shape"]),
                                      state.generator.embed.weight.detach().numpy())

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path)


@pytest.fixture(scope="module")
def trained():
    state, ex, utts = tiny_setup()
    fit(state, ex, max_steps=3)
    return state, utts


class TestSynthesize:
    def test_bit_identical(self, trained):
        state, utts = trained
        a = synthesize(state, utts[0].phonemes, prompt=utts[0].prompt.text, seed=9)
        b = synthesize(state, utts[0].phonemes, prompt=utts[0].prompt.text, seed=9)
        assert np.array_equal(a.mel, b.mel) and np.array_equal(a.durations, b.durations)
        assert a.mel.shape == (int(a.durations.sum()), 80)

    def test_single_step_is_one_pass(self, trained):
        state, utts = trained
        u = utts[1]
        out = synthesize_batch(state, [u.phonemes.tolist()], prompts=[u.prompt.text], seed=2,
                               T_override=1)[0]
        with torch.no_grad():
            s = embed_prompts(state, [u.prompt.text])
            ph = torch.as_tensor(u.phonemes)[None]
            cond = state.generator.prepare(ph, s)
            x_T = torch.randn((1, cond.context.shape[1], 80),
                              generator=torch_generator(2, "inference"))
            x0 = state.generator.denoise(x_T, cond, torch.tensor([state.schedule.T]))
        assert np.array_equal(out.mel, x0[0].numpy())

    @pytest.mark.parametrize("T", [1, 2, 4])
    def test_overrides_accepted(self, trained, T):
        state, utts = trained
        out = synthesize(state, utts[0].phonemes, prompt=utts[0].prompt.text, T_override=T)
        assert np.isfinite(out.mel).all()

    def test_embedding_instead_of_prompt(self, trained):
        state, utts = trained
        out = synthesize(state, utts[0].phonemes, embedding=torch.zeros(128))
        assert out.mel.shape[1] == 80

    def test_untrained(self):
        state, _, utts = tiny_setup()
        with pytest.raises(RuntimeError):
            synthesize(state, utts[0].phonemes, prompt="hi")

    def test_empty_phonemes(self, trained):
        with pytest.raises(ValueError):
            synthesize(trained[0], [], prompt="hi")
