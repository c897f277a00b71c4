import hashlib
import math
from dataclasses import replace

import numpy as np
import pytest

from linlab import autodiff as ad
from linlab import dsp
from linlab import model as M
from linlab import trainer as T
from linlab.schedule import ScheduleConfig, lambda_weight, sigma_of_t

MICRO = M.ModelConfig(widths=(2, 4), latent_channels=1, emb_dim=4, emb_hidden=4,
                      window=32, fft_size=16, hop=4)


def micro_config(**kw):
    sched = kw.pop("schedule", ScheduleConfig(total_steps=50, warmup_steps=5, lr_max=1e-2, ema_decay=0.9))
    return T.TrainConfig(schedule=sched, model=MICRO, batch_size=3, **kw)


def clips(n=5, length=64, seed=0):
    t = np.arange(length) / 8000
    rng = np.random.default_rng(seed)
    return np.stack([0.4 * np.sin(2 * np.pi * rng.uniform(300, 2000) * t + rng.uniform(0, 6))
                     for _ in range(n)])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestPseudoHuber:
    def test_zero_on_equal(self):
        x = np.random.default_rng(0).standard_normal(5)
        assert T.pseudo_huber(x, x).item() == 0.0

    def test_small_residual(self):
        c = T.HUBER_C
        d = T.pseudo_huber(np.array([c]), np.array([0.0])).item()
        assert d == pytest.approx(c * (math.sqrt(2) - 1))
        # 5.4e-4 * (sqrt(2) - 1) = 2.23675e-4; the commonly quoted 2.2366e-4 is a rounding slip
        assert d == pytest.approx(2.2366e-4, abs=5e-8)

    def test_linear_regime(self):
        d = T.pseudo_huber(np.array([1.0]), np.array([0.0])).item()
        assert 1 - T.HUBER_C <= d <= 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.pseudo_huber(np.zeros(3), np.zeros(4))
        with pytest.raises(ValueError):
            T.pseudo_huber(np.zeros(3), np.zeros(3), c=0.0)


def scalar_radam(grad_fn, x, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float RAdam, written out from the published update rule."""
    m = v = 0.0
    rho_inf = 2 / (1 - b2) - 1
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        rho = rho_inf - 2 * t * b2 ** t / (1 - b2 ** t)
        if rho > 5:
            r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
            x -= lr * r * mh * math.sqrt(1 - b2 ** t) / (math.sqrt(v) + eps)
        else:
            x -= lr * mh
    return x


class TestRAdam:
    def run(self, grad_fn, x0, lr, steps):
        p, m, v = {"x": np.array(x0)}, {"x": np.array(0.0)}, {"x": np.array(0.0)}
        traj = []
        for t in range(1, steps + 1):
            p, m, v = T.radam_update(p, {"x": grad_fn(p["x"])}, m, v, t, lr)
            traj.append(float(p["x"]))
        return traj

    def test_zero_grad(self):
        p = {"w": np.arange(3.0)}
        z = {"w": np.zeros(3)}
        for t in range(1, 10):
            new, _, _ = T.radam_update(p, z, z, z, t, 0.1)
            assert np.array_equal(new["w"], p["w"])

    def test_constant_grad_drifts_monotonically(self):
        traj = self.run(lambda x: 1.0, 0.0, 1e-2, 50)
        assert np.all(np.diff(traj) < 0)

    def test_quadratic_convergence(self):
        grad = lambda x: 2 * (x - 0.5)
        traj = self.run(grad, 0.0, 1e-2, 500)
        assert abs(traj[-1] - 0.5) < 1e-3
        assert traj[-1] == pytest.approx(scalar_radam(grad, 0.0, 1e-2, 500), abs=1e-12)


def test_ct_loss_matches_finite_differences_for_every_variant():
    cfg = micro_config(seed=1)
    batch = T.batch_for_step(clips(), 3, 3, MICRO.window, 1)
    P0 = M.init_params(MICRO, seed=1)
    names = sorted(P0)
    for variant in T.VARIANTS:
        def f(*ts):
            return T.ct_loss(dict(zip(names, ts)), T.make_items(batch, True), 3, cfg, variant)[0]
        inputs = [ad.Tensor(P0[n].copy()) for n in names]
        assert ad.finite_diff_check(f, inputs, eps=1e-4, order=4, max_coords=12) < 1e-4


def test_teacher_contributes_no_gradient(monkeypatch):
    cfg = micro_config()
    batch = T.batch_for_step(clips(), 0, 3, MICRO.window, 0)
    P = M.as_tensors(M.init_params(MICRO, 0), requires_grad=True)
    calls = []
    real = M.consistency_f

    def spy(*args, **kw):
        out = real(*args, **kw)
        calls.append(out)
        return out
    monkeypatch.setattr(M, "consistency_f", spy)
    loss, _ = T.ct_loss(P, T.make_items(batch, True), 0, cfg)
    student, teacher = calls
    assert student.requires_grad and not teacher.requires_grad


class TestConstruction:
    def record(self, monkeypatch, variant, step=0):
        cfg = micro_config()
        seen = {"enc": [], "f": []}
        real_enc, real_f = M.encoder_forward, M.consistency_f

        def enc(P, X, c):
            seen["enc"].append(np.array(X))
            return real_enc(P, X, c)

        def f(P, X, sigma, z, c):
            seen["f"].append((np.array(sigma), np.array(ad.as_tensor(z).data)))
            return real_f(P, X, sigma, z, c)
        monkeypatch.setattr(M, "encoder_forward", enc)
        monkeypatch.setattr(M, "consistency_f", f)
        batch = T.batch_for_step(clips(), step, 3, MICRO.window, 0)
        items = T.make_items(batch, True)
        _, info = T.ct_loss(M.as_tensors(M.init_params(MICRO, 0)), items, step, cfg, variant)
        return batch, items, info, seen

    def test_encoder_sees_unscaled_singles(self, monkeypatch):
        batch, items, info, seen = self.record(monkeypatch, "lin")
        assert np.any(info["gains"] != 1.0)
        (X,) = seen["enc"]
        assert np.array_equal(X, dsp.to_model_space(batch, MICRO.stft))

    def test_gain_only_scales_latents(self, monkeypatch):
        batch, items, info, seen = self.record(monkeypatch, "lin")
        (sig2, z2), (sig1, z1) = seen["f"]
        # the denoiser receives noise levels, never the gains
        assert np.array_equal(sig2, info["sigma2"]) and np.array_equal(sig1, info["sigma1"])
        Z = M.encode(M.init_params(MICRO, 0), batch, MICRO)
        for i, item in enumerate(items):
            ref = Z[i] if item.kind == "single" else Z[item.components[0]] + Z[item.components[1]]
            assert np.allclose(z2[i], item.gain * ref, atol=1e-12)
        assert np.array_equal(z1, z2)

    def test_baseline_encodes_scaled_mixtures(self, monkeypatch):
        batch, items, info, seen = self.record(monkeypatch, "baseline")
        (X,) = seen["enc"]
        expected = np.stack([it.gain * it.waveform for it in items])
        assert np.allclose(X, dsp.to_model_space(expected, MICRO.stft), atol=1e-12)


def plain_ct_loss(P, batch, step, cfg):
    """Consistency training of a plain CAE: no gains, no mixtures, written from scratch."""
    mc, K = cfg.model, cfg.schedule.total_steps
    dt = T.delta_t(step, K)
    n = len(batch)
    t1, eps = np.empty(n), np.empty((n, 2) + mc.grid_shape)
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, step, i])
        rng.random(), rng.random()          # gain stream slots, unused here
        t1[i] = rng.random() * (1 - dt)
        eps[i] = rng.standard_normal((2,) + mc.grid_shape)
    s1, s2 = sigma_of_t(t1), sigma_of_t(np.minimum(t1 + dt, 1.0))
    X = dsp.to_model_space(batch, mc.stft)
    Z = M.encoder_forward(P, X, mc)
    student = M.consistency_f(P, X + s2[:, None, None, None] * eps, s2, Z, mc)
    with ad.no_grad():
        teacher = M.consistency_f(P, X + s1[:, None, None, None] * eps, s1, Z.data, mc)
    d = T.pseudo_huber(student, teacher.data, cfg.huber_c, axis=(1, 2, 3))
    return ad.mean(ad.mul(d, lambda_weight(s1, s2)))


class TestBaselineEquivalence:
    @pytest.mark.parametrize("step", [0, 17, 49])
    def test_bitwise(self, step):
        cfg = micro_config(mixtures=False, gains=False, seed=3)
        batch = T.batch_for_step(clips(), step, 3, MICRO.window, 3)
        params = M.init_params(MICRO, 3)
        ref = plain_ct_loss(M.as_tensors(params), batch, step, cfg)
        for variant in ("lin", "baseline"):
            loss, info = T.ct_loss(M.as_tensors(params), T.make_items(batch, False), step, cfg, variant)
            assert np.all(info["gains"] == 1.0)
            assert loss.data.tobytes() == ref.data.tobytes()

    def test_full_step_bitwise(self):
        cfg = micro_config(mixtures=False, gains=False)
        batch = T.batch_for_step(clips(), 0, 3, MICRO.window, 0)
        a = T.ct_step(T.make_items(batch, False), T.init_state(cfg, "lin"))
        b = T.ct_step(T.make_items(batch, False), T.init_state(cfg, "baseline"))
        assert a[0] == b[0]
        assert all(np.array_equal(a[1].params[k], b[1].params[k]) for k in a[1].params)


class TestStep:
    def test_sigma_order_and_lambda(self):
        cfg = micro_config()
        batch = T.batch_for_step(clips(), 5, 3, MICRO.window, 0)
        _, state, info = T.ct_step(T.make_items(batch, True), T.init_state(cfg))
        assert np.all(info["sigma1"] < info["sigma2"])
        assert state.step == 1

    def test_ema_never_receives_gradients(self):
        cfg = micro_config()
        state = T.init_state(cfg)
        ema0 = {k: v.copy() for k, v in state.ema.items()}
        d = cfg.schedule.ema_decay
        batch = T.batch_for_step(clips(), 0, 3, MICRO.window, 0)
        _, state, _ = T.ct_step(T.make_items(batch, True), state)
        # step 0 is an EMA step: the shadow is a pure blend, no gradient term
        blended = {k: d * ema0[k] + (1 - d) * state.params[k] for k in ema0}
        assert all(np.array_equal(state.ema[k], blended[k]) for k in ema0)
        for k in (1, 2):
            batch = T.batch_for_step(clips(), k, 3, MICRO.window, 0)
            _, state, _ = T.ct_step(T.make_items(batch, True), state)
        assert all(np.array_equal(state.ema[k], blended[k]) for k in ema0)

    def test_nan_aborts_with_diagnostics(self):
        cfg = micro_config()
        batch = T.batch_for_step(clips(), 0, 3, MICRO.window, 0)
        batch[0, 3] = np.nan
        with pytest.raises(T.NumericalError, match="sigma1"):
            T.ct_step(T.make_items(batch, True), T.init_state(cfg))

    def test_finished_state(self):
        cfg = micro_config(schedule=ScheduleConfig(total_steps=0))
        with pytest.raises(ValueError):
            T.ct_step([], T.init_state(cfg))

    def test_loss_decreases(self):
        sched = ScheduleConfig(total_steps=200, warmup_steps=10, lr_max=1e-2, ema_decay=0.9)
        corpus = clips(4, 64, seed=9)
        drops = []
        for seed in range(3):
            cfg = micro_config(schedule=sched, seed=seed)
            probe = T.make_items(T.batch_for_step(corpus, 0, 3, MICRO.window, seed), True)

            def probe_loss(params):
                with ad.no_grad():
                    return T.ct_loss(M.as_tensors(params), probe, 0, cfg)[0].item()
            state = T.init_state(cfg)
            before = probe_loss(state.params)
            for k in range(200):
                batch = T.batch_for_step(corpus, k, 3, MICRO.window, seed)
                _, state, _ = T.ct_step(T.make_items(batch, True), state)
            drops.append(before - probe_loss(state.params))
        assert np.median(drops) > 0


class TestTrain:
    def test_zero_steps_is_init(self, tmp_path):
        cfg = micro_config(schedule=ScheduleConfig(total_steps=0))
        state = T.load_state(T.train(cfg, clips(), tmp_path))
        init = M.init_params(MICRO, cfg.seed)
        assert all(np.array_equal(state.params[k], init[k]) for k in init)
        assert all(np.array_equal(state.ema[k], init[k]) for k in init)

    def test_deterministic(self, tmp_path):
        cfg = micro_config(schedule=ScheduleConfig(total_steps=12, warmup_steps=2))
        a = T.train(cfg, clips(), tmp_path / "a")
        b = T.train(cfg, clips(), tmp_path / "b")
        assert sha(a) == sha(b)

    def test_resume_is_bitwise(self, tmp_path):
        cfg = micro_config(schedule=ScheduleConfig(total_steps=12, warmup_steps=2), checkpoint_every=5)
        full = T.train(cfg, clips(), tmp_path / "full")
        part = tmp_path / "full" / "checkpoint_5.ckpt"
        resumed = T.train(cfg, clips(), tmp_path / "resumed", resume=part)
        assert sha(full) == sha(resumed)

    def test_resume_in_place_rewrites_the_report_tail(self, tmp_path):
        cfg = micro_config(schedule=ScheduleConfig(total_steps=12, warmup_steps=2), checkpoint_every=5)
        T.train(cfg, clips(), tmp_path / "ref")
        # simulate a crash at step 8: the report has rows past the last checkpoint
        crashed = tmp_path / "crashed"
        T.train(cfg, clips(), crashed)
        lines = (crashed / "report.csv").read_bytes().splitlines(keepends=True)
        (crashed / "report.csv").write_bytes(b"".join(lines[:9]))
        (crashed / "checkpoint.ckpt").unlink()
        T.train(cfg, clips(), crashed, resume=crashed / "checkpoint_5.ckpt")
        for name in ("report.csv", "checkpoint.ckpt"):
            assert sha(crashed / name) == sha(tmp_path / "ref" / name)

    def test_report_rows(self, tmp_path):
        cfg = micro_config(schedule=ScheduleConfig(total_steps=4, warmup_steps=1))
        T.train(cfg, clips(), tmp_path)
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert lines[0] == "step,loss,delta_t,a_min,a_max,lr"
        assert len(lines) == 5
        assert all(math.isfinite(float(r.split(",")[1])) for r in lines[1:])

    def test_resume_config_mismatch(self, tmp_path):
        cfg = micro_config(schedule=ScheduleConfig(total_steps=4, warmup_steps=1))
        ck = T.train(cfg, clips(), tmp_path / "a")
        with pytest.raises(ValueError):
            T.train(replace(cfg, seed=9), clips(), tmp_path / "b", resume=ck)

    def test_empty_corpus(self, tmp_path):
        with pytest.raises(ValueError):
            T.train(micro_config(), np.zeros((0, 64)), tmp_path)


class TestConfig:
    def test_round_trip(self):
        cfg = micro_config(seed=4)
        assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_keys(self):
        with pytest.raises(ValueError, match="bogus"):
            T.TrainConfig.from_dict({"bogus": 1})
        with pytest.raises(ValueError):
            T.TrainConfig.from_dict({"schedule": {"total_steps": 5, "nope": 0}})
        with pytest.raises(ValueError):
            T.TrainConfig.from_dict({"corpus": {"use_everything": True}})

    def test_env_seed(self, tmp_path, monkeypatch):
        path = tmp_path / "c.json"
        path.write_text('{"seed": 1}')
        monkeypatch.setenv("LINLAB_SEED", "42")
        assert T.load_config(path).seed == 42
        monkeypatch.delenv("LINLAB_SEED")
        assert T.load_config(path).seed == 1

    def test_shipped_desk_config(self):
        from pathlib import Path
        cfg = T.load_config(Path(__file__).parents[1] / "configs" / "desk.json")
        assert cfg.schedule.total_steps == 2000 and cfg.batch_size == 16
        assert cfg.model == M.ModelConfig()
