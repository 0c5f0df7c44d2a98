"""The twelve acceptance criteria, one test each; a PASS/FAIL line per criterion is printed
in the terminal summary."""

import itertools
import time

import numpy as np
import pytest
import torch

from conftest import CALIBRATION, HELD_OUT, criterion
from oracles import central_fd_check, chain_oracle
from safemark import evalharness as ev
from safemark import pipeline
from safemark.autoencoder import WatermarkAutoencoder, emit_straight_through, stage1_loss
from safemark.diffuser import Denoiser, forward_diffuse, invert_denoise, plain_diffuse, stage2_loss
from safemark.scheduler import (LambdaSchedule, key_compose, key_readout, keys_disjoint, lambda_sample,
                                make_noise_schedule, partition)
from safemark.trigger import (USER_TOKEN, RegistryEntry, TriggerRegistry, select_by_embedding, trigger_select)

D64 = torch.float64


def quantized(img):
    return emit_straight_through(img).detach()


def pairs(toy, n, offset):
    """n held-out images, each paired with a registry watermark (cycled)."""
    idx = [k % len(toy.ids) for k in range(n)]
    return ev.EvalSet(toy.held_out(n, offset), toy.wms[idx], [toy.ids[k] for k in idx],
                      pipeline.prompts_for([toy.ids[k] for k in idx]))


def test_01_key_protocol():
    with criterion(1, "key protocol round-trip, popcount == lambda") as notes:
        start = time.perf_counter()
        for k in range(5):
            for subset in itertools.combinations(range(1, 5), k):
                s = LambdaSchedule(4, subset)
                m = key_compose(s.flags(), 4)
                assert key_readout(m) == s and m.popcount == k
        rng = np.random.default_rng(0)
        for _ in range(1000):
            lam = int(rng.integers(0, 51))
            s = lambda_sample(50, lam, rng)
            m = key_compose(s.flags(), 50)
            assert key_readout(m) == s and m.popcount == lam
        elapsed = time.perf_counter() - start
        notes.append(f"{elapsed:.3f} s")
        assert elapsed < 1.0


def test_02_sampler_exactness():
    with criterion(2, "sampler exactness over all 16 keys at T=4") as notes:
        start = time.perf_counter()
        ns = make_noise_schedule(4)
        g = torch.Generator().manual_seed(0)
        z_i = torch.randn(1, 4, 8, 8, generator=g, dtype=D64)
        z_w = torch.randn(1, 4, 8, 8, generator=g, dtype=D64)
        W = torch.randn(4, 8, generator=g, dtype=D64) * 0.4
        inj = lambda a, b: torch.einsum("oc,bchw->bohw", W, torch.cat([a, b], 1))
        mix = inj(z_i, z_w)
        worst = 0.0
        for bits in itertools.product((0, 1), repeat=4):
            sched = LambdaSchedule(4, tuple(t for t, b in enumerate(bits, 1) if b))
            _, key, st = forward_diffuse(z_i, z_w, sched, ns, inj, torch.Generator().manual_seed(1),
                                         return_state=True)
            m, i, w = invert_denoise(st.zT_m, st.zT_i, st.zT_w[0], key, None,
                                     chain_oracle(key, ns, mix, z_i, z_w), ns)
            target_m = mix if key.popcount else z_i
            worst = max(worst, float((m - target_m).abs().max()), float((i - z_i).abs().max()),
                        float((w - z_w).abs().max()))
        elapsed = time.perf_counter() - start
        notes.append(f"max err {worst:.2e}, {elapsed:.2f} s")
        assert worst < 1e-5 and elapsed < 10.0


def test_03_lambda_zero_degeneracy(toy):
    with criterion(3, "lambda=0 degeneracy (forward oracle and generate)") as notes:
        ns = make_noise_schedule(50)
        z_i, z_w = torch.randn(4, 4, 8, 8), torch.randn(4, 4, 8, 8)
        zT, key = forward_diffuse(z_i, z_w, LambdaSchedule(50, ()), ns, toy.models.inject,
                                  torch.Generator().manual_seed(7))
        assert torch.equal(zT, plain_diffuse(z_i, ns, torch.Generator().manual_seed(7))) and key.popcount == 0
        x = toy.held_out(4)
        w = toy.wms[:4]
        cond = pipeline.text_conditions(pipeline.prompts_for(toy.ids[:4]))
        cfg = toy.cfg.replace(lam=0)
        out = pipeline.watermark_batch(x, [w], toy.models, cfg, cond=cond, seed=11).images
        ref = pipeline.reconstruct_unwatermarked(x, w, toy.models, cfg, cond=cond, seed=11)
        notes.append(f"max |diff| {float((out - ref).abs().max()):.1e}")
        assert torch.equal(out, ref)


def test_04_gradient_checks():
    with criterion(4, "finite-difference gradient checks (stage-1 and stage-2 losses)") as notes:
        torch.manual_seed(0)
        ae = WatermarkAutoencoder(d=2, f=2, channels=(4,), n_res=0, groups=2).double()
        params = ae.trainable_parameters()
        assert sum(p.numel() for p in params) <= 1000
        g = torch.Generator().manual_seed(1)
        x = torch.rand(2, 3, 4, 4, generator=g, dtype=D64) * 2 - 1
        w = torch.rand(2, 3, 4, 4, generator=g, dtype=D64) * 2 - 1

        def loss1():
            zm = ae.inject(ae.encode(x), ae.encode(w))
            return stage1_loss(x, w, ae.decode_image(zm), ae.decode_watermark(zm), gamma=1.0).total

        e1 = central_fd_check(loss1, params)
        p = Denoiser(2, channels=(2,), text_dim=2, emb_dim=4, groups=1, zero_out=False).double()
        params2 = list(p.parameters())
        assert sum(q.numel() for q in params2) <= 1000
        ns = make_noise_schedule(50)
        g = torch.Generator().manual_seed(2)
        batch = {"z_i": torch.randn(3, 2, 2, 2, generator=g, dtype=D64),
                 "z_w": torch.randn(3, 2, 2, 2, generator=g, dtype=D64),
                 "t": torch.tensor([1, 25, 50]), "m": torch.tensor([1, 0, 1]),
                 "c": torch.randn(3, 2, generator=g, dtype=D64),
                 "eps": torch.randn(3, 4, 2, 2, generator=g, dtype=D64)}
        drop = torch.tensor([False, True, False])
        e2 = central_fd_check(lambda: stage2_loss(batch, p, ns, inj=lambda a, b: a + 0.5 * b, drop=drop).total,
                              params2)
        notes.append(f"rel err {e1:.1e} / {e2:.1e}")
        assert e1 < 1e-4 and e2 < 1e-4


def test_05_marginal_preservation():
    with criterion(5, "marginal variance of the fully diffused latent") as notes:
        ns = make_noise_schedule(1000)
        z0 = torch.randn(10_000, generator=torch.Generator().manual_seed(0), dtype=D64)
        zT = plain_diffuse(z0, ns, torch.Generator().manual_seed(1))
        var = float(zT.var())
        notes.append(f"var {var:.4f}")
        assert abs(var - 1.0) <= 0.05


@torch.no_grad()
def test_06_toy_quality(toy):
    with criterion(6, "toy end-to-end quality") as notes:
        data = pairs(toy, 64, HELD_OUT)
        ae = toy.models.ae
        zm = ae.inject(ae.encode(data.images), ae.encode(data.wms))
        recon = ev.psnr(ae.decode_image(zm), data.images)
        wm_stage1 = ev.psnr(ae.decode_watermark(zm), data.wms)
        marked, _ = ev.watermark_set(toy.models, data, toy.cfg)
        wm_full = ev.psnr(pipeline.extract_watermark(quantized(marked), ae), data.wms)
        minutes = toy.train_seconds / 60
        notes.append(f"recon {recon:.2f} dB, wm stage-1 {wm_stage1:.2f} dB, wm diffusion {wm_full:.2f} dB, "
                     f"training {minutes:.1f} min")
        assert recon >= 25.0
        assert wm_stage1 >= 20.0
        assert wm_full >= 15.0
        assert minutes <= 180


@torch.no_grad()
def test_07_detection_calibration(toy, registry):
    with criterion(7, "detection calibration on 200 + 200") as notes:
        ae = toy.models.ae
        cal = pairs(toy, 50, CALIBRATION)
        cal_marked, _ = ev.watermark_set(toy.models, cal, toy.cfg, seed=100)
        pos_cal = ev.detect_batch(quantized(cal_marked), registry, ae, 0.0)
        neg_cal = ev.detect_batch(toy.held_out(50, CALIBRATION + 500), registry, ae, 0.0)
        tau = ev.calibrate_threshold([d.score for d in pos_cal], [d.score for d in neg_cal])
        test = pairs(toy, 200, HELD_OUT)
        marked, _ = ev.watermark_set(toy.models, test, toy.cfg, seed=200)
        pos = ev.detect_batch(quantized(marked), registry, ae, tau)
        neg = ev.detect_batch(toy.held_out(200, HELD_OUT + 1000), registry, ae, tau)
        tpr, fpr = ev.rates(pos, neg, test.wm_ids)
        notes.append(f"tau {tau:.2f} dB, TPR {tpr:.3f}, FPR {fpr:.3f}")
        assert tpr >= 0.95 and fpr <= 0.05


@torch.no_grad()
def test_08_robustness_ordering(toy, registry, tmp_path):
    with criterion(8, "robustness ordering (combined attack is the minimum)") as notes:
        data = pairs(toy, 50, HELD_OUT + 3000)
        cal = pairs(toy, 50, CALIBRATION)
        cal_marked, _ = ev.watermark_set(toy.models, cal, toy.cfg, seed=100)
        tau = ev.calibrate_threshold(
            [d.score for d in ev.detect_batch(quantized(cal_marked), registry, toy.models.ae, 0.0)],
            [d.score for d in ev.detect_batch(toy.held_out(50, CALIBRATION + 500), registry, toy.models.ae, 0.0)])
        rows = ev.robustness_suite(toy.models, data, registry, toy.cfg, tau, out=tmp_path)
        by = {r["attack"]: r for r in rows}
        notes.append(", ".join(f"{r['attack']} {r['psnr']:.2f}" for r in rows))
        notes.append(f"detect rotate90 {by['rotate90']['detection_rate']:.2f} vs combined "
                     f"{by['combined']['detection_rate']:.2f}")
        combined = by["combined"]["psnr"]
        assert all(combined <= r["psnr"] for r in rows)
        assert by["rotate90"]["detection_rate"] >= by["combined"]["detection_rate"]


def test_09_gamma_ordering(toy, tmp_path):
    with criterion(9, "gamma study ordering of watermark-loss ratios") as notes:
        rows = ev.sweep_gamma(toy.base, toy.images, toy.wms, toy.cfg, steps=600, out=tmp_path)
        ratio = {r["gamma"]: r["ratio"] for r in rows}
        notes.append(", ".join(f"gamma {g:g}: {r:.4f}" for g, r in ratio.items()))
        assert ratio[1.0] <= ratio[0.1] <= ratio[0.01]


def test_10_trigger_properties():
    with criterion(10, "trigger: scaling invariance, [U] override, tie-breaking") as notes:
        rng = np.random.default_rng(0)
        img = torch.zeros(3, 8, 8)
        for _ in range(1000):
            n, k = int(rng.integers(1, 8)), int(rng.integers(2, 16))
            entries = tuple(RegistryEntry(f"id{j}", img, rng.standard_normal(k)) for j in range(n))
            reg = TriggerRegistry(entries, rng.standard_normal((k, k)))
            e = rng.standard_normal(k)
            assert select_by_embedding(e, reg) == select_by_embedding(float(rng.uniform(1e-3, 1e3)) * e, reg)
        user = torch.ones(3, 8, 8)
        words = ["a", "photo", "church", "with", "my", "avatar", "watermark", "[V]", "logo"]
        for _ in range(200):
            toks = list(rng.choice(words, size=int(rng.integers(0, 6))))
            toks.insert(int(rng.integers(0, len(toks) + 1)), USER_TOKEN)
            n = int(rng.integers(1, 5))
            reg = TriggerRegistry(tuple(RegistryEntry(f"id{j}", img, rng.standard_normal(64)) for j in range(n)))
            out, wid = trigger_select(" ".join(toks), reg, user)
            assert wid == "user" and out is user
        for _ in range(200):
            ids = [f"w{j}" for j in rng.permutation(6)]
            emb = rng.standard_normal(8)
            entries = tuple(RegistryEntry(i, img, emb.copy()) for i in ids)
            reg = TriggerRegistry(entries, np.eye(8))
            assert select_by_embedding(rng.standard_normal(8), reg) == "w0"
        notes.append("1000 scaling cases, 200 override cases, 200 tie cases")


@torch.no_grad()
def test_11_multi_watermark(toy):
    with criterion(11, "two disjointly partitioned watermarks") as notes:
        x = toy.held_out(16, HELD_OUT + 5000)
        w1 = toy.wms[torch.arange(16) % len(toy.ids)]
        w2 = toy.wms[(torch.arange(16) + 7) % len(toy.ids)]
        full = lambda_sample(50, 10, np.random.default_rng(3))
        parts = partition(full, 2, np.random.default_rng(4))
        assert [p.lam for p in parts] == [5, 5]
        res = ev.multi_watermark_run(x, [w1, w2], toy.cfg, toy.models, cond=pipeline.PROMPT_TEMPLATE.format(wid="pair"),
                                     schedules=parts, seed=5)
        assert keys_disjoint(res.keys)
        notes.append(f"keyed readout {res.psnrs[0]:.2f} / {res.psnrs[1]:.2f} dB, "
                     f"pixel path {res.pixel_psnrs[0]:.2f} / {res.pixel_psnrs[1]:.2f} dB")
        assert min(res.psnrs) >= 15.0


def test_12_cli_reproducibility(tmp_path, monkeypatch):
    from cli_flow import cli_flow

    with criterion(12, "CLI byte reproducibility across two sequential runs") as notes:
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
        a = cli_flow(tmp_path / "run1", seed=3)
        b = cli_flow(tmp_path / "run2", seed=3)
        assert a.keys() == b.keys()
        differ = [k for k in a if a[k] != b[k]]
        notes.append(f"{len(a)} files compared, {len(differ)} differ")
        assert not differ, differ
