"""Independent reference computations shared by the tests."""

import math

import torch


def central_fd_check(loss_fn, params, h=1e-6):
    """Relative error between autograd and central finite differences over all parameters."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=analytic.dtype)
    return float((analytic - numeric).norm() / max(analytic.norm(), numeric.norm()))


def implied_noise(z, target, a_t):
    return (z - math.sqrt(a_t) * target) / math.sqrt(1 - a_t)


def chain_oracle(key, nsched, mix_target, z_i0, z_w0):
    """Noise predictor that knows the clean targets of each chain."""

    def predict(z_a, z_w, t, branch):
        assert branch == key.bit(t)
        a = nsched.a[t]
        target = mix_target if key.bit(t) else z_i0
        return implied_noise(z_a, target, a), implied_noise(z_w, z_w0, a)

    return predict


def simulate_forward(z_i, z_w, injected, nsched, inj, gen):
    """Step-by-step branch table for one watermark, written out longhand."""
    mix, clean, wm = z_i.clone(), z_i.clone(), z_w.clone()
    bits = []
    for t in range(1, nsched.T + 1):
        r = math.sqrt(nsched.a[t] / nsched.a[t - 1])
        k = math.sqrt(1 - r * r)
        e = torch.randn(z_i.shape, generator=gen, dtype=z_i.dtype)
        e_w = torch.randn(z_i.shape, generator=gen, dtype=z_i.dtype)
        if t in injected:
            mix = r * inj(clean, wm) + k * e
            bits.append(1)
        else:
            clean = r * clean + k * e
            mix = clean
            bits.append(0)
        wm = r * wm + k * e_w
    return mix, clean, wm, bits
