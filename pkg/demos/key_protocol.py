"""Walkthrough of the keyed forward chain and its inversion, no training needed.

Run: python demos/key_protocol.py
"""

import numpy as np
import torch

from safemark.diffuser import forward_diffuse, invert_denoise, plain_diffuse
from safemark.scheduler import key_compose, key_readout, lambda_sample, make_noise_schedule

T, lam = 12, 4
ns = make_noise_schedule(T)
print("signal coefficients a_t:", np.round(ns.a, 4))

# pick lam of the T steps for injection; the key is the bitmask of that choice
sched = lambda_sample(T, lam, np.random.default_rng(0))
key = key_compose(sched.flags(), T)
print("injected steps:", sched.injected, "key:", key, "popcount:", key.popcount)
assert key_readout(key) == sched

# a fixed linear mixing layer stands in for the trained injection conv
g = torch.Generator().manual_seed(0)
z_img = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
z_wm = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
W = torch.randn(4, 8, generator=g, dtype=torch.float64) * 0.4
inj = lambda a, b: torch.einsum("oc,bchw->bohw", W, torch.cat([a, b], 1))

zT, key, state = forward_diffuse(z_img, z_wm, sched, ns, inj, torch.Generator().manual_seed(1), return_state=True)
print("|zT| =", float(zT.norm()))

# an oracle noise predictor knows the clean target of every chain; with it the
# reverse pass lands back on the injected mixture exactly
mix = inj(z_img, z_wm)


def oracle(z_a, z_w, t, branch):
    a = ns.a[t]
    target = mix if key.bit(t) else z_img
    return (z_a - a ** 0.5 * target) / (1 - a) ** 0.5, (z_w - a ** 0.5 * z_wm) / (1 - a) ** 0.5


z_m, z_i, z_w = invert_denoise(state.zT_m, state.zT_i, state.zT_w[0], key, None, oracle, ns)
print("mixture error", float((z_m - mix).abs().max()))
print("image chain error", float((z_i - z_img).abs().max()))
print("watermark chain error", float((z_w - z_wm).abs().max()))

# with no injected steps the keyed chain is ordinary diffusion, bit for bit
empty = lambda_sample(T, 0, np.random.default_rng(0))
zT0, _ = forward_diffuse(z_img, z_wm, empty, ns, inj, torch.Generator().manual_seed(5))
print("lambda=0 equals plain diffusion:", torch.equal(zT0, plain_diffuse(z_img, ns, torch.Generator().manual_seed(5))))
