"""Registering watermarks, prompt-driven selection and the [U] override.

Run: python demos/trigger_registry.py
"""

import numpy as np

from safemark.corpus import synth_watermarks
from safemark.trigger import (TriggerRegistry, fit_trigger, register_watermark, trigger_probabilities,
                              trigger_select)

wms = synth_watermarks(3, seed=0)
reg = TriggerRegistry()
for wid, w in zip(["acme", "blue-bird", "zeta"], wms):
    reg = register_watermark(reg, wid, w)
print("registry:", reg.ids)

# with the identity trigger map the choice is arbitrary but deterministic
prompt = "a church at sunset with the acme logo [V]"
print("before fit:", trigger_select(prompt, reg)[1])

# fit the linear trigger layer on a handful of supervised pairs
pairs = [("a photo with the acme logo", "acme"), ("acme watermark on a street", "acme"),
         ("a bird logo in blue", "blue-bird"), ("blue bird watermark", "blue-bird"),
         ("zeta mark on a portrait", "zeta"), ("a zeta logo", "zeta")]
reg, losses = fit_trigger(reg, pairs, steps=200)
print(f"trigger loss {losses[0]:.3f} -> {losses[-1]:.3f}")
print("after fit:", trigger_select(prompt, reg)[1])
print({k: round(v, 3) for k, v in trigger_probabilities(prompt, reg).items()})

# [U] always wins over the registry when a user watermark is supplied
user = wms[0] * 0
w, wid = trigger_select("my avatar with my own mark [U]", reg, user_wm=user)
print("override:", wid, bool((w == user).all()))
assert np.isclose(sum(trigger_probabilities(prompt, reg).values()), 1.0)
