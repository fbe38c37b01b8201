# %% [markdown]
# # One normalization layer, several input domains
#
# A gated block keeps one set of BN statistics per domain. During training
# the domain label picks the branch; at inference a small gate network
# guesses the domain and mixes the branch outputs.

# %%
import numpy as np

from gbnlab import autodiff as ad
from gbnlab.data import synth_blobs
from gbnlab.gbn import FcGate, GatedBatchNorm, GatingMode, domain_prediction_loss, forced, gate_predict
from gbnlab.layers import LayerMode
from gbnlab.train import sgd_step

rng = np.random.default_rng(0)
block = GatedBatchNorm(channels=3, num_branches=2, gate=FcGate(3, 2, hidden=16, rng=rng))

clean = rng.normal(0.0, 1.0, (256, 3))
shifted = rng.normal(2.0, 0.5, (256, 3))  # a second domain with other statistics
for _ in range(30):
    block(ad.Tensor(clean[rng.choice(256, 32)]), LayerMode.TRAIN, domain=0)
    block(ad.Tensor(shifted[rng.choice(256, 32)]), LayerMode.TRAIN, domain=1)

for k, br in enumerate(block.branches):
    print(f"branch {k}: running mean {br.running_mean.round(2)}  batches {br.num_batches_seen}")

# %% [markdown]
# Each branch only ever saw its own domain. Now fit the gate on the two
# domains and compare the three inference modes.

# %%
gate = block.gate
for step in range(200):
    feats = [(clean[rng.choice(256, 32)], 0), (shifted[rng.choice(256, 32)], 1)]
    loss = domain_prediction_loss(feats, [gate])
    gate.zero_grad()
    ad.backward(loss)
    sgd_step(gate.parameters(), 0.1)
print("gate loss", round(loss.item(), 4))

x = ad.Tensor(shifted[:5])
for mode in (GatingMode("soft"), GatingMode("hard"), forced(0), forced(1)):
    block.set_gating(mode)
    out = block(x, LayerMode.EVAL).data
    print(f"{str(mode):>9}: mean of normalized output {out.mean():+.3f}")
block.set_gating(GatingMode("soft"))

# %% [markdown]
# Forcing the clean branch onto shifted inputs leaves them much further
# from zero mean than the matching branch does. Soft and hard gating both
# land on the matching branch without being told the domain.
#
# The same gate architecture separates Gaussian blobs easily:

# %%
blobs = synth_blobs(4, 200, 16, 6.0, seed=0)
held_out = synth_blobs(4, 200, 16, 6.0, seed=1)
blob_gate = FcGate(16, 4, hidden=64, rng=rng)
for step in range(300):
    idx = rng.choice(len(blobs), 64, replace=False)
    feats = [(blobs.images[idx][blobs.labels[idx] == k], k) for k in range(4)]
    loss = domain_prediction_loss([f for f in feats if len(f[0])], [blob_gate])
    blob_gate.zero_grad()
    ad.backward(loss)
    sgd_step(blob_gate.parameters(), 0.1)
pred = gate_predict(held_out.images, blob_gate).data.argmax(axis=1)
print("held-out blob accuracy", (pred == held_out.labels).mean())
