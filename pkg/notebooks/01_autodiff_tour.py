#!/usr/bin/env python3
# %% [markdown]
# # The autodiff core
#
# Ops run eagerly on float64 arrays. Inside a `Tape` each op also records a
# closure that maps the output gradient to its parents' gradients, and
# `tape.backward` walks the record in reverse.

# %%
import numpy as np

from rdn import autodiff as ad
from rdn.layers import AdditiveAttentionParams, additive_attention

rng = np.random.default_rng(0)

# %% [markdown]
# A least-squares loss, differentiated by hand and by the tape.

# %%
X = rng.normal(size=(5, 3))
y = rng.normal(size=(5, 1))
w = ad.parameter(rng.normal(size=(3, 1)), name="w")

with ad.Tape() as tape:
    r = X @ w - y
    loss = ad.tsum(r * r)
g = tape.backward(loss, [w])[w]

by_hand = 2 * X.T @ (X @ w.data - y)
print("loss", loss.item())
print("tape gradient  ", g.ravel())
print("closed form    ", by_hand.ravel())

# %% [markdown]
# `grad_check` perturbs every coordinate and compares against central
# differences. The probes run in extended precision so that tiny gradients
# aren't swamped by float64 roundoff in the loss.

# %%
res = ad.grad_check(lambda: ad.tsum((X @ w - y) * (X @ w - y)), {"w": w})
print("max relative error", res.max_error)

# %% [markdown]
# The same attention primitive serves both the image regions and the
# decoder's own history. The weights form a simplex over the keys.

# %%
att = AdditiveAttentionParams.init(rng, key_dim=4, query_dim=3, att_dim=5, prefix="att", scale=1.0)
keys = rng.normal(size=(6, 4))
query = rng.normal(size=(3,))
alpha, context = additive_attention(att, query, keys)
print("weights", np.round(alpha.data, 3), "sum", alpha.data.sum())
print("context", np.round(context.data, 3))

# %%
# one key gets all the weight
alpha1, ctx1 = additive_attention(att, query, keys[:1])
print(alpha1.data, np.allclose(ctx1.data, keys[0]))
