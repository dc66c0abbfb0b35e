"""The multiplicative gate on two toy activation maps.

Run with ``python demos/gate_walkthrough.py``.
"""
import numpy as np

from migate import tensor as T
from migate.gate import MIGateParams, mi_backward_closed_form, mi_forward

T.set_precision("f64")
rng = np.random.default_rng(0)

# two 3x3 maps with 4 channels, one per camera
D = 4
gA = rng.normal(size=(3, 3, D))
gB = rng.normal(size=(3, 3, D))

# linear mode with P = I and no embedding biases: the fused map is (gA U) * (gB V)
params = MIGateParams.init(D, mode="linear", rng=rng)
params.P.data[...] = np.eye(D)
F = mi_forward(T.constant(gA), T.constant(gB), params)
manual = (gA @ params.U.data) * (gB @ params.V.data)
print("fused map shape", F.shape, "matches hand product:", np.allclose(F.data, manual))

# a location where camera B sees nothing contributes nothing, whatever camera A sees
gB_blank = gB.copy()
gB_blank[1, 1] = 0.0
F_blank = mi_forward(T.constant(gA), T.constant(gB_blank), params)
print("blank location output", F_blank.data[1, 1])

# gradients: hand-derived vs reverse mode
G = rng.normal(size=F.shape)
a, b = T.parameter(gA), T.parameter(gB)
T.total(T.hadamard(mi_forward(a, b, params), T.constant(G))).backward()
dA, dB, _ = mi_backward_closed_form(gA, gB, params, G)
print("closed-form dA max diff", np.abs(dA - a.grad).max())
print("closed-form dB max diff", np.abs(dB - b.grad).max())

# gated mode squashes both embeddings into (0, 1) before the product
gated = MIGateParams.init(D, mode="gated", rng=rng)
print("gated output range", mi_forward(T.constant(gA), T.constant(gB), gated).data.min().round(3),
      mi_forward(T.constant(gA), T.constant(gB), gated).data.max().round(3))
