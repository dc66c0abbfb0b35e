"""Which input cells can move which output cells.

One four-direction recurrent layer sees a cross (its own row and column);
two stacked layers see the whole grid; two 3x3 convolutions see a 5x5 window.
Run with ``python demos/receptive_field.py``.
"""
import numpy as np

from migate import tensor as T
from migate.context import IRNNLayerParams, four_dir_layer, stacked_conv_context, stacked_irnn_pool

T.set_precision("f64")
rng = np.random.default_rng(0)
K = 7


def positive_layer(prefix):
    # positive weights keep every ReLU open so influence is easy to read off
    layer = IRNNLayerParams.init(1, 2, 1, rng, prefix)
    layer.W_in.data[...] = 1.0
    layer.W_mix.data[...] = 1.0
    return layer


def influence(f, cell):
    x = np.full((K, K, 1), 0.5)
    bumped = x.copy()
    bumped[cell] += 1.0
    return (np.abs(f(bumped) - f(x)).max(axis=-1) > 1e-9).astype(int)


l1, l2 = positive_layer("a"), positive_layer("b")
kernels = [(T.constant(np.ones((3, 3, 1, 1))), T.constant(np.zeros(1))) for _ in range(2)]

print("one recurrent layer, input bumped at (3, 3)")
print(influence(lambda v: four_dir_layer(T.constant(v), l1).data, (3, 3, 0)))
print("two recurrent layers")
print(influence(lambda v: stacked_irnn_pool(T.constant(v[None]), l1, l2, training=False).data[0], (3, 3, 0)))
print("two 3x3 convolutions")
print(influence(lambda v: stacked_conv_context(T.constant(v[None]), kernels).data[0], (3, 3, 0)))
