"""Full model against two ablations on the synthetic two-camera data.

The identities are pairs of glyphs whose placement drifts between cameras, so
matching needs the relation between regions rather than where they sit.
Each variant is trained with the same budget and evaluated by single-shot
rank-1 on held-out images. Takes a few minutes per variant on one core.

    python demos/ablation.py [seed]
"""
import sys
import time

import numpy as np

from migate import tensor as T
from migate.encoder import ConvSpec, EncoderConfig
from migate.model import MatchingModel, ModelConfig
from migate.synthetic import SyntheticSpec, make_pair_dataset
from migate.train import TrainConfig, evaluate, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
T.set_precision("f32")

data = make_pair_dataset(SyntheticSpec(seed=seed, image_size=32, max_translation=8, noise=0.0)).dataset
print(f"{len(data)} images, {len(np.unique(data.identities))} identities")

enc = EncoderConfig((32, 32, 3), (ConvSpec(3, 2, 16), ConvSpec(3, 2, 32), ConvSpec(3, 1, 16)), K=8, D=16)
variants = {
    "full (gate + recurrent context)": dict(fusion="mi", context="irnn2"),
    "global average context": dict(fusion="mi", context="global_avg"),
    "concatenation instead of gate": dict(fusion="concat", context="irnn2"),
}
for name, kw in variants.items():
    cfg = ModelConfig(encoder=enc, hidden=32, mid_channels=32, embed_dim=64, dropout=0.0, **kw)
    model = MatchingModel(cfg, seed=seed)
    t0 = time.time()
    res = train(model, data, TrainConfig(lr=0.03, epochs=60, batch_size=32, patience=15, decay_after=5,
                                         seed=seed, augment_flip=False, augment_shift=False))
    model.load_state(res.best_state)
    cmc, mAP = evaluate(model, data.subset("test"), trials=10, seed=seed)
    print(f"{name:<34s} rank-1 {cmc.mean(0)[0]:.3f}  rank-5 {cmc.mean(0)[4]:.3f}  mAP {mAP:.3f}  "
          f"({res.state.epoch} epochs, {time.time() - t0:.0f}s)")
