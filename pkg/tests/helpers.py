"""Small synthetic batches for loss and trainer tests."""

import numpy as np

from mralign import pyramid as pyr
from mralign.losses import Batch


def tiny_batch(rng, n_bags=2, levels=(5, 10), in_dim=32, vocab=64, max_len=6, hierarchical=True, n_keywords=(3, 7)):
    members = len(pyr.bag_members(pyr.PatchId(0, 0, 5), levels))
    N = members * n_bags

    def captions():
        lengths = rng.integers(0, max_len + 1, size=N)
        lengths[0] = max(lengths[0], 2)
        caps = np.full((N, max_len), -1, np.int64)
        for i, L in enumerate(lengths):
            caps[i, :L] = rng.choice(vocab, size=L, replace=False)
        return caps, lengths

    caps, lengths = captions()
    neg, neg_lengths = captions()
    keywords = [np.sort(rng.choice(vocab, size=rng.integers(*n_keywords), replace=False)) for _ in range(n_bags)]
    return Batch(
        pooled=rng.random((N, in_dim)).astype(np.float32),
        bag_size=members,
        keywords=keywords,
        captions=caps,
        lengths=lengths,
        neg_captions=neg,
        neg_lengths=neg_lengths,
        edges=pyr.bag_edges(levels, hierarchical),
        mask_rng_seed=(1, 2),
        prefix_rng_seed=(3, 4),
    )
