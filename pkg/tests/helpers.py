"""Shared builders for small float64 models used by several test modules."""

import numpy as np

from oracles import central_difference, rel_error
from wsss.model import BackboneConfig, Model, bce_with_logits


def tiny_config(pcm=False, grid=4, n_classes=3, in_channels=2):
    return BackboneConfig(in_channels=in_channels, widths=(3, 4, 5), strides=(2, 1, 1),
                          n_classes=n_classes, image_size=2 * grid, pcm=pcm, pcm_embed=3,
                          pcm_channels=4)


def tiny_model(seed, pcm=False, grid=4):
    """Random float64 model; biases are drawn too so no pre-activation sits exactly on a ReLU kink."""
    m = Model(tiny_config(pcm, grid), seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 1])
    for name, p in m.params.items():
        if name.endswith(".bias"):
            p[:] = rng.uniform(-0.1, 0.1, p.shape)
    return m


def fd_check(model, image, labels, n_probe=6, rng=None):
    """Worst relative error between analytic and central-difference grads.

    Probes ``n_probe`` entries of every parameter tensor (all entries of
    small ones) plus the same number of feature entries for one class score.
    """
    rng = rng or np.random.default_rng(0)

    def loss():
        out = model.forward(image[None], keep_cache=False)
        value, _ = bce_with_logits(out["scores"], labels[None])
        if model.has_pcm:
            value += bce_with_logits(out["pcm_scores"], labels[None])[0]
        return value

    _, grads = model.loss_and_grads(image[None], labels[None])
    worst = 0.0
    for name, p in model.params.items():
        flat = [np.unravel_index(i, p.shape) for i in range(p.size)]
        picks = flat if p.size <= n_probe else [flat[i] for i in rng.choice(p.size, n_probe, replace=False)]
        for idx in picks:
            num = central_difference(loss, p, idx)
            worst = max(worst, rel_error(float(grads[name][idx]), num))

    # feature gradient of one class score, perturbing F directly
    out = model.forward(image)
    F = out["F"].copy()
    s = int(rng.integers(model.config.n_classes))
    dF = model.grad_wrt_features(image, s, forward=out)
    w = model.params["head.weight"][:, :, 0, 0]
    b = model.params["head.bias"]

    def score():
        return float((np.einsum("c,chw->hw", w[s], F) + b[s]).mean())

    for k in rng.permutation(F.size)[:n_probe]:
        idx = np.unravel_index(int(k), F.shape)
        worst = max(worst, rel_error(float(dF[idx]), central_difference(score, F, idx)))
    return worst
