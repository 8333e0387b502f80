"""Class-specific heatmaps from a trained model: CAM, GradCAM, PCM and SEM.

All methods produce maps on the feature grid. Internal arithmetic runs in
float64 and the returned maps are float32.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T

METHODS = ("cam", "gradcam", "pcm", "sem")
DEFAULT_SEEDS = 10


@dataclass
class HeatmapSet:
    maps: np.ndarray
    method: str
    normalized: bool = True
    classes: tuple = ()

    @property
    def n_classes(self):
        return self.maps.shape[0]


@dataclass
class SeedSet:
    coords: list
    class_index: int = -1


def _finish(maps, method, classes, normalize):
    maps = np.asarray(maps, dtype=np.float64)
    if normalize:
        maps = T.minmax_normalize_channels(maps)
    return HeatmapSet(maps=maps.astype(np.float32), method=method,
                      normalized=normalize, classes=tuple(classes))


def _all(classes, n):
    return tuple(range(n)) if classes is None else tuple(int(c) for c in classes)


def weighted_sum(F, weights):
    """Sum over channels of ``weights[s, c] * F[c]`` -> ``S x h x w``."""
    F = np.asarray(F, dtype=np.float64)
    return np.einsum("sc,chw->shw", np.asarray(weights, dtype=np.float64), F)


def cam(out, classes=None, normalize=True):
    """CAM maps straight from a forward pass: the head's A, normalized per class."""
    A = np.asarray(out["A"], dtype=np.float64)
    return _finish(A, "cam", _all(classes, A.shape[0]), normalize)


def gradcam_weights(model, image, classes, out=None):
    """Per-class channel weights = spatial mean of d score_s / dF, one backward each."""
    if out is None:
        out = model.forward(image)
    C = out["F"].shape[0]
    weights = np.zeros((model.config.n_classes, C), dtype=np.float64)
    for s in classes:
        dF = model.grad_wrt_features(image, s, forward=out)
        weights[s] = dF.astype(np.float64).mean(axis=(1, 2))
    return weights


def gradcam(model, image, classes=None, normalize=True, out=None):
    """GradCAM: CAM combination with weights taken from mean feature gradients.

    No ReLU is applied to the combined map. Channels for classes outside
    ``classes`` are left at zero and no backward pass is spent on them.
    """
    classes = _all(classes, model.config.n_classes)
    if out is None:
        out = model.forward(image)
    weights = gradcam_weights(model, image, classes, out)
    maps = np.zeros((model.config.n_classes,) + out["F"].shape[1:])
    if classes:
        maps[list(classes)] = weighted_sum(out["F"], weights[list(classes)])
    return _finish(maps, "gradcam", classes, normalize)


def pcm_attention(K, relu_normalize=False):
    """Cosine similarity between all spatial positions of ``K`` (``C x h x w``)."""
    K = np.asarray(K, dtype=np.float64)
    attn = T.cosine_matrix(K.reshape(K.shape[0], -1))
    if relu_normalize:
        attn = np.maximum(attn, 0)
        rows = attn.sum(axis=1, keepdims=True)
        attn = attn / np.where(rows > 0, rows, 1)
    return attn


def pcm_propagate(K, A, relu_normalize=False):
    """``P[s, q] = sum_r attn[q, r] * A[s, r]`` on the shared grid, unnormalized."""
    K = np.asarray(K, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if K.shape[1:] != A.shape[1:]:
        raise ValueError(f"PCM grid mismatch: K {K.shape} vs A {A.shape}")
    attn = pcm_attention(K, relu_normalize)
    S = A.shape[0]
    P = A.reshape(S, -1) @ attn.T
    return P.reshape(A.shape)


def pcm_refine(model, low, F, image, A, normalize=True, relu_normalize=False, classes=None):
    """Refine raw CAMs with the model's PCM branch.

    ``low`` is the stage-1 activation, ``F`` the final features and ``image``
    the input; the branch pools ``low`` and ``image`` to the feature grid.
    """
    if not model.has_pcm:
        raise ValueError("model has no PCM branch")
    F = np.asarray(F, dtype=model.dtype)
    if np.shape(A)[1:] != F.shape[1:]:
        raise ValueError(f"PCM grid mismatch: A {np.shape(A)} vs F {F.shape}")
    K, _ = model.pcm_features(np.asarray(image, dtype=model.dtype)[None],
                              np.asarray(low, dtype=model.dtype)[None], F[None])
    P = pcm_propagate(K[0], A, relu_normalize)
    return _finish(P, "pcm", _all(classes, P.shape[0]), normalize)


def pcm(model, image, out=None, classes=None, normalize=True, relu_normalize=False):
    """PCM heatmaps for one image, reusing the forward pass when given."""
    if out is None:
        out = model.forward(image)
    if "K" not in out:
        return pcm_refine(model, out["low"], out["F"], image, out["A"], normalize,
                          relu_normalize, classes)
    P = pcm_propagate(out["K"], out["A"], relu_normalize)
    return _finish(P, "pcm", _all(classes, P.shape[0]), normalize)


def pcm_scores(P):
    """Image-level PCM probabilities: sigmoid of the spatial mean of each map."""
    maps = P.maps if isinstance(P, HeatmapSet) else P
    return T.sigmoid(T.global_avg_pool(np.asarray(maps, dtype=np.float64)))


def top_e_seeds(A_s, E, class_index=-1):
    """Coordinates of the ``E`` largest values; equal values keep row-major order."""
    A_s = np.asarray(A_s)
    h, w = A_s.shape
    if not 1 <= E <= h * w:
        raise ValueError(f"seed count E={E} must lie in [1, {h * w}]")
    order = np.argsort(-A_s.ravel(), kind="stable")[:E]
    return SeedSet(coords=[(int(i // w), int(i % w)) for i in order], class_index=class_index)


def seed_similarity(F, seeds):
    """Pixelwise max over the cosine maps of each seed's feature column."""
    F = np.asarray(F, dtype=np.float64)
    C, h, w = F.shape
    Fn, _ = T.normalize_columns(F.reshape(C, -1))
    idx = [r * w + c for r, c in seeds.coords]
    sims = Fn[:, idx].T @ Fn
    return sims.max(axis=0).reshape(h, w)


def sem(A, F, E=DEFAULT_SEEDS, classes=None, normalize=True):
    """Self-enhancement maps: top-E seeds from each A_s, cosine max-pooled over seeds."""
    A = np.asarray(A, dtype=np.float64)
    if A.shape[1:] != np.shape(F)[1:]:
        raise ValueError(f"SEM grid mismatch: A {A.shape} vs F {np.shape(F)}")
    classes = _all(classes, A.shape[0])
    maps = np.zeros(A.shape)
    for s in classes:
        maps[s] = seed_similarity(F, top_e_seeds(A[s], E, s))
    return _finish(maps, "sem", classes, normalize)


def explain(method, model, image, classes=None, E=DEFAULT_SEEDS, out=None):
    """Normalized heatmaps for one image with the named method."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "gradcam":
        return gradcam(model, image, classes, out=out)
    if out is None:
        out = model.forward(image)
    if method == "cam":
        return cam(out, classes)
    if method == "pcm":
        return pcm(model, image, out, classes)
    return sem(out["A"], out["F"], E, classes)
