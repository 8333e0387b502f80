"""Small multi-label CNN with a CAM head and an optional pixel-correlation branch.

Everything is hand-differentiated: :meth:`Model.backward` pushes gradients of
the pooled class scores (and, when present, of the PCM branch scores) through
the head, the branch and the backbone.
"""

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from . import wsst

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    in_channels: int = 4
    widths: tuple = (16, 32, 64)
    strides: tuple = (2, 2, 2)
    kernel: int = 3
    n_classes: int = 5
    image_size: int = 64
    pcm: bool = False
    pcm_embed: int = 16
    pcm_channels: int = 32

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ValueError("widths and strides must be non-empty and of equal length")
        if any(w < 1 for w in self.widths) or self.n_classes < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.feature_channels < self.n_classes:
            raise ValueError(
                f"feature channels ({self.feature_channels}) must be >= class count ({self.n_classes})"
            )
        if self.feature_size < 4:
            raise ValueError(
                f"image size {self.image_size} gives a {self.feature_size}x{self.feature_size} "
                "feature grid; need at least 4x4"
            )
        if self.image_size % self.feature_size or self.stage_size(0) % self.feature_size:
            raise ValueError("image and stage-1 grids must be integer multiples of the feature grid")

    @property
    def feature_channels(self):
        return self.widths[-1]

    def stage_size(self, i):
        size = self.image_size
        pad = self.kernel // 2
        for s in self.strides[: i + 1]:
            size = T.conv_output_size(size, self.kernel, s, pad)
        return size

    @property
    def feature_size(self):
        return self.stage_size(len(self.widths) - 1)

    def layer_shapes(self):
        """Ordered ``name -> shape`` for every trainable tensor."""
        shapes = {}
        c_in = self.in_channels
        for i, w in enumerate(self.widths):
            shapes[f"stage{i + 1}.weight"] = (w, c_in, self.kernel, self.kernel)
            shapes[f"stage{i + 1}.bias"] = (w,)
            c_in = w
        c = self.feature_channels
        shapes["head.weight"] = (self.n_classes, c, 1, 1)
        shapes["head.bias"] = (self.n_classes,)
        if self.pcm:
            d = self.pcm_embed
            for name, cin in (("low", self.widths[0]), ("high", c), ("image", self.in_channels)):
                shapes[f"pcm.{name}.weight"] = (d, cin, 1, 1)
                shapes[f"pcm.{name}.bias"] = (d,)
            shapes["pcm.fuse.weight"] = (self.pcm_channels, 3 * d, 1, 1)
            shapes["pcm.fuse.bias"] = (self.pcm_channels,)
        return shapes

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["strides"] = list(self.strides)
        return d


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    optimizer: str = "sgd"
    pcm_weight: float = 1.0
    clip_norm: float = 1.0
    tau: float = 0.5
    log_every: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer != "sgd":
            raise ValueError(f"unsupported optimizer {self.optimizer!r} (only 'sgd')")


class TrainingDiverged(RuntimeError):
    pass


def bce_loss(probs, labels, eps=1e-7):
    """Mean binary cross-entropy and its gradient w.r.t. the pre-sigmoid scores.

    Works on a single ``S`` vector or an ``N x S`` batch; the mean runs over
    every element, so the score gradient is ``(p - y) / probs.size``.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=probs.dtype)
    p = np.clip(probs, eps, 1 - eps)
    loss = -np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p))
    grad = (probs - labels) / probs.size
    return float(loss), grad


def bce_with_logits(scores, labels):
    """Mean binary cross-entropy computed from pre-sigmoid scores.

    Uses ``softplus(z) - y z`` so the loss stays exact (and consistent with
    the gradient ``(sigmoid(z) - y) / size``) even when the sigmoid saturates.
    """
    z = np.asarray(scores)
    y = np.asarray(labels, dtype=z.dtype)
    softplus = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    loss = float(np.mean(softplus - y * z))
    return loss, (T.sigmoid(z) - y) / z.size


class Model:
    """Backbone -> features F -> 1x1 CAM head -> GAP -> sigmoid."""

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or BackboneConfig()
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.params = {}
        rng = np.random.default_rng(seed)
        for name, shape in self.config.layer_shapes().items():
            if name.endswith(".bias"):
                self.params[name] = np.zeros(shape, dtype=self.dtype)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = math.sqrt(6.0 / fan_in)
                self.params[name] = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        self.cache = None
        self.backward_passes = 0

    @property
    def has_pcm(self):
        return self.config.pcm

    def param_count(self):
        return param_count(self)

    def copy(self):
        other = copy.copy(self)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.cache = None
        return other

    def astype(self, dtype):
        other = self.copy()
        other.dtype = np.dtype(dtype)
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return other

    # -- forward ---------------------------------------------------------

    def forward(self, image, keep_cache=True):
        """Run one image (``C x H x W``) or a batch (``N x C x H x W``).

        Returns a dict with ``F``, ``A``, ``scores``, ``probs``, the stage-1
        activation ``low`` and, if the PCM
        branch exists, ``K``, ``P``, ``pcm_scores`` and ``pcm_probs``.
        """
        x = np.asarray(image, dtype=self.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"input shape {tuple(np.shape(image))} does not match model "
                f"({cfg.in_channels} channels expected)"
            )
        pad = cfg.kernel // 2
        p = self.params
        acts = [x]
        stages = []
        a = x
        for i, s in enumerate(cfg.strides):
            z, cols = T.conv2d(a, p[f"stage{i + 1}.weight"], p[f"stage{i + 1}.bias"],
                               stride=s, pad=pad, return_cols=True)
            a = np.maximum(z, 0)
            stages.append((z, cols))
            acts.append(a)
        F = a
        A = T.conv2d(F, p["head.weight"], p["head.bias"])
        scores = A.mean(axis=(2, 3))
        out = {"F": F, "A": A, "scores": scores, "probs": T.sigmoid(scores), "low": acts[1]}
        cache = {"acts": acts, "stages": stages}
        if cfg.pcm:
            out.update(self._pcm_forward(x, acts[1], F, A, cache))
        if keep_cache:
            self.cache = cache
        if single:
            out = {k: v[0] for k, v in out.items()}
        return out

    def pcm_features(self, image, low, F):
        """Fused embedding K (``C' x h x w``) for batched inputs; returns (K, cache)."""
        p = self.params
        h = F.shape[-1]
        low_p = T.avg_pool(low, low.shape[-1] // h)
        img_p = T.avg_pool(image, image.shape[-1] // h)
        embeds = [
            T.conv2d(low_p, p["pcm.low.weight"], p["pcm.low.bias"]),
            T.conv2d(F, p["pcm.high.weight"], p["pcm.high.bias"]),
            T.conv2d(img_p, p["pcm.image.weight"], p["pcm.image.bias"]),
        ]
        cat = np.concatenate(embeds, axis=1)
        K = T.conv2d(cat, p["pcm.fuse.weight"], p["pcm.fuse.bias"])
        return K, {"low_p": low_p, "img_p": img_p, "cat": cat}

    def _pcm_forward(self, x, low, F, A, cache):
        K, pc = self.pcm_features(x, low, F)
        n, c2 = K.shape[:2]
        hw = K.shape[2] * K.shape[3]
        K2 = K.reshape(n, c2, hw)
        norms = np.sqrt(np.einsum("ncq,ncq->nq", K2, K2))
        safe = np.where(norms > 0, norms, 1)
        Kn = K2 / safe[:, None, :]
        attn = np.matmul(Kn.transpose(0, 2, 1), Kn)
        A2 = A.reshape(n, A.shape[1], hw)
        P = np.matmul(A2, attn)
        pcm_scores = P.mean(axis=2)
        pc.update({"Kn": Kn, "norms": norms, "attn": attn, "A2": A2})
        cache["pcm"] = pc
        return {
            "K": K,
            "P": P.reshape(A.shape),
            "pcm_scores": pcm_scores,
            "pcm_probs": T.sigmoid(pcm_scores),
        }

    # -- backward --------------------------------------------------------

    def backward(self, d_scores, d_pcm_scores=None):
        """Backpropagate from the cached forward pass.

        ``d_scores`` (``N x S`` or ``S``) is dLoss/dscores for the head's pooled
        scores; ``d_pcm_scores`` the same for the PCM branch. Returns
        ``(grads, dF)`` where ``grads`` maps parameter names to gradients.
        """
        if self.cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        self.backward_passes += 1
        cfg = self.config
        p = self.params
        acts = self.cache["acts"]
        stages = self.cache["stages"]
        F = acts[-1]
        n, _, h, w = F.shape
        d_scores = np.asarray(d_scores, dtype=self.dtype).reshape(n, cfg.n_classes)
        grads = {}

        dA = np.broadcast_to(d_scores[:, :, None, None] / (h * w), (n, cfg.n_classes, h, w))
        dA = np.ascontiguousarray(dA)
        dF = np.zeros_like(F)
        d_low = np.zeros_like(acts[1])

        if cfg.pcm:
            for k in [k for k in p if k.startswith("pcm.")]:
                grads[k] = np.zeros_like(p[k])
            if d_pcm_scores is not None:
                d_pcm = np.asarray(d_pcm_scores, dtype=self.dtype).reshape(n, cfg.n_classes)
                dF_pcm, d_low, pcm_grads = self._pcm_backward(d_pcm, dA)
                dF += dF_pcm
                grads.update(pcm_grads)

        head_cols = F.reshape(n, F.shape[1], h * w)
        dF_head, grads["head.weight"], grads["head.bias"] = T.conv2d_backward(
            dA, F.shape, head_cols, p["head.weight"])
        dF += dF_head
        dF_out = dF.copy()

        pad = cfg.kernel // 2
        da = dF
        for i in reversed(range(len(cfg.strides))):
            z, cols = stages[i]
            if i == 0:
                da = da + d_low
            dz = da * (z > 0)
            da, grads[f"stage{i + 1}.weight"], grads[f"stage{i + 1}.bias"] = T.conv2d_backward(
                dz, acts[i].shape, cols, p[f"stage{i + 1}.weight"], stride=cfg.strides[i], pad=pad)
        grads = {k: grads[k] for k in p}
        return grads, dF_out

    def _pcm_backward(self, d_pcm, dA):
        """Backward through pooling, cosine attention and the embedding convs.

        Adds the attention path's contribution into ``dA`` in place.
        """
        p = self.params
        pc = self.cache["pcm"]
        Kn, norms, attn, A2 = pc["Kn"], pc["norms"], pc["attn"], pc["A2"]
        n, s, hw = A2.shape
        dP = np.broadcast_to(d_pcm[:, :, None] / hw, (n, s, hw))
        dA += np.matmul(dP, attn).reshape(dA.shape)
        d_attn = np.matmul(A2.transpose(0, 2, 1), dP)
        dKn = np.matmul(Kn, d_attn + d_attn.transpose(0, 2, 1))
        radial = np.einsum("ncq,ncq->nq", Kn, dKn)
        safe = np.where(norms > 0, norms, 1)
        dK2 = (dKn - Kn * radial[:, None, :]) / safe[:, None, :]
        dK2 = dK2 * (norms > 0)[:, None, :]

        F = self.cache["acts"][-1]
        x = self.cache["acts"][0]
        low = self.cache["acts"][1]
        dK = dK2.reshape(n, -1, *F.shape[2:])
        grads = {}
        cat = pc["cat"]
        dcat, grads["pcm.fuse.weight"], grads["pcm.fuse.bias"] = T.conv2d_backward(
            dK, cat.shape, cat.reshape(n, cat.shape[1], -1), p["pcm.fuse.weight"])
        d = self.config.pcm_embed
        parts = {"low": pc["low_p"], "high": F, "image": pc["img_p"]}
        dins = {}
        for j, name in enumerate(("low", "high", "image")):
            inp = parts[name]
            dins[name], grads[f"pcm.{name}.weight"], grads[f"pcm.{name}.bias"] = T.conv2d_backward(
                np.ascontiguousarray(dcat[:, j * d:(j + 1) * d]), inp.shape,
                inp.reshape(n, inp.shape[1], -1), p[f"pcm.{name}.weight"])
        d_low = T.avg_pool_backward(dins["low"], low.shape[-1] // F.shape[-1])
        return dins["high"], d_low, grads

    def grad_wrt_features(self, image, class_index, forward=None):
        """d score[class] / dF for one image, via a full backward pass.

        Runs a forward first unless the caller passes the cached result of one.
        """
        s = int(class_index)
        if not 0 <= s < self.config.n_classes:
            raise IndexError(f"class index {s} out of range for {self.config.n_classes} classes")
        if forward is None or self.cache is None:
            self.forward(image)
        d = np.zeros(self.config.n_classes, dtype=self.dtype)
        d[s] = 1
        _, dF = self.backward(d)
        return dF[0]

    def loss_and_grads(self, images, labels, pcm_weight=1.0):
        out = self.forward(images)
        if np.asarray(images).ndim == 3:
            out = {k: v[None] for k, v in out.items()}
        labels = np.asarray(labels, dtype=self.dtype).reshape(out["scores"].shape)
        loss, d_scores = bce_with_logits(out["scores"], labels)
        d_pcm = None
        if self.config.pcm:
            pcm_loss, d_pcm = bce_with_logits(out["pcm_scores"], labels)
            loss += pcm_weight * pcm_loss
            d_pcm = pcm_weight * d_pcm
        grads, _ = self.backward(d_scores, d_pcm)
        return loss, grads

    def predict_probs(self, images, batch_size=64):
        images = np.asarray(images)
        chunks = [self.forward(images[i:i + batch_size], keep_cache=False)["probs"]
                  for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.config.n_classes))


def param_count(model):
    return int(sum(v.size for v in model.params.values()))


# -- training -------------------------------------------------------------


def image_level_f1(probs, labels, tau=0.5):
    """Macro F1 of thresholded image-level predictions over classes seen in either."""
    pred = np.asarray(probs) >= tau
    true = np.asarray(labels).astype(bool)
    tp = np.sum(pred & true, axis=0)
    fp = np.sum(pred & ~true, axis=0)
    fn = np.sum(~pred & true, axis=0)
    seen = (tp + fp + fn) > 0
    if not seen.any():
        return 1.0
    f1 = 2 * tp[seen] / (2 * tp[seen] + fp[seen] + fn[seen])
    return float(f1.mean())


@dataclass
class TrainResult:
    model: Model
    loss_history: list = field(default_factory=list)
    val_f1_history: list = field(default_factory=list)
    best_epoch: int = -1


def _stack(samples):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.stack([s.labels for s in samples]).astype(np.float32)
    return images, labels


def train(model, train_set, val_set, cfg=None):
    """SGD with momentum on image-level labels; keeps the best-validation weights."""
    cfg = cfg or TrainConfig()
    if not len(train_set):
        raise ValueError("training set is empty")
    x_train, y_train = _stack(train_set)
    if val_set is not None and len(val_set):
        x_val, y_val = _stack(val_set)
    else:
        x_val = y_val = None
    rng = np.random.default_rng(cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    result = TrainResult(model=model)
    best = None
    best_key = None
    n = len(x_train)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = model.loss_and_grads(x_train[idx], y_train[idx], cfg.pcm_weight)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch + 1}")
            losses.append(loss)
            if cfg.clip_norm > 0:
                norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
                if norm > cfg.clip_norm:
                    grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
            for k, g in grads.items():
                v = velocity[k]
                v *= cfg.momentum
                v += g
                model.params[k] -= np.asarray(cfg.lr * v, dtype=model.dtype)
        model.cache = None
        epoch_loss = float(np.mean(losses))
        result.loss_history.append(epoch_loss)
        if x_val is not None:
            probs = model.predict_probs(x_val)
            f1 = image_level_f1(probs, y_val, cfg.tau)
            val_loss, _ = bce_loss(probs, y_val)
            result.val_f1_history.append(f1)
            key = (f1, -val_loss)
        else:
            key = (0.0, -epoch_loss)
        if best_key is None or key > best_key:
            best_key = key
            best = {k: v.copy() for k, v in model.params.items()}
            result.best_epoch = epoch
        log.info("epoch %d loss %.4f val_f1 %s", epoch + 1, epoch_loss,
                 f"{result.val_f1_history[-1]:.4f}" if result.val_f1_history else "-")
    if best is not None:
        model.params = best
    return result


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(model, path, metadata=None):
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    layers = []
    for name, value in model.params.items():
        fname = f"params/{name}.wsst"
        wsst.save(path / fname, value)
        layers.append({"name": name, "shape": list(value.shape), "file": fname})
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "layers": layers,
        "training": metadata or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{mpath}: unsupported checkpoint version {manifest.get('format_version')}")
    model = Model(BackboneConfig(**manifest["config"]), seed=manifest.get("seed", 0))
    expected = model.config.layer_shapes()
    names = [layer["name"] for layer in manifest["layers"]]
    if sorted(names) != sorted(expected):
        raise ValueError(f"{mpath}: layer set {sorted(names)} does not match config")
    for layer in manifest["layers"]:
        arr = wsst.load(path / layer["file"])
        want = tuple(expected[layer["name"]])
        if arr.shape != want or tuple(layer["shape"]) != want:
            raise ValueError(
                f"{path / layer['file']}: shape {arr.shape} does not match expected {want} "
                f"for layer {layer['name']}"
            )
        model.params[layer["name"]] = arr.astype(np.float32)
    return model, manifest
