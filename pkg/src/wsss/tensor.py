"""Dense float kernels shared by the model, explanation and segmentation code.

Tensors are plain ``numpy.ndarray`` objects (float32 by default). Every kernel
preserves the floating dtype of its input so gradient checks can run in
float64 through the exact same code path.
"""

import numpy as np

DTYPE = np.float32


def _as_float(x):
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(DTYPE)
    return x


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride=1, pad=0):
    """Unfold ``N x C x H x W`` into ``N x (C*kh*kw) x (H'*W')`` patches."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), (oh, ow)


def col2im(cols, x_shape, kh, kw, stride=1, pad=0):
    """Adjoint of :func:`im2col`: scatter-add patches back onto the input grid."""
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


def _check_conv_shapes(x, weight, bias):
    if x.ndim not in (3, 4):
        raise ValueError(f"conv2d input must be CxHxW or NxCxHxW, got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be Cout x Cin x kh x kw, got shape {weight.shape}")
    c_in = x.shape[-3]
    if weight.shape[1] != c_in:
        raise ValueError(
            f"conv2d shape mismatch: input {tuple(x.shape)} has {c_in} channels "
            f"but weight {tuple(weight.shape)} expects {weight.shape[1]}"
        )
    if bias is not None and np.shape(bias) != (weight.shape[0],):
        raise ValueError(
            f"conv2d shape mismatch: bias {np.shape(bias)} vs weight {tuple(weight.shape)}"
        )


def conv2d(x, weight, bias=None, stride=1, pad=0, return_cols=False):
    """Cross-correlation of ``x`` (``CxHxW`` or batched) with ``weight``.

    The reduction runs over the unfolded ``C*kh*kw`` axis in a fixed order, so
    repeated calls on identical inputs give identical bits.
    """
    x = _as_float(x)
    weight = np.asarray(weight, dtype=x.dtype)
    _check_conv_shapes(x, weight, bias)
    single = x.ndim == 3
    if single:
        x = x[None]
    c_out, _, kh, kw = weight.shape
    oh = conv_output_size(x.shape[2], kh, stride, pad)
    ow = conv_output_size(x.shape[3], kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d output would be empty: input {tuple(x.shape)}, weight {tuple(weight.shape)}, "
            f"stride={stride}, pad={pad}"
        )
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = x.reshape(x.shape[0], x.shape[1], -1)
    else:
        cols, _ = im2col(x, kh, kw, stride, pad)
    out = np.matmul(weight.reshape(c_out, -1), cols)
    if bias is not None:
        out += np.asarray(bias, dtype=x.dtype)[None, :, None]
    out = out.reshape(x.shape[0], c_out, oh, ow)
    if single:
        out = out[0]
    if return_cols:
        return out, cols
    return out


def conv2d_backward(dout, x_shape, cols, weight, stride=1, pad=0):
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias (batched shapes)."""
    n, c_out, oh, ow = dout.shape
    kh, kw = weight.shape[2:]
    d2 = dout.reshape(n, c_out, oh * ow)
    dw = np.einsum("nop,nkp->ok", d2, cols).reshape(weight.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.matmul(weight.reshape(c_out, -1).T, d2)
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        dx = dcols.reshape(x_shape)
    else:
        dx = col2im(dcols, x_shape, kh, kw, stride, pad)
    return dx, dw, db


def relu(t):
    t = _as_float(t)
    return np.maximum(t, 0).astype(t.dtype, copy=False)


def global_avg_pool(t):
    """Spatial mean over the last two axes: ``S x H x W -> S``."""
    t = _as_float(t)
    if t.shape[-1] < 1 or t.shape[-2] < 1:
        raise ValueError(f"global_avg_pool needs H, W >= 1, got shape {t.shape}")
    return t.mean(axis=(-2, -1))


def sigmoid(v):
    v = _as_float(v)
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def avg_pool(t, factor):
    """Non-overlapping ``factor x factor`` mean pooling over the last two axes."""
    t = _as_float(t)
    h, w = t.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"avg_pool factor {factor} does not divide grid {h}x{w}")
    shape = t.shape[:-2] + (h // factor, factor, w // factor, factor)
    return t.reshape(shape).mean(axis=(-3, -1))


def avg_pool_backward(dout, factor):
    d = np.repeat(np.repeat(dout, factor, axis=-2), factor, axis=-1)
    return d / (factor * factor)


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Align-corners linear interpolation operator of shape ``n_out x n_in``."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    if n_out == 1:
        m[0, 0] = 1.0
        return m.astype(dtype)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m.astype(dtype)


def bilinear_upsample(t, height, width):
    """Align-corners bilinear resize of ``S x h x w`` maps to ``S x H x W``."""
    t = _as_float(t)
    h, w = t.shape[-2:]
    if height < h or width < w:
        raise ValueError(f"bilinear_upsample target {height}x{width} is smaller than source {h}x{w}")
    ry = interp_matrix(h, height, t.dtype)
    rx = interp_matrix(w, width, t.dtype)
    return np.matmul(np.matmul(ry, t), rx.T)


def cosine_similarity(a, b):
    """Cosine of the angle between two vectors; 0 if either has zero norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def normalize_columns(k):
    """Scale each column of ``C x N`` to unit length; zero columns stay zero.

    Returns the normalized matrix and the column norms.
    """
    k = _as_float(k)
    norms = np.sqrt(np.einsum("cn,cn->n", k, k))
    safe = np.where(norms > 0, norms, 1)
    return k / safe, norms


def cosine_matrix(k):
    """All-pairs cosine similarity of the columns of ``C x N`` -> ``N x N``."""
    kn, _ = normalize_columns(k)
    return kn.T @ kn


def minmax_normalize(m):
    """Affine rescale of a map to ``[0, 1]``; constant maps become all zeros."""
    m = _as_float(m)
    lo = m.min()
    hi = m.max()
    if not hi > lo:
        return np.zeros_like(m)
    out = (m - lo) / (hi - lo)
    return np.clip(out, 0, 1)


def minmax_normalize_channels(t):
    """:func:`minmax_normalize` applied to each leading-axis channel."""
    t = _as_float(t)
    axes = tuple(range(1, t.ndim))
    lo = t.min(axis=axes, keepdims=True) if t.size else t
    hi = t.max(axis=axes, keepdims=True) if t.size else t
    span = hi - lo
    live = span > 0
    out = (t - lo) / np.where(live, span, 1)
    return np.where(live, np.clip(out, 0, 1), 0).astype(t.dtype, copy=False)


def argmax_channel(t):
    """Per-pixel index of the largest channel; ties go to the lowest index."""
    t = np.asarray(t)
    if t.shape[0] < 1:
        raise ValueError("argmax_channel needs at least one channel")
    return np.argmax(t, axis=0).astype(np.int64)
