"""Dense float64 primitives with exact reverse-mode rules.

Every forward op here has a matching backward op. Tensors are plain
``numpy.ndarray`` objects of dtype float64; ops never mutate their inputs.
Channels are always the trailing axis.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5
NORM_EPS = 1e-12
SMOOTH_L1_BETA = 1.0


class DimensionError(ValueError):
    """Shapes of the operands are inconsistent."""


class DegenerateError(ValueError):
    """Input is numerically degenerate for the requested op."""


class ParameterError(ValueError):
    """A scalar/config argument is out of range."""


class NoAnnotationError(ValueError):
    """A loss was requested over an empty set of annotated positions."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_trailing(x: np.ndarray, n: int, what: str) -> None:
    if x.ndim == 0 or x.shape[-1] != n:
        raise DimensionError(
            f"{what}: trailing axis (axis {x.ndim - 1}) has size "
            f"{x.shape[-1] if x.ndim else 'n/a'}, expected {n}"
        )


# --------------------------------------------------------------------------
# linear


def linear_forward(x, W, b) -> np.ndarray:
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2:
        raise DimensionError(f"weight must be 2-D, got shape {W.shape}")
    _check_trailing(x, W.shape[1], "linear input")
    if b.shape != (W.shape[0],):
        raise DimensionError(f"bias axis 0 has shape {b.shape}, expected ({W.shape[0]},)")
    return x @ W.T + b


def linear_backward(x, W, grad_y):
    """Returns ``(grad_x, grad_W, grad_b)``; parameter grads sum over positions."""
    x, W, grad_y = as_tensor(x), as_tensor(W), as_tensor(grad_y)
    _check_trailing(x, W.shape[1], "linear input")
    _check_trailing(grad_y, W.shape[0], "linear grad_y")
    if grad_y.shape[:-1] != x.shape[:-1]:
        raise DimensionError(
            f"linear grad_y leading axes {grad_y.shape[:-1]} != input leading axes {x.shape[:-1]}"
        )
    gy = grad_y.reshape(-1, W.shape[0])
    xf = x.reshape(-1, W.shape[1])
    grad_x = grad_y @ W
    grad_W = gy.T @ xf
    grad_b = gy.sum(axis=0)
    return grad_x, grad_W, grad_b


# --------------------------------------------------------------------------
# relu


def relu_forward(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x, grad_y) -> np.ndarray:
    # subgradient at exactly 0 is 0
    x = as_tensor(x)
    return np.where(x > 0.0, as_tensor(grad_y), 0.0)


# --------------------------------------------------------------------------
# batch normalization (training-mode statistics only)


def batchnorm_forward(x, gamma, beta, eps: float = BN_EPS):
    """Normalize per channel over every leading position.

    Returns ``(y, mean, var)`` where ``var`` is the biased variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = gamma.shape[0]
    _check_trailing(x, C, "batchnorm input")
    xf = x.reshape(-1, C)
    if xf.shape[0] < 2:
        raise DegenerateError("batchnorm needs at least 2 positions per channel")
    mean = xf.mean(axis=0)
    var = ((xf - mean) ** 2).mean(axis=0)
    xhat = (x - mean) / np.sqrt(var + eps)
    return gamma * xhat + beta, mean, var


def batchnorm_backward(x, gamma, mean, var, eps, grad_y):
    x, gamma, grad_y = as_tensor(x), as_tensor(gamma), as_tensor(grad_y)
    C = gamma.shape[0]
    _check_trailing(x, C, "batchnorm input")
    if grad_y.shape != x.shape:
        raise DimensionError(f"batchnorm grad_y shape {grad_y.shape} != input shape {x.shape}")
    xf = x.reshape(-1, C)
    gf = grad_y.reshape(-1, C)
    n = xf.shape[0]
    if n < 2:
        raise DegenerateError("batchnorm needs at least 2 positions per channel")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xf - mean) * inv_std
    grad_beta = gf.sum(axis=0)
    grad_gamma = (gf * xhat).sum(axis=0)
    gxhat = gf * gamma
    grad_x = inv_std * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
    return grad_x.reshape(x.shape), grad_gamma, grad_beta


# --------------------------------------------------------------------------
# resampling


def avgpool_down2(x) -> np.ndarray:
    """2x2 non-overlapping mean over the two leading axes of ``[H, W, C]``.

    Odd edges average only the entries that exist.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"avgpool_down2 expects [H,W,C], got {x.shape}")
    H, W, C = x.shape
    if H < 1 or W < 1:
        raise DimensionError("avgpool_down2 needs H,W >= 1")
    Ho, Wo = -(-H // 2), -(-W // 2)
    padded = np.zeros((2 * Ho, 2 * Wo, C))
    padded[:H, :W] = x
    counts = np.zeros((2 * Ho, 2 * Wo, 1))
    counts[:H, :W] = 1.0
    s = padded.reshape(Ho, 2, Wo, 2, C).sum(axis=(1, 3))
    n = counts.reshape(Ho, 2, Wo, 2, 1).sum(axis=(1, 3))
    return s / n


def nearest_up(x, factor: int) -> np.ndarray:
    if factor < 1 or int(factor) != factor:
        raise ParameterError(f"upsampling factor must be a positive integer, got {factor}")
    x = as_tensor(x)
    if factor == 1:
        return x.copy()
    return np.repeat(np.repeat(x, factor, axis=0), factor, axis=1)


def nearest_up_backward(grad_y, factor: int, in_shape) -> np.ndarray:
    """Adjoint of ``nearest_up`` followed by a crop to ``grad_y``'s extent."""
    H, W, C = in_shape
    grad_y = as_tensor(grad_y)
    if factor == 1:
        return grad_y.copy()
    full = np.zeros((H * factor, W * factor, C))
    full[: grad_y.shape[0], : grad_y.shape[1]] = grad_y
    return full.reshape(H, factor, W, factor, C).sum(axis=(1, 3))


# --------------------------------------------------------------------------
# losses. Each returns (loss, grad) with grad w.r.t. the first argument.


def softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent_loss(logits, labels, ignore_mask=None):
    """Mean negative log-likelihood over active positions.

    ``ignore_mask`` is True where a position must be skipped; labels < 0
    are ignored as well.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    K = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels shape {labels.shape} != logits positions {logits.shape[:-1]}")
    active = labels >= 0
    if ignore_mask is not None:
        active &= ~np.asarray(ignore_mask, dtype=bool)
    count = int(active.sum())
    if count == 0:
        raise NoAnnotationError("softmax loss over an empty active set")
    if np.any(labels[active] >= K):
        raise ParameterError(f"label out of range [0,{K})")
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    safe = np.where(active, labels, 0).astype(np.int64)
    picked = np.take_along_axis(z, safe[..., None], axis=-1)[..., 0]
    nll = logsum - picked
    loss = float(nll[active].sum() / count)
    p = np.exp(z - logsum[..., None])
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
    grad = np.where(active[..., None], (p - onehot) / count, 0.0)
    return loss, grad


def weighted_xent_loss(logits, targets, w_pos: float = 0.9, w_neg: float = 0.1):
    """Class-weighted binary cross-entropy on logits, meaned over elements."""
    if not (0.0 <= w_pos <= 1.0 and 0.0 <= w_neg <= 1.0):
        raise ParameterError(f"class weights must lie in [0,1], got {w_pos}, {w_neg}")
    z = as_tensor(logits)
    t = as_tensor(targets)
    if t.shape != z.shape:
        raise DimensionError(f"targets shape {t.shape} != logits shape {z.shape}")
    # log sigma(z) = -softplus(-z), log(1 - sigma(z)) = -softplus(z)
    sp_pos = np.logaddexp(0.0, -z)
    sp_neg = np.logaddexp(0.0, z)
    n = z.size
    loss = float((w_pos * t * sp_pos + w_neg * (1.0 - t) * sp_neg).sum() / n)
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    grad = (w_pos * t * (sig - 1.0) + w_neg * (1.0 - t) * sig) / n
    return loss, grad


def smooth_l1_loss(pred, target, mask=None):
    """Huber-style loss with transition at |d| = 1, meaned over active elements.

    ``mask`` (broadcastable to ``pred``) selects the elements that count.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"pred shape {pred.shape} != target shape {target.shape}")
    d = pred - target
    ad = np.abs(d)
    per = np.where(ad < SMOOTH_L1_BETA, 0.5 * d * d, ad - 0.5)
    g = np.clip(d, -1.0, 1.0)
    if mask is None:
        n = d.size
        return float(per.sum() / n), g / n
    m = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
    n = int(m.sum())
    if n == 0:
        raise NoAnnotationError("smooth l1 loss over an empty active set")
    return float(per[m].sum() / n), np.where(m, g / n, 0.0)


def l2_normalize_forward(v, eps_norm: float = NORM_EPS):
    """Unit-normalize along the trailing axis.

    Returns ``(u, valid)``; positions with norm <= eps_norm are zeroed and
    flagged invalid so callers can mask them out of the loss.
    """
    v = as_tensor(v)
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    valid = norm[..., 0] > eps_norm
    u = np.where(valid[..., None], v / np.where(valid[..., None], norm, 1.0), 0.0)
    return u, valid


def l2_normalize_strict(v, eps_norm: float = NORM_EPS) -> np.ndarray:
    u, valid = l2_normalize_forward(v, eps_norm)
    if not valid.all():
        raise DegenerateError("vector norm below eps_norm")
    return u


def l2_normalize_backward(v, grad_u, eps_norm: float = NORM_EPS) -> np.ndarray:
    v, grad_u = as_tensor(v), as_tensor(grad_u)
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    valid = norm > eps_norm
    safe = np.where(valid, norm, 1.0)
    u = v / safe
    proj = grad_u - u * (u * grad_u).sum(axis=-1, keepdims=True)
    return np.where(valid, proj / safe, 0.0)
