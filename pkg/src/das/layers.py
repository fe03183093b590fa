"""Neural-network primitives with analytic forward/backward passes.

All activations use channels-last layout (B, H, W, C) so that the 3x3
convolutions can run as nine accumulating GEMMs on contiguous views of the
padded input ("shift-and-GEMM"), avoiding im2col copies.  The batch is
processed in chunks sized to keep each chunk's working set cache-resident;
chunk boundaries are a deterministic function of the batch shape, so
repeated runs are bitwise identical (different chunkings may differ in the
last float32 bits through BLAS blocking).  Convolution weights are stored
as (kh, kw, C_in, C_out); none of the convolutions carry a bias term (the
following batch norm would absorb it).

Float32 and float64 are both supported; float64 is what the finite
difference gradient checks run on.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.linalg.blas import dgemm, sgemm
from threadpoolctl import ThreadpoolController

# Per-chunk working set target, in bytes; two buffers of roughly
# hp * wp * channels * itemsize each must stay cache-resident.
_CHUNK_BYTES = 256 << 10

# BLAS thread-pool dispatch latency dwarfs the many small GEMMs these layers
# issue; each compute entry point pins its BLAS calls to one thread and
# parallelism is recovered explicitly through data-parallel workers.
_BLAS_CONTROLLER = ThreadpoolController()


@contextmanager
def single_thread_blas():
    with _BLAS_CONTROLLER.limit(limits=1):
        yield


def _acc_matmul(out: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
    """out += a @ b without temporaries (BLAS gemm with beta = 1).

    `out` (m, n) and `a` (m, k) must be C-contiguous row slices; `b` (k, n)
    may be any small matrix.  Computed as out.T = b.T @ a.T on the
    Fortran-ordered transposes, which aliases the same memory.
    """
    gemm = sgemm if out.dtype == np.float32 else dgemm
    gemm(1.0, b.T, a.T, beta=1.0, c=out.T, overwrite_c=1)


def _chunk_rows(plane_values: int, itemsize: int, batch: int) -> int:
    per_sample = plane_values * itemsize
    chunk = max(1, _CHUNK_BYTES // max(per_sample, 1))
    return min(batch, chunk)


def pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad the H and W axes of a (B, H, W, C) array."""
    b, h, w, c = x.shape
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    out[:, pad : pad + h, pad : pad + w, :] = x
    return out


def conv_out_size(size: int, stride: int) -> int:
    """Output size of a 3x3 convolution with padding 1: ceil(size / stride)."""
    return (size - 1) // stride + 1


def conv3x3_forward(x: np.ndarray, w: np.ndarray, stride: int = 1):
    """3x3 convolution, padding 1, no bias.  Returns (out, cache)."""
    b, h, wid, c_in = x.shape
    c_out = w.shape[3]
    ho, wo = conv_out_size(h, stride), conv_out_size(wid, stride)
    hp, wp = h + 2, wid + 2
    xp = pad_hw(x, 1)
    out = np.empty((b, ho, wo, c_out), dtype=x.dtype)
    chunk = _chunk_rows(hp * wp * max(c_in, c_out), x.itemsize, b)
    for s in range(0, b, chunk):
        e = min(s + chunk, b)
        n = (e - s) * hp * wp
        xf = xp[s:e].reshape(n, c_in)
        if stride == 1:
            # One GEMM per kernel offset on a contiguous view of the padded
            # chunk; wrap-over garbage lands in the cropped pad rows/columns.
            of = np.zeros((n, c_out), dtype=x.dtype)
            for u in range(3):
                for v in range(3):
                    off = u * wp + v
                    _acc_matmul(of[: n - off], xf[off:], w[u, v])
            out[s:e] = of.reshape(e - s, hp, wp, c_out)[:, :h, :wid, :]
        else:
            of = np.zeros(((e - s) * ho * wo, c_out), dtype=x.dtype)
            for u in range(3):
                for v in range(3):
                    xs = np.ascontiguousarray(
                        xp[s:e, u : u + (ho - 1) * stride + 1 : stride,
                           v : v + (wo - 1) * stride + 1 : stride, :]
                    ).reshape(-1, c_in)
                    _acc_matmul(of, xs, w[u, v])
            out[s:e] = of.reshape(e - s, ho, wo, c_out)
    return out, (xp, w, stride, x.shape)


def conv3x3_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Gradients of a 3x3 convolution: returns (dx, dw).

    The weight-gradient and input-gradient offset loops run as separate
    phases per chunk so only two large buffers are hot at a time.
    `need_dx=False` (first layer) skips the input-gradient GEMMs.
    """
    xp, w, stride, x_shape = cache
    b, h, wid, c_in = x_shape
    hp, wp = h + 2, wid + 2
    c_out = w.shape[3]
    dw = np.zeros_like(w)
    dx = np.empty(x_shape, dtype=dout.dtype) if need_dx else None
    chunk = _chunk_rows(hp * wp * max(c_in, c_out), dout.itemsize, b)
    for s in range(0, b, chunk):
        e = min(s + chunk, b)
        n = (e - s) * hp * wp
        xf = xp[s:e].reshape(n, c_in)
        if stride == 1:
            dff = np.zeros((e - s, hp, wp, c_out), dtype=dout.dtype)
            dff[:, :h, :wid, :] = dout[s:e]
            dff = dff.reshape(n, c_out)
            for u in range(3):
                for v in range(3):
                    off = u * wp + v
                    dw[u, v] += xf[off:].T @ dff[: n - off]
            if need_dx:
                dxf = np.zeros((n, c_in), dtype=dout.dtype)
                for u in range(3):
                    for v in range(3):
                        off = u * wp + v
                        _acc_matmul(dxf[off:], dff[: n - off], w[u, v].T)
                dx[s:e] = dxf.reshape(e - s, hp, wp, c_in)[:, 1 : 1 + h, 1 : 1 + wid, :]
        else:
            ho, wo = dout.shape[1], dout.shape[2]
            do2 = np.ascontiguousarray(dout[s:e]).reshape(-1, c_out)
            slices = [
                (slice(u, u + (ho - 1) * stride + 1, stride),
                 slice(v, v + (wo - 1) * stride + 1, stride))
                for u in range(3) for v in range(3)
            ]
            for (rows, cols), uv in zip(slices, range(9)):
                xs = np.ascontiguousarray(xp[s:e, rows, cols, :]).reshape(-1, c_in)
                dw[uv // 3, uv % 3] += xs.T @ do2
            if need_dx:
                dxp = np.zeros((e - s, hp, wp, c_in), dtype=dout.dtype)
                for (rows, cols), uv in zip(slices, range(9)):
                    dxp[:, rows, cols, :] += (
                        do2 @ w[uv // 3, uv % 3].T
                    ).reshape(e - s, ho, wo, c_in)
                dx[s:e] = dxp[:, 1 : 1 + h, 1 : 1 + wid, :]
    return dx, dw


def conv1x1_forward(x: np.ndarray, w: np.ndarray, stride: int = 1):
    """1x1 convolution (projection shortcut), no padding, no bias."""
    b, h, wid, c_in = x.shape
    xs = np.ascontiguousarray(x[:, ::stride, ::stride, :])
    ho, wo = xs.shape[1], xs.shape[2]
    out = (xs.reshape(-1, c_in) @ w).reshape(b, ho, wo, w.shape[1])
    return out, (xs, w, stride, x.shape)


def conv1x1_backward(dout: np.ndarray, cache):
    xs, w, stride, x_shape = cache
    b, ho, wo, c_in = xs.shape
    do2 = np.ascontiguousarray(dout).reshape(-1, w.shape[1])
    dw = xs.reshape(-1, c_in).T @ do2
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, ::stride, ::stride, :] = (do2 @ w.T).reshape(b, ho, wo, c_in)
    return dx, dw


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      momentum: float, eps: float, train: bool,
                      update_stats: bool = True):
    """Per-channel batch normalization over (B, H, W).

    Training mode normalizes with biased batch statistics and (optionally)
    folds them into the running estimates; eval mode uses the running
    statistics and leaves them untouched.
    """
    c = x.shape[-1]
    x2 = x.reshape(-1, c)
    if train:
        n = x2.shape[0]
        mean = x2.sum(axis=0)
        mean /= n
        sq = np.einsum("nc,nc->c", x2, x2)
        var = sq / n - mean * mean
        np.maximum(var, 0.0, out=var)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x2 - mean) * inv_std
    out = (x_hat * gamma + beta).reshape(x.shape).astype(x.dtype, copy=False)
    cache = (x_hat, inv_std, gamma, train, x.shape)
    return out, cache


def batchnorm_backward(dout: np.ndarray, cache):
    """Returns (dx, dgamma, dbeta) for either train- or frozen-stats mode."""
    x_hat, inv_std, gamma, train, x_shape = cache
    c = x_shape[-1]
    do2 = dout.reshape(-1, c)
    dgamma = np.einsum("nc,nc->c", do2, x_hat)
    dbeta = do2.sum(axis=0)
    if train:
        n = do2.shape[0]
        # dx = (gamma*inv_std) * (dout - mean(dout) - x_hat * mean(dout*x_hat))
        scale = gamma * inv_std
        dx2 = do2 - dbeta / n - x_hat * (dgamma / n)
        dx2 *= scale
    else:
        dx2 = do2 * (gamma * inv_std)
    return dx2.reshape(x_shape).astype(dout.dtype, copy=False), dgamma, dbeta


def relu_forward(x: np.ndarray):
    out = np.maximum(x, 0)
    return out, out


def relu_backward(dout: np.ndarray, cache) -> np.ndarray:
    return dout * (cache > 0)


def global_avg_pool_forward(x: np.ndarray):
    """(B, H, W, C) -> (B, C) mean over the spatial axes."""
    b, h, w, c = x.shape
    return x.mean(axis=(1, 2)), (b, h, w, c)


def global_avg_pool_backward(dout: np.ndarray, cache) -> np.ndarray:
    b, h, w, c = cache
    return np.broadcast_to(dout[:, None, None, :] / (h * w), (b, h, w, c)).astype(
        dout.dtype, copy=False
    )


def linear_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray):
    """Fully connected layer: (B, C) @ (C, K) + (K,)."""
    return x @ w + bias, (x, w)


def linear_backward(dout: np.ndarray, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)
