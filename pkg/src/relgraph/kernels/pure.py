"""Pure-numpy reference implementation of the convolution kernels."""

import numpy as np


def conv1d_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray,
                   direction: str) -> np.ndarray:
    """Causal 1-d convolution.

    x: (B, T, C_in), w: (width, C_in, C_out), bias: (C_out,).
    forward: out[b,t] = sum_tau x[b,t-tau] @ w[tau]  (zero pad on the left)
    backward: out[b,t] = sum_tau x[b,t+tau] @ w[tau] (zero pad on the right)
    """
    B, T, _ = x.shape
    width, _, cout = w.shape
    out = np.broadcast_to(bias, (B, T, cout)).copy()
    for tau in range(width):
        if tau == 0:
            out += x @ w[0]
        elif tau < T:
            if direction == "forward":
                out[:, tau:] += x[:, :-tau] @ w[tau]
            else:
                out[:, :-tau] += x[:, tau:] @ w[tau]
    return out


def conv1d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray,
                    direction: str):
    """Gradients of conv1d_forward w.r.t. x, w and bias."""
    T = x.shape[1]
    width = w.shape[0]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for tau in range(width):
        if tau == 0:
            gx += g @ w[0].T
            gw[0] = np.tensordot(x, g, axes=([0, 1], [0, 1]))
        elif tau < T:
            if direction == "forward":
                gx[:, :-tau] += g[:, tau:] @ w[tau].T
                gw[tau] = np.tensordot(x[:, :-tau], g[:, tau:],
                                       axes=([0, 1], [0, 1]))
            else:
                gx[:, tau:] += g[:, :-tau] @ w[tau].T
                gw[tau] = np.tensordot(x[:, tau:], g[:, :-tau],
                                       axes=([0, 1], [0, 1]))
    gbias = g.sum(axis=(0, 1))
    return gx, gw, gbias
