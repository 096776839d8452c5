"""Tensor-grid quadrature for log p(x, y) of models with one-dimensional latents.

Only the decoder and the standard-normal priors are used, so the value is
independent of the encoders and of any sampling.
"""

import math

import numpy as np
from scipy.special import logsumexp

from genids import diff_net as dn

LIM = 8.0


def _trapezoid_log_weights(n: int) -> np.ndarray:
    h = 2 * LIM / (n - 1)
    w = np.full(n, h)
    w[0] = w[-1] = h / 2
    return np.log(w)


def log_joint(model, x: np.ndarray, y: int, n: int = 801, integrate_m: bool = True,
              chunk: int = 200_000) -> float:
    """log p(x, y) by trapezoid rule over z (and m) in [-8, 8] per axis.

    With ``integrate_m`` False, m is held at 0 (the decoder the paper_literal
    mode trains); otherwise m is integrated against its standard-normal prior.
    """
    c = model.cfg
    if c.z_dim != 1 or c.m_dim > 1:
        raise ValueError("quadrature oracle needs z_dim == 1 and m_dim <= 1")
    g = np.linspace(-LIM, LIM, n)
    lw = _trapezoid_log_weights(n)
    if integrate_m and c.m_dim == 1:
        Z, M = (a.ravel() for a in np.meshgrid(g, g, indexing="ij"))
        LW = (lw[:, None] + lw[None, :]).ravel()
    else:
        Z, LW = g, lw
        M = np.zeros(n) if c.m_dim == 1 else None
    parts = []
    for s in range(0, len(Z), chunk):
        z = Z[s:s + chunk, None]
        yoh = np.zeros((len(z), c.n_classes))
        yoh[:, y] = 1.0
        cols = [yoh, z] + ([M[s:s + chunk, None]] if M is not None else [])
        xhat, _ = dn.forward(model.dec, np.concatenate(cols, axis=1))
        lp = dn.gaussian_log_pdf(np.broadcast_to(x, xhat.shape),
                                 dn.GaussianParams(xhat, np.full(c.x_dim, c.dec_log_var)))
        lp = lp + LW[s:s + chunk] - 0.5 * math.log(2 * math.pi) - 0.5 * Z[s:s + chunk] ** 2
        if integrate_m and c.m_dim == 1:
            lp = lp - 0.5 * math.log(2 * math.pi) - 0.5 * M[s:s + chunk] ** 2
        parts.append(logsumexp(lp))
    return float(logsumexp(parts) + math.log(model.prior_y[y]))
