"""Blind deconvolution with the learned prior.

Minimizes  ||I * k - B||^2 + gamma ||k||^2 + mu ||grad I||_0 + lambda f(I)
by alternating a latent-image step and a kernel step inside a coarse-to-fine
pyramid. The latent-image step uses half-quadratic splitting with auxiliaries
g (image gradients, L0 term) and u (image, CNN term):

    ||I * k - B||^2 + alpha ||grad I - g||^2 + beta ||I - u||^2
        + mu ||g||_0 + lambda f(u)

All FFT operations assume periodic boundaries; inputs are edge-tapered first.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import classifier
from .imaging import resize_bilinear, to_luma

log = logging.getLogger(__name__)

MIN_INPUT = 64
L0_EPS = 1e-3  # gradient magnitudes below this count as zero in energy logging


@dataclass
class SolverConfig:
    lam: float = 0.004
    mu: float = 0.004
    gamma: float = 2.0
    eta: float = 0.1
    iter_max: int = 5
    s_max: int = 10
    alpha_init: float | None = None  # default 2 * mu
    beta_init: float | None = None  # default 2 * lam
    penalty_growth: float = 2.0
    alpha_max: float = 1e5
    beta_max: float = 10.0
    pyramid_scale: float = 1 / math.sqrt(2)
    kernel_size: int = 25
    kernel_init: str = "pair"  # "pair": two adjacent 0.5 taps, "delta"
    kernel_threshold: float = 0.1  # prune taps below this fraction of the peak
    kernel_min_component: float = 0.1  # prune connected blobs below this mass
    mask_kernel_border: bool = True
    center_kernel: bool = True
    restore_mu: float = 0.002
    restore_iters: int = 8
    taper: bool = True
    multiscale: bool = True
    min_level_size: int = classifier.MIN_SIZE

    def __post_init__(self):
        for name in ("mu", "gamma", "eta", "alpha_max", "beta_max", "penalty_growth", "restore_mu"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.iter_max < 1 or self.s_max < 0 or self.restore_iters < 1:
            raise ValueError("iteration counts must be positive")
        for name in ("kernel_threshold", "kernel_min_component"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if not 0 < self.pyramid_scale < 1:
            raise ValueError(f"pyramid_scale must be in (0, 1), got {self.pyramid_scale}")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 3, got {self.kernel_size}")
        if self.kernel_init not in ("pair", "delta"):
            raise ValueError(f"unknown kernel_init {self.kernel_init!r}")
        if self.eta * self.beta_max >= 2:
            # u <- u - eta*beta*(u - I) diverges once |1 - eta*beta| > 1
            raise ValueError(f"eta * beta_max = {self.eta * self.beta_max:g} must stay below 2")

    @property
    def alpha0(self):
        return 2 * self.mu if self.alpha_init is None else self.alpha_init

    @property
    def beta0(self):
        return 2 * self.lam if self.beta_init is None else self.beta_init


# --- operators -----------------------------------------------------------------


def grad_h(x):
    return np.roll(x, -1, axis=1) - x


def grad_v(x):
    return np.roll(x, -1, axis=0) - x


def gradient(x):
    """Forward differences with periodic wrap: (horizontal, vertical)."""
    return grad_h(x), grad_v(x)


def grad_h_adjoint(y):
    return np.roll(y, 1, axis=1) - y


def grad_v_adjoint(y):
    return np.roll(y, 1, axis=0) - y


def divergence_adjoint(gh, gv):
    """grad^T applied to a gradient field (the negative divergence)."""
    return grad_h_adjoint(gh) + grad_v_adjoint(gv)


def psf2otf(kernel, shape):
    """FFT of ``kernel`` zero-padded to ``shape`` with its centre moved to (0, 0)."""
    kh, kw = kernel.shape
    pad = np.zeros(shape)
    pad[:kh, :kw] = kernel
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.fft2(pad)


def _diff_otfs(shape):
    dh = np.zeros(shape)
    dh[0, 0], dh[0, -1] = -1, 1
    dv = np.zeros(shape)
    dv[0, 0], dv[-1, 0] = -1, 1
    return np.fft.fft2(dh), np.fft.fft2(dv)


def circ_conv(x, kernel):
    return np.real(np.fft.ifft2(np.fft.fft2(x) * psf2otf(kernel, x.shape)))


def edgetaper(image, kernel):
    """Blend image borders with their circularly blurred version so the image is
    smoothly periodic (the classic edge-taper weighting)."""
    h, w = image.shape
    weights = []
    for n, proj in ((h, kernel.sum(axis=1)), (w, kernel.sum(axis=0))):
        z = np.real(np.fft.ifft(np.abs(np.fft.fft(proj, n - 1)) ** 2))
        z = np.append(z, z[0])
        weights.append(z / z.max())
    alpha = 1 - np.outer(weights[0], weights[1])
    blurred = circ_conv(image, kernel)
    return alpha * image + (1 - alpha) * blurred


# --- sub-problems --------------------------------------------------------------


def solve_I_quadratic(B, k, g, u, alpha, beta):
    """Closed-form minimizer of ||I*k - B||^2 + alpha||grad I - g||^2 + beta||I - u||^2."""
    k = np.asarray(k, dtype=np.float64)
    if not np.any(k):
        raise ValueError("all-zero kernel")
    K = psf2otf(k, B.shape)
    Dh, Dv = _diff_otfs(B.shape)
    num = np.conj(K) * np.fft.fft2(B)
    den = np.abs(K) ** 2
    if beta:
        num = num + beta * np.fft.fft2(u)
        den = den + beta
    if alpha:
        num = num + alpha * (np.conj(Dh) * np.fft.fft2(g[0]) + np.conj(Dv) * np.fft.fft2(g[1]))
        den = den + alpha * (np.abs(Dh) ** 2 + np.abs(Dv) ** 2)
    return np.real(np.fft.ifft2(num / den))


def solve_g(grad_I, alpha, mu):
    """Per-pixel L0 hard threshold: keep (gh, gv) where alpha*(gh^2 + gv^2) >= mu."""
    gh, gv = grad_I
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    keep = alpha * (gh * gh + gv * gv) >= mu
    return np.where(keep, gh, 0.0), np.where(keep, gv, 0.0)


def solve_u(I, model, beta, lam, eta, s_max, u0=None):
    """``s_max`` gradient steps on beta||I - u||^2 + lam f(u), starting at ``u0`` (default I)."""
    u = np.array(I if u0 is None else u0, dtype=np.float64)
    for _ in range(s_max):
        if lam and model is not None:
            _, df = classifier.f_and_input_gradient(model, u)
            step = beta * (u - I) + lam * df
        else:
            step = beta * (u - I)
        u = u - eta * step
    return u


def u_objective(I, u, model, beta, lam, f_u=None):
    prior = 0.0
    if lam and model is not None:
        prior = lam * (classifier.f(model, u) if f_u is None else f_u)
    return beta * float(np.sum((I - u) ** 2)) + prior


def clip_normalize(k):
    k = np.maximum(k, 0)
    s = k.sum()
    if s <= 0:
        raise ValueError("kernel has no positive mass")
    return k / s


def center_kernel(k):
    """Shift ``k`` (bilinear, zero fill) so its centroid lands on the centre tap.

    Blind estimates are only defined up to translation; anchoring the centroid
    fixes the position of the restored image relative to the input.
    """
    k = np.asarray(k, dtype=np.float64)
    total = k.sum()
    if total <= 0:
        return k
    rr, cc = np.mgrid[0:k.shape[0], 0:k.shape[1]]
    dy = k.shape[0] // 2 - float((rr * k).sum() / total)
    dx = k.shape[1] // 2 - float((cc * k).sum() / total)
    if abs(dy) < 1e-9 and abs(dx) < 1e-9:
        return k
    return clip_normalize(ndimage.shift(k, (dy, dx), order=1, mode="constant"))


def prune_kernel(k, threshold=0.1, min_component=0.1):
    """Zero entries below ``threshold * max`` and 8-connected blobs holding less
    than ``min_component`` of the mass, then renormalize."""
    k = np.array(k, dtype=np.float64)
    if threshold > 0:
        k[k < threshold * k.max()] = 0
    if min_component > 0:
        labels, n = ndimage.label(k > 0, structure=np.ones((3, 3)))
        if n > 1:
            mass = ndimage.sum(k, labels, index=np.arange(1, n + 1))
            weak = np.flatnonzero(mass < min_component * k.sum()) + 1
            if len(weak) < n:
                k[np.isin(labels, weak)] = 0
    return clip_normalize(k)


def mask_border(fields, width):
    """Zero a ``width``-pixel frame so wrap-around gradients do not enter the kernel fit."""
    if width <= 0:
        return fields
    out = []
    for x in fields:
        y = np.zeros_like(x)
        y[width:-width, width:-width] = x[width:-width, width:-width]
        out.append(y)
    return tuple(out)


def _best_window(k_full, size):
    # top-left corner of the size x size window holding the most positive mass
    pos = np.maximum(k_full, 0)
    box = ndimage.uniform_filter(pos, size=size, mode="wrap")
    cy, cx = np.unravel_index(np.argmax(box), box.shape)
    # many windows tie when the support is smaller than the window: re-centre on
    # the mass centroid inside the winner
    h = size // 2
    rows = np.arange(cy - h, cy + h + 1) % pos.shape[0]
    cols = np.arange(cx - h, cx + h + 1) % pos.shape[1]
    win = pos[np.ix_(rows, cols)]
    total = win.sum()
    if total > 0:
        cy += int(round(float(win.sum(axis=1) @ np.arange(size)) / total)) - h
        cx += int(round(float(win.sum(axis=0) @ np.arange(size)) / total)) - h
    return cy - h, cx - h


def solve_k(grad_I, grad_B, gamma, kernel_size, return_offset=False):
    """Kernel from gradient-domain least squares, cropped to ``kernel_size``,
    negatives clipped and renormalized to sum 1.

    With ``return_offset`` also returns the (dy, dx) displacement of the crop
    window's centre: the full solution equals the returned kernel shifted by
    it, so ``np.roll(I, (dy, dx))`` is the latent image that pairs with it.
    """
    energy = sum(float(np.sum(g * g)) for g in grad_I)
    if energy < 1e-12:
        raise ValueError("insufficient gradients in the latent image to estimate a kernel")
    shape = grad_I[0].shape
    if kernel_size > min(shape):
        raise ValueError(f"kernel_size {kernel_size} exceeds image {shape}")
    num = np.zeros(shape, dtype=complex)
    den = np.full(shape, float(gamma))
    for gi, gb in zip(grad_I, grad_B):
        Fi = np.fft.fft2(gi)
        num += np.conj(Fi) * np.fft.fft2(gb)
        den += np.abs(Fi) ** 2
    k_full = np.fft.fftshift(np.real(np.fft.ifft2(num / den)))
    y0, x0 = _best_window(k_full, kernel_size)
    rows = np.arange(y0, y0 + kernel_size) % shape[0]
    cols = np.arange(x0, x0 + kernel_size) % shape[1]
    k = clip_normalize(k_full[np.ix_(rows, cols)])
    if not return_offset:
        return k
    h = kernel_size // 2
    wrap = lambda d, n: (d + n // 2) % n - n // 2
    return k, (wrap(y0 + h - shape[0] // 2, shape[0]), wrap(x0 + h - shape[1] // 2, shape[1]))


# --- energies ------------------------------------------------------------------


def l0_count(I, eps=L0_EPS):
    gh, gv = gradient(I)
    return int(np.count_nonzero(gh * gh + gv * gv > eps * eps))


def data_term(I, k, B):
    """||I * k - B||^2 over the interior where circular wrap cannot reach."""
    r = k.shape[0] // 2
    res = circ_conv(I, k) - B
    if r:
        res = res[r:-r, r:-r]
    return float(np.sum(res ** 2))


def energy(I, k, B, cfg, model=None, f_value=None):
    e = data_term(I, k, B) + cfg.gamma * float(np.sum(k ** 2)) + cfg.mu * l0_count(I)
    if cfg.lam and model is not None:
        e += cfg.lam * (classifier.f(model, I) if f_value is None else f_value)
    return e


def surrogate_energy(I, g, u, k, B, alpha, beta, cfg, f_u=None):
    """HQS objective (periodic data term, as the I-step sees it)."""
    gh, gv = gradient(I)
    e = float(np.sum((circ_conv(I, k) - B) ** 2))
    e += alpha * float(np.sum((gh - g[0]) ** 2 + (gv - g[1]) ** 2))
    e += beta * float(np.sum((I - u) ** 2))
    e += cfg.mu * int(np.count_nonzero((g[0] != 0) | (g[1] != 0)))
    if f_u is not None:
        e += cfg.lam * f_u
    return e


# --- pyramid driver ------------------------------------------------------------


@dataclass
class Diagnostics:
    rows: list = field(default_factory=list)  # dicts: level, iter, alpha, beta, energy, f_value
    kernels: list = field(default_factory=list)  # (level, kernel) after each level
    latents: list = field(default_factory=list)  # (level, iter, image) when dumping
    surrogate_checks: int = 0
    surrogate_violations: list = field(default_factory=list)
    u_rejections: int = 0
    levels: list = field(default_factory=list)  # (shape, kernel_size) coarse to fine

    def finest_energies(self):
        finest = max(r["level"] for r in self.rows)
        return [r["energy"] for r in self.rows if r["level"] == finest]


def _f_or_none(model, x, cfg):
    if not cfg.lam or model is None:
        return None
    return classifier.f(model, x)


def hqs_latent(B, k, model, cfg, diag=None, track_surrogate=False):
    """Inner HQS loop: alternate g, u and I updates while alpha, beta grow."""
    alpha, beta = cfg.alpha0, cfg.beta0
    use_prior = bool(cfg.lam) and model is not None
    I = B.copy()
    g = gradient(I)
    u = I.copy()
    f_u = classifier.f(model, u) if use_prior else None
    tol = 1e-9

    def surrogate():
        return surrogate_energy(I, g, u, k, B, alpha, beta, cfg, f_u)

    while True:
        if track_surrogate:
            trace = [surrogate()]
        g = solve_g(gradient(I), alpha, cfg.mu)
        if track_surrogate:
            trace.append(surrogate())
        if use_prior:
            u_new = solve_u(I, model, beta, cfg.lam, cfg.eta, cfg.s_max)
            f_new = classifier.f(model, u_new)
            # keep the previous auxiliary unless the new one lowers the u-objective
            if u_objective(I, u_new, model, beta, cfg.lam, f_new) <= u_objective(I, u, model, beta, cfg.lam, f_u):
                u, f_u = u_new, f_new
            elif diag is not None:
                diag.u_rejections += 1
        else:
            u = I
        if track_surrogate:
            trace.append(surrogate())
        I = solve_I_quadratic(B, k, g, u, alpha, beta if use_prior else 0.0)
        if track_surrogate:
            trace.append(surrogate())
            diag.surrogate_checks += 1
            scale = max(abs(trace[0]), 1.0)
            for step, (a, b) in enumerate(zip(trace[:-1], trace[1:])):
                if b > a + tol * scale:
                    diag.surrogate_violations.append((alpha, beta, "gui"[step], a, b))
        if alpha >= cfg.alpha_max:
            break
        alpha = min(alpha * cfg.penalty_growth, cfg.alpha_max)
        beta = min(beta * cfg.penalty_growth, cfg.beta_max)
    return I, alpha, beta


def deblur_level(B_level, k_init, model, cfg, level=0, diag=None, track_surrogate=False, dump=False):
    """``iter_max`` rounds of (latent image, kernel) updates at one pyramid level."""
    k = k_init
    I = B_level
    for it in range(cfg.iter_max):
        B_in = edgetaper(B_level, k) if cfg.taper else B_level
        I, alpha, beta = hqs_latent(B_in, k, model, cfg, diag, track_surrogate)
        grads_I, grads_B = gradient(I), gradient(B_in)
        if cfg.mask_kernel_border:
            width = min(k.shape[0], (min(I.shape) - k.shape[0]) // 2)
            grads_I, grads_B = mask_border(grads_I, width), mask_border(grads_B, width)
        k, shift = solve_k(grads_I, grads_B, cfg.gamma, k.shape[0], return_offset=True)
        # a window off the centre translates the kernel; move I with it so the
        # pair (I, k) keeps the energy the kernel step found
        I = np.roll(I, shift, axis=(0, 1))
        k = prune_kernel(k, cfg.kernel_threshold, cfg.kernel_min_component)
        if diag is not None:
            f_val = _f_or_none(model, I, cfg)
            diag.rows.append({
                "level": level,
                "iter": it,
                "alpha": alpha,
                "beta": beta,
                "energy": energy(I, k, B_level, cfg, model, f_val),
                "f_value": float("nan") if f_val is None else f_val,
            })
            if dump:
                diag.latents.append((level, it, I.copy()))
    return I, k


def odd(x):
    return max(3, 2 * int(math.floor(x / 2)) + 1)


def pyramid_plan(shape, kernel_size, scale, min_size=classifier.MIN_SIZE):
    """[(image shape, kernel size)] from coarsest to finest."""
    n = 1 + max(0, int(round(math.log(3 / kernel_size) / math.log(scale))))
    plan = []
    for lvl in range(n):
        f = scale ** lvl
        hs, ws = int(round(shape[0] * f)), int(round(shape[1] * f))
        ks = odd(kernel_size * f) if lvl else kernel_size
        if min(hs, ws) < min_size or ks > min(hs, ws):
            break
        plan.append(((hs, ws), ks))
    return plan[::-1]


def initial_kernel(size, mode="pair"):
    k = np.zeros((3, 3))
    if mode == "pair":
        k[1, 0] = k[1, 1] = 0.5
    else:
        k[1, 1] = 1.0
    return resize_kernel(k, size) if size != 3 else k


def resize_kernel(k, size):
    if k.shape[0] == size:
        return k
    if size < k.shape[0]:
        # spread thin trajectories before shrinking so no tap falls between samples
        k = ndimage.gaussian_filter(k, 0.5 * k.shape[0] / size, mode="constant")
    return clip_normalize(resize_bilinear(k, (size, size)))


def final_restore(B, k, cfg=None):
    """Non-blind L0-gradient deconvolution with a known kernel, output in [0, 1]."""
    cfg = cfg or SolverConfig()
    k = np.asarray(k, dtype=np.float64)
    pad = k.shape[0]
    Bp = np.pad(B, pad, mode="edge")
    if cfg.taper:
        Bp = edgetaper(Bp, k)
    alpha = 2 * cfg.restore_mu
    I = Bp
    for _ in range(cfg.restore_iters):
        g = solve_g(gradient(I), alpha, cfg.restore_mu)
        I = solve_I_quadratic(Bp, k, g, None, alpha, 0.0)
        alpha *= cfg.penalty_growth
    return np.clip(I[pad:-pad, pad:-pad], 0, 1)


def blind_deblur(B, model, cfg=None, track_surrogate=False, dump=False):
    """Estimate the kernel coarse-to-fine, then restore. Returns (image, kernel, Diagnostics).

    Colour input: the kernel is estimated on luma, restoration runs per channel.
    """
    cfg = cfg or SolverConfig()
    B = np.asarray(B, dtype=np.float64)
    gray = to_luma(B)
    if min(gray.shape) < MIN_INPUT:
        raise classifier.ImageSizeError(f"image {gray.shape[0]}x{gray.shape[1]} below the minimum size {MIN_INPUT}x{MIN_INPUT}")
    if cfg.multiscale:
        plan = pyramid_plan(gray.shape, cfg.kernel_size, cfg.pyramid_scale, cfg.min_level_size)
    else:
        plan = [(gray.shape, cfg.kernel_size)]
    diag = Diagnostics(levels=plan)
    k = initial_kernel(plan[0][1], cfg.kernel_init)
    for lvl, (shape, ks) in enumerate(plan):
        B_lvl = resize_bilinear(gray, shape) if shape != gray.shape else gray
        k = resize_kernel(k, ks)
        _, k = deblur_level(B_lvl, k, model, cfg, lvl, diag, track_surrogate, dump)
        diag.kernels.append((lvl, k.copy()))
        log.debug("level %d %s kernel %d done", lvl, shape, ks)
    if cfg.center_kernel:
        k = center_kernel(k)
    if B.ndim == 3:
        restored = np.stack([final_restore(B[..., c], k, cfg) for c in range(B.shape[2])], axis=-1)
    else:
        restored = final_restore(B, k, cfg)
    return restored, k, diag
