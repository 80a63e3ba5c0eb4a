"""Gibbs sampler for the wavelet-domain basis-space regression.

Each basis series s is an independent regression y_s = X b_s + e_s with
e_s ~ N(0, psi_s D_s), D_s = diag(2^(-alpha_s m)) over wavelet levels m.
With the scaled normal prior b_s ~ N(0, k_v psi_s (X' D_s^-1 X)^-1) and
psi_s ~ InverseGamma(a0, b0), the full conditionals are conjugate:

  b_s  | psi_s ~ N(c bhat_s, c psi_s (X' D_s^-1 X)^-1),  c = k_v/(1+k_v)
  psi_s | b_s  ~ IG(a0 + (T^W+P)/2,
                    b0 + [r' D_s^-1 r + b_s'(X' D_s^-1 X) b_s / k_v] / 2)

with bhat_s the generalized-least-squares estimate and r the residual.
The long-memory exponents alpha_s are estimated once by the method of
moments and held fixed.

Every series draws from its own counter-based RNG substream, so results
are identical for any worker count or processing order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from ._archive import load_archive, save_archive
from .basis import CompositeBasis, back_project
from .errors import ConfigError, IOFormatError, NumericalError
from .volume import Volume4D
from .wavelets import WaveletPlan, dwt, variance_weights

__all__ = [
    "ModelSpec",
    "PosteriorDraws",
    "transform_model",
    "gibbs_fit",
    "coefficient_summary",
    "contrast_draws",
    "save_draws",
    "load_draws",
]


@dataclass(frozen=True)
class ModelSpec:
    """Sampler settings: shrinkage constant, IG hyperparameters, chain plan."""

    k_v: float = 100.0
    a0: float = 0.01
    b0: float = 0.01
    n_iter: int = 6000
    burn_in: int = 2000
    thin: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.k_v <= 0:
            raise ConfigError("k_v must be positive")
        if self.a0 <= 0 or self.b0 <= 0:
            raise ConfigError("inverse-gamma hyperparameters must be positive")
        if self.n_iter <= self.burn_in:
            raise ConfigError("n_iter must exceed burn_in")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")

    @property
    def n_draws(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


@dataclass(frozen=True)
class PosteriorDraws:
    """Retained MCMC draws: b_star (draws, P, S), psi (draws, S), alpha (S,)."""

    b_star: np.ndarray
    psi: np.ndarray
    alpha: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        if np.any(self.psi <= 0):
            raise NumericalError("psi draws must be positive")
        if self.b_star.shape[0] != self.psi.shape[0]:
            raise ConfigError("b_star and psi draw counts differ")

    @property
    def n_draws(self) -> int:
        return self.b_star.shape[0]

    @property
    def n_series(self) -> int:
        return self.b_star.shape[2]


def transform_model(
    vol: Volume4D, basis: CompositeBasis, plan: WaveletPlan, design
) -> tuple:
    """Project to basis series and wavelet-transform both sides.

    Returns (ystar (tw, S), xstar (tw, P)): the columns of ystar are the
    DWTs of the spatial-basis score series, xstar the columnwise DWT of
    the design matrix.
    """
    from .basis import project

    values = design.values if hasattr(design, "values") else np.asarray(design)
    ystar = dwt(project(vol, basis), plan)
    xstar = dwt(values, plan)
    return ystar, xstar


def _series_rng(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(seed, spawn_key=(int(key),)))
    )


def _chunk_precompute(ystar, xstar, alpha, plan):
    """Sufficient statistics per series: A = X'D^-1X, c = X'D^-1y, q = y'D^-1y."""
    winv = 1.0 / variance_weights(plan, alpha)  # (S, tw)
    xw = winv[:, :, None] * xstar[None, :, :]   # (S, tw, P)
    a_mat = np.einsum("stp,tq->spq", xw, xstar)
    c_vec = np.einsum("stp,ts->sp", xw, ystar)
    q = np.einsum("ts,st,ts->s", ystar, winv, ystar)
    return a_mat, c_vec, q


def gibbs_fit(
    ystar: np.ndarray,
    xstar: np.ndarray,
    alpha: np.ndarray,
    spec: ModelSpec,
    plan: WaveletPlan,
    series_keys: np.ndarray | None = None,
    n_threads: int = 1,
    prior_only: bool = False,
    chunk: int | None = None,
) -> PosteriorDraws:
    """Run the blocked Gibbs sampler independently over all series.

    Parameters
    ----------
    ystar, xstar : ndarray
        Wavelet-domain responses (tw, S) and design (tw, P).
    alpha : ndarray, shape (S,)
        Fixed long-memory exponents per series.
    series_keys : ndarray of int, optional
        RNG substream key per series (defaults to the series position);
        a series keeps its chain when data and key move together.
    prior_only : bool
        Diagnostics mode: ignore the data and sample psi from its prior.

    Raises
    ------
    NumericalError
        Singular X' D^-1 X, or a non-finite draw (reported with its
        iteration index).
    """
    ystar = np.asarray(ystar, dtype=np.float64)
    xstar = np.asarray(xstar, dtype=np.float64)
    tw, n_series = ystar.shape
    n_p = xstar.shape[1]
    if xstar.shape[0] != tw:
        raise ConfigError("ystar and xstar row counts differ")
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n_series,))
    if series_keys is None:
        series_keys = np.arange(n_series)
    series_keys = np.asarray(series_keys)
    if series_keys.shape != (n_series,):
        raise ConfigError("series_keys must have one entry per series")

    n_draws = spec.n_draws
    out_b = np.empty((n_draws, n_p, n_series))
    out_psi = np.empty((n_draws, n_series))

    if chunk is None:
        chunk = int(max(16, min(n_series, 6_000_000 // (spec.n_iter * (n_p + 1)))))
    spans = [(s, min(s + chunk, n_series)) for s in range(0, n_series, chunk)]

    def run_span(span):
        s0, s1 = span
        _gibbs_span(
            ystar[:, s0:s1], xstar, alpha[s0:s1], spec, plan,
            series_keys[s0:s1], prior_only,
            out_b[:, :, s0:s1], out_psi[:, s0:s1],
        )

    if n_threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(run_span, spans))
    else:
        for span in spans:
            run_span(span)

    return PosteriorDraws(b_star=out_b, psi=out_psi, alpha=alpha.copy(), spec=spec)


def _gibbs_span(ystar, xstar, alpha, spec, plan, keys, prior_only, out_b, out_psi):
    tw, n_s = ystar.shape
    n_p = xstar.shape[1]
    n_iter, burn, thin = spec.n_iter, spec.burn_in, spec.thin

    if prior_only:
        for j, key in enumerate(keys):
            rng = _series_rng(spec.seed, key)
            gammas = rng.standard_gamma(spec.a0, size=n_iter)
            psi_chain = spec.b0 / gammas
            kept = psi_chain[burn::][thin - 1 :: thin][: spec.n_draws]
            out_psi[:, j] = kept
        out_b[:] = 0.0
        return

    a_mat, c_vec, q = _chunk_precompute(ystar, xstar, alpha, plan)
    try:
        chol = np.linalg.cholesky(a_mat)
    except np.linalg.LinAlgError:
        raise NumericalError("singular X*' D^-1 X*: design columns not full rank")
    bhat = np.linalg.solve(a_mat, c_vec[..., None])[..., 0]
    # LL' = A^-1 with L = R^-T for A = RR'
    l_cov = np.transpose(np.linalg.inv(chol), (0, 2, 1))

    shrink = spec.k_v / (1.0 + spec.k_v)
    shape = spec.a0 + 0.5 * (tw + n_p)
    mean_b = shrink * bhat

    # residual-based moment estimate seeds the first b draw
    rssw = np.maximum(q - np.einsum("sp,sp->s", bhat, c_vec), 0.0)
    psi_cur = np.maximum(rssw / tw, 1e-12)

    normals = np.empty((n_s, n_iter, n_p))
    gammas = np.empty((n_s, n_iter))
    for j, key in enumerate(keys):
        rng = _series_rng(spec.seed, key)
        normals[j] = rng.standard_normal((n_iter, n_p))
        gammas[j] = rng.standard_gamma(shape, size=n_iter)

    quad_coef = 1.0 + 1.0 / spec.k_v
    kept = 0
    for i in range(1, n_iter + 1):
        z = normals[:, i - 1, :]
        b = mean_b + np.sqrt(shrink * psi_cur)[:, None] * np.einsum(
            "sp,spq->sq", z, l_cov
        )
        ab = np.einsum("spq,sq->sp", a_mat, b)
        quad = np.einsum("sp,sp->s", b, ab)
        rate = spec.b0 + 0.5 * (q - 2.0 * np.einsum("sp,sp->s", b, c_vec)
                                + quad_coef * quad)
        psi_cur = rate / gammas[:, i - 1]
        if not np.all(np.isfinite(psi_cur)):
            raise NumericalError(f"non-finite draw at iteration {i}")
        if i > burn and (i - burn) % thin == 0:
            out_b[kept, :, :] = b.T
            out_psi[kept, :] = psi_cur
            kept += 1


def coefficient_summary(draws: PosteriorDraws, basis: CompositeBasis, chunk: int = 32):
    """Streamed posterior mean and std of the voxel-space coefficients.

    Returns (mean, std), each (P, n_analyzed), accumulated draw-chunk by
    draw-chunk so the full draws-by-voxel array is never materialized.
    """
    n_draws, n_p, _ = draws.b_star.shape
    n_an = basis.n_analyzed
    acc = np.zeros((n_p, n_an))
    acc2 = np.zeros((n_p, n_an))
    for d0 in range(0, n_draws, chunk):
        block = back_project(draws.b_star[d0 : d0 + chunk], basis)
        acc += block.sum(axis=0)
        acc2 += (block ** 2).sum(axis=0)
    mean = acc / n_draws
    var = np.maximum((acc2 - n_draws * mean ** 2) / max(n_draws - 1, 1), 0.0)
    return mean, np.sqrt(var)


def contrast_draws(
    draws: PosteriorDraws, basis: CompositeBasis, weights, chunk: int = 64
):
    """Yield voxel-space contrast maps (chunk, n_analyzed) per draw chunk.

    The contrast is combined in basis space first, so each chunk costs one
    back-projection of a (chunk, S) matrix.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (draws.b_star.shape[1],):
        raise ConfigError(
            f"contrast needs {draws.b_star.shape[1]} weights, got {weights.shape}"
        )
    for d0 in range(0, draws.n_draws, chunk):
        cstar = np.einsum("dps,p->ds", draws.b_star[d0 : d0 + chunk], weights)
        yield back_project(cstar, basis)


def save_draws(draws: PosteriorDraws, stem) -> None:
    """Write ``<stem>.draws.json`` + ``<stem>.draws.raw`` (float64, exact)."""
    spec = draws.spec
    meta = {
        "n_draws": draws.n_draws,
        "n_coefficients": draws.b_star.shape[1],
        "n_series": draws.n_series,
        "spec": {
            "k_v": spec.k_v, "a0": spec.a0, "b0": spec.b0,
            "n_iter": spec.n_iter, "burn_in": spec.burn_in,
            "thin": spec.thin, "seed": spec.seed,
        },
    }
    save_archive(stem, "draws", meta, {
        "b_star": draws.b_star, "psi": draws.psi, "alpha": draws.alpha,
    })


def load_draws(stem) -> PosteriorDraws:
    """Read a draws archive written by :func:`save_draws`."""
    meta, arrays = load_archive(stem, "draws")
    try:
        spec = ModelSpec(**meta["spec"])
        return PosteriorDraws(
            b_star=arrays["b_star"], psi=arrays["psi"],
            alpha=arrays["alpha"], spec=spec,
        )
    except KeyError as exc:
        raise IOFormatError(f"draws archive missing field: {exc}")
