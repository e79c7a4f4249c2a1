"""Diagnostics for flat-minima behaviour of a federated run.

The population objective is the unweighted mean of the clients' full-data
losses. Clients are any objects exposing ``full_loss(theta)``,
``full_grad(theta)`` and ``evaluable``; empty shards are skipped.
"""

from dataclasses import dataclass

import numpy as np

from .rng import rng_for

__all__ = [
    "SurfaceGrid",
    "flatness_distance",
    "global_sharpness",
    "extrapolated_grad_norm",
    "population_loss",
    "population_grad",
    "loss_surface_slice",
    "write_surface",
    "read_surface",
]

ZERO_NORM = 1e-12

SURFACE_HEADER = "# fnsm-surface v1"


def flatness_distance(local_models: list[np.ndarray], global_model: np.ndarray) -> float:
    """Mean squared Euclidean distance from each local model to the global one.

    Small values mean the clients' round-end models cluster tightly around
    the aggregate; growth signals client drift.
    """
    if not local_models:
        raise ValueError("need at least one local model")
    g = np.asarray(global_model, dtype=np.float64)
    total = 0.0
    for lm in local_models:
        diff = np.asarray(lm, dtype=np.float64) - g
        if diff.shape != g.shape:
            raise ValueError("local model dimension mismatch")
        total += float(diff @ diff)
    return total / len(local_models)


def population_loss(clients, theta: np.ndarray) -> float:
    vals = [c.full_loss(theta) for c in clients if c.evaluable]
    if not vals:
        raise ValueError("no evaluable clients")
    return float(np.mean(vals))


def population_grad(clients, theta: np.ndarray) -> np.ndarray:
    grads = [c.full_grad(theta) for c in clients if c.evaluable]
    if not grads:
        raise ValueError("no evaluable clients")
    return np.mean(grads, axis=0)


def global_sharpness(clients, theta: np.ndarray, rho: float) -> float:
    """One-ascent-step sharpness proxy of the population loss.

    Climbs distance rho along the normalized population gradient and
    reports the loss increase; 0 when the gradient is (near-)zero. This
    approximates the worst loss in a rho-ball with a single ascent step.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    g = population_grad(clients, theta)
    norm = float(np.linalg.norm(g))
    if norm < ZERO_NORM:
        return 0.0
    return population_loss(clients, theta + (rho / norm) * g) - population_loss(clients, theta)


def extrapolated_grad_norm(clients, theta, momentum_vec, momentum: float) -> float:
    """Norm of the population gradient at the momentum look-ahead point."""
    theta = np.asarray(theta, dtype=np.float64)
    point = theta + momentum * np.asarray(momentum_vec, dtype=np.float64)
    return float(np.linalg.norm(population_grad(clients, point)))


@dataclass
class SurfaceGrid:
    """2-D slice of the population loss around a center model."""

    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    span: float
    res: int
    values: np.ndarray  # (res, res); values[a][b] = loss at center + x_a*u + y_b*v


def _filter_normalize(direction: np.ndarray, theta: np.ndarray, blocks) -> np.ndarray:
    """Rescale each parameter block of the direction to the block norm of theta.

    Blocks where either norm is (near-)zero are left as drawn; without the
    guard a zero model would erase the direction entirely.
    """
    out = direction.copy()
    for b in blocks:
        t_norm = float(np.linalg.norm(theta[b]))
        d_norm = float(np.linalg.norm(out[b]))
        if t_norm >= ZERO_NORM and d_norm >= ZERO_NORM:
            out[b] *= t_norm / d_norm
    return out


def loss_surface_slice(
    clients,
    theta: np.ndarray,
    seed: int,
    span: float,
    res: int,
    blocks=None,
    directions=None,
) -> SurfaceGrid:
    """Evaluate the population loss on a res x res grid around theta.

    Two random directions are drawn from the seed, orthogonalized, and
    filter-normalized per parameter block so slices of differently scaled
    models are comparable. ``directions`` overrides the random draw (the
    override still goes through orthogonalization and normalization).
    Resolution must be odd so the exact center is a grid point.
    """
    if res < 3 or res % 2 == 0:
        raise ValueError("resolution must be odd and >= 3")
    if span <= 0:
        raise ValueError("span must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    d = theta.shape[0]
    if blocks is None:
        model = getattr(clients[0], "model", None)
        blocks = model.blocks() if model is not None else [slice(0, d)]
    if directions is None:
        rng = rng_for(seed, "surface")
        u = rng.standard_normal(d)
        v = rng.standard_normal(d)
    else:
        u, v = (np.asarray(w, dtype=np.float64).copy() for w in directions)
    # Gram-Schmidt, then per-block rescale
    u_norm = float(np.linalg.norm(u))
    if u_norm >= ZERO_NORM:
        v = v - (float(v @ u) / u_norm**2) * u
    u = _filter_normalize(u, theta, blocks)
    v = _filter_normalize(v, theta, blocks)
    coords = np.linspace(-span, span, res)
    values = np.empty((res, res))
    for a, x in enumerate(coords):
        base = theta + x * u
        for b, y in enumerate(coords):
            values[a, b] = population_loss(clients, base + y * v)
    return SurfaceGrid(center=theta, u=u, v=v, span=span, res=res, values=values)


def write_surface(grid: SurfaceGrid, path) -> None:
    """Plain-text grid: one header line, then res rows of res values."""
    with open(path, "w", newline="\n") as f:
        f.write(f"{SURFACE_HEADER} res={grid.res} range={repr(float(grid.span))}\n")
        for row in grid.values:
            f.write(" ".join(repr(float(v)) for v in row))
            f.write("\n")


def read_surface(path) -> tuple[np.ndarray, float, int]:
    """Parse a surface file back into (values, span, res)."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith(SURFACE_HEADER):
        raise ValueError(f"{path}: not a surface grid file")
    fields = dict(part.split("=", 1) for part in lines[0].split()[3:])
    res = int(fields["res"])
    span = float(fields["range"])
    if len(lines) != res + 1:
        raise ValueError(f"{path}: expected {res} rows, found {len(lines) - 1}")
    values = np.array([[float(v) for v in line.split()] for line in lines[1:]])
    if values.shape != (res, res):
        raise ValueError(f"{path}: grid is not {res}x{res}")
    return values, span, res
