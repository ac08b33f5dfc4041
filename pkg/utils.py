from dotenv import load_dotenv
load_dotenv()

import os
from typing import Callable, Tuple, TypeVar

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.stats import gaussian_kde, norm

T = TypeVar("T")


def get_setting(env_var: str, default: T, cast: Callable[[str], T] = str) -> T:
    """Returns a setting from the environment (or .env), falling back to the default."""
    value = os.getenv(env_var)
    if value is None or value.strip() == "":
        return default
    try:
        return cast(value.strip())
    except ValueError:
        raise ValueError(f"{env_var}={value!r} cannot be read as {getattr(cast, '__name__', cast)}") from None


def format_table(frame: pd.DataFrame, decimals: int = 2) -> str:
    """
    Renders a table for the terminal with probabilities and parameters rounded to
    `decimals` places; missing entries (the diagonal of pair tables) print as '-'.
    """
    return frame.to_string(float_format=lambda v: f"{v:.{decimals}f}", na_rep="-")


def kde_1d(values, grid_points: int = None) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE with Silverman's bandwidth, evaluated on a grid reaching 4 bandwidths past the data."""
    values = np.asarray(values, dtype=float)
    grid_points = grid_points or get_setting("MOBT_GRID_POINTS", 256, int)
    if values.size < 2 or np.ptp(values) == 0:
        raise ValueError("a density needs at least two distinct values")

    kde = gaussian_kde(values, bw_method="silverman")
    bandwidth = float(np.sqrt(kde.covariance[0, 0]))
    grid = np.linspace(values.min() - 4 * bandwidth, values.max() + 4 * bandwidth, grid_points)
    return grid, kde(grid)


def kde_2d(x, y, grid_points: int = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Product-kernel Gaussian KDE on a regular grid. Each axis gets its own bandwidth
    sigma * n^(-1/6); the result is indexed [ix, iy].
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    grid_points = grid_points or get_setting("MOBT_GRID_POINTS_2D", 64, int)
    if x.shape != y.shape or x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("a 2-D density needs two equally long, non-constant samples")

    n = x.size
    hx = np.std(x, ddof=1) * n ** (-1 / 6)
    hy = np.std(y, ddof=1) * n ** (-1 / 6)
    grid_x = np.linspace(x.min() - 4 * hx, x.max() + 4 * hx, grid_points)
    grid_y = np.linspace(y.min() - 4 * hy, y.max() + 4 * hy, grid_points)

    kernel_x = norm.pdf((grid_x[:, None] - x[None, :]) / hx) / hx
    kernel_y = norm.pdf((grid_y[:, None] - y[None, :]) / hy) / hy
    return grid_x, grid_y, kernel_x @ kernel_y.T / n


def grid_mass(density, *axes) -> float:
    """Trapezoid-rule integral of a density sampled on the given grid axes."""
    mass = np.asarray(density, dtype=float)
    for axis in reversed(axes):
        mass = trapezoid(mass, axis, axis=-1)
    return float(mass)
