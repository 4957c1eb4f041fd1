"""Ground-truth generators for the two simulation studies (toy switching SSM, Lorenz)."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class IntegrationError(RuntimeError):
    pass


@dataclass
class LabeledSeries:
    y: np.ndarray           # T x D
    d_true: np.ndarray      # T, int
    z_true: np.ndarray      # T x Z
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.y) == len(self.d_true) == len(self.z_true)):
            raise ValueError("LabeledSeries: y, d_true and z_true lengths differ")

    def __len__(self):
        return len(self.y)


@dataclass
class ToyConfig:
    length: int = 2000
    gamma: tuple = ((0.95, 0.05), (0.05, 0.95))
    # noise standard deviations per regime (the published RMSE scale implies
    # the N(0, 10) / N(0, 5) terms are scales, not variances)
    transition_sd: tuple = (10.0, 1.0)
    emission_sd: tuple = (5.0, 0.5)
    initial_regime_prob: float = 0.5    # P(d_0 = 1)
    pin_regime: int | None = None       # force every d_t (deterministic checks)
    seed: int = 0

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if g.shape != (2, 2) or not np.allclose(g.sum(1), 1.0) or (g < 0).any():
            raise ValueError("gamma must be a 2x2 row-stochastic matrix")
        if min(self.transition_sd) < 0 or min(self.emission_sd) < 0:
            raise ValueError("noise scales must be nonnegative")


def _toy_transition(d: int, z: float, x: float) -> float:
    if d == 0:
        return 0.6 * z + 0.4 * np.tanh(x + z)
    return 0.1 * z + 0.2 * np.sin(x + z)


def _toy_emission(d: int, z: float) -> float:
    if d == 0:
        return 1.5 * z + np.tanh(z)
    return 0.5 * z + np.sin(z)


def simulate_toy(config: ToyConfig = ToyConfig()) -> LabeledSeries:
    """Two-regime nonlinear switching SSM with x_t = y_{t-1}, y_0 = 0, z_0 = 0."""
    rng = np.random.default_rng(config.seed)
    gamma = np.asarray(config.gamma, dtype=float)
    w_sd = np.asarray(config.transition_sd, dtype=float)
    v_sd = np.asarray(config.emission_sd, dtype=float)
    T = config.length
    y = np.zeros(T)
    z = np.zeros(T)
    d = np.zeros(T, dtype=int)
    d_prev = int(rng.random() < config.initial_regime_prob)
    z_prev = y_prev = 0.0
    for t in range(T):
        d_t = int(rng.random() < gamma[d_prev, 1])
        if config.pin_regime is not None:
            d_t = config.pin_regime
        w, v = rng.standard_normal(2)
        z_t = _toy_transition(d_t, z_prev, y_prev) + w_sd[d_t] * w
        y_t = _toy_emission(d_t, z_t) + v_sd[d_t] * v
        y[t], z[t], d[t] = y_t, z_t, d_t
        d_prev, z_prev, y_prev = d_t, z_t, y_t
    return LabeledSeries(y[:, None], d, z[:, None])


@dataclass
class LorenzConfig:
    length: int = 3000
    alpha: float = 10.0
    beta: float = 28.0
    gamma: float = 8.0 / 3.0
    dt: float = 0.01
    obs_dim: int = 10
    obs_noise_var: float = 0.5
    initial_state: tuple | None = None  # None: random start followed by burn-in
    burn_in: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")


def lorenz_field(z: np.ndarray, alpha: float, beta: float, gamma: float) -> np.ndarray:
    return np.array([
        alpha * (z[1] - z[0]),
        z[0] * (beta - z[2]) - z[1],
        z[0] * z[1] - gamma * z[2],
    ])


def rk4_step(z: np.ndarray, dt: float, f) -> np.ndarray:
    k1 = f(z)
    k2 = f(z + 0.5 * dt * k1)
    k3 = f(z + 0.5 * dt * k2)
    k4 = f(z + dt * k3)
    return z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def majority_filter(labels: np.ndarray, width: int = 3) -> np.ndarray:
    """Centred majority vote over ``width`` steps (edges use the shrunken window)."""
    labels = np.asarray(labels, dtype=int)
    half = width // 2
    out = labels.copy()
    for t in range(len(labels)):
        window = labels[max(0, t - half): t + half + 1]
        counts = np.bincount(window)
        best = np.flatnonzero(counts == counts.max())
        out[t] = labels[t] if labels[t] in best else best[0]
    return out


def simulate_lorenz(config: LorenzConfig = LorenzConfig()) -> LabeledSeries:
    """RK4 Lorenz trajectory observed through a random 10x3 map plus Gaussian noise.

    Regime label = lobe of the attractor (0 when the first coordinate is
    negative), smoothed with a 3-step majority filter.
    """
    rng = np.random.default_rng(config.seed)
    W = rng.standard_normal((config.obs_dim, 3))
    f = lambda z: lorenz_field(z, config.alpha, config.beta, config.gamma)  # noqa: E731
    if config.initial_state is None:
        z = rng.standard_normal(3) + np.array([1.0, 1.0, 20.0])
        burn = config.burn_in
    else:
        z = np.asarray(config.initial_state, dtype=float)
        burn = 0
    for _ in range(burn):
        z = rk4_step(z, config.dt, f)
    zs = np.empty((config.length, 3))
    for t in range(config.length):
        z = rk4_step(z, config.dt, f)
        if not np.all(np.isfinite(z)) or np.abs(z).max() > 1e3:
            raise IntegrationError(f"Lorenz trajectory escaped at step {t}: {z}")
        zs[t] = z
    noise = np.sqrt(config.obs_noise_var) * rng.standard_normal((config.length, config.obs_dim))
    y = zs @ W.T + noise
    d = majority_filter((zs[:, 0] >= 0).astype(int), 3)
    return LabeledSeries(y, d, zs, extras={"W": W})


# ---------------------------------------------------------------- file format

def write_series(series: LabeledSeries, path: str | Path) -> None:
    """Header ``y0..y{D-1},d_true,z0..z{Z-1}`` then one row per step."""
    D = series.y.shape[1]
    Z = series.z_true.shape[1]
    header = [f"y{i}" for i in range(D)] + ["d_true"] + [f"z{i}" for i in range(Z)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(len(series)):
            w.writerow([repr(float(v)) for v in series.y[t]] + [int(series.d_true[t])]
                       + [repr(float(v)) for v in series.z_true[t]])


def read_table(path: str | Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    if data.size == 0:
        data = data.reshape(0, len(header))
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    return header, data


def read_series(path: str | Path, target_columns: Sequence[str] | None = None) -> LabeledSeries:
    """Read a series file. Without ``target_columns`` the ``y*`` columns are targets.

    Files without ``d_true`` / ``z*`` columns (plain numeric tables) get
    zero labels and an empty latent block.
    """
    header, data = read_table(path)
    if target_columns is None:
        target_columns = [h for h in header if h.startswith("y") and h[1:].isdigit()]
    missing = [c for c in target_columns if c not in header]
    if missing or not target_columns:
        raise ValueError(f"{path}: target column(s) {missing or 'y*'} not found")
    y = data[:, [header.index(c) for c in target_columns]]
    d = data[:, header.index("d_true")].astype(int) if "d_true" in header else np.zeros(len(data), int)
    zcols = [i for i, h in enumerate(header) if h.startswith("z") and h[1:].isdigit()]
    z = data[:, zcols] if zcols else np.zeros((len(data), 0))
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{path}: non-finite target values")
    return LabeledSeries(y, d, z)
