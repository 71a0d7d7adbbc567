"""Multi-turn tracking, phase portraits, and betatron tune extraction."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .network import Network, TrackRecord, forward


class FlatSignalError(ValueError):
    """No oscillation in the input series; tune undefined."""


def track_turns(net: Network, x0, n_turns: int, aperture: float = 10e-3,
                params=None) -> TrackRecord:
    """Repeat the one-turn forward pass, recording taps each turn.

    The particle counts as lost from the first turn on which any coordinate
    exceeds the aperture or stops being finite; readings from then on are
    flagged invalid.
    """
    if n_turns < 0:
        raise ValueError("n_turns must be >= 0")
    labels = net.tap_labels()
    rec = TrackRecord.empty(labels, n_turns)
    x = np.asarray(x0, dtype=np.float64)
    lost = False
    for t in range(n_turns):
        if not lost:
            x, taps = forward(net, x, params)
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > aperture:
                lost = True
        if lost:
            rec.valid[t] = False
            continue
        for j, label in enumerate(labels):
            rec.readings[t, j] = taps[label]
    return rec


def turn_by_turn_state(net: Network, x0, n_turns: int, aperture: float = 10e-3,
                       params=None) -> np.ndarray:
    """Full state at the start of each turn; stops early on loss."""
    x = np.asarray(x0, dtype=np.float64)
    out = []
    for _ in range(n_turns):
        out.append(x.copy())
        x, _ = forward(net, x, params)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > aperture:
            break
    return np.array(out)


def phase_portrait(net: Network, amplitudes, n_turns: int, aperture: float = 10e-3,
                   params=None) -> dict:
    """(x, x') at the sequence start per turn, one point set per amplitude."""
    out = {}
    for a in amplitudes:
        x0 = np.zeros(net.state_dim)
        x0[0] = a
        states = turn_by_turn_state(net, x0, n_turns, aperture, params)
        out[float(a)] = states[:, :2] if states.size else np.zeros((0, 2))
    return out


def portrait_csv(portrait: dict) -> str:
    lines = ["amplitude,turn,x,xp"]
    for a, pts in portrait.items():
        for t in range(pts.shape[0]):
            lines.append(f"{float(a)!r},{t},{float(pts[t, 0])!r},{float(pts[t, 1])!r}")
    return "\n".join(lines) + "\n"


@dataclass
class TuneResult:
    q: float  # fractional tune in (0, 0.5]
    amplitude: float  # spectral peak amplitude
    method: str = "fft-parabolic"

    def to_json(self, plane: str = "x") -> str:
        return json.dumps({"plane": plane, "Q": self.q, "amplitude": self.amplitude,
                           "method": self.method}, indent=1)


def tune_fft(series) -> TuneResult:
    """Fractional tune of a turn-by-turn series.

    Mean is removed, the magnitude peak of the real FFT located, and the
    peak position refined with 3-point parabolic interpolation on the log
    magnitudes.  Real signals fold Q and 1-Q onto the same line, so the
    result lies in (0, 0.5].
    """
    y = np.asarray(series, dtype=np.float64)
    if y.ndim != 1 or y.size < 64:
        raise ValueError("need a 1-D series of at least 64 turns")
    if not np.all(np.isfinite(y)):
        raise ValueError("series contains non-finite values")
    if np.ptp(y) == 0.0:
        raise FlatSignalError("flat signal: no tune line")
    y = y - y.mean()
    n = y.size
    mag = np.abs(np.fft.rfft(y))
    peak = int(np.argmax(mag[1:])) + 1
    if 1 <= peak < mag.size - 1 and mag[peak - 1] > 0 and mag[peak + 1] > 0:
        la, lb, lc = np.log(mag[peak - 1: peak + 2])
        denom = la - 2 * lb + lc
        delta = 0.5 * (la - lc) / denom if denom != 0 else 0.0
        delta = float(np.clip(delta, -0.5, 0.5))
    else:
        delta = 0.0
    q = (peak + delta) / n
    q = min(max(q, 1e-12), 0.5)
    return TuneResult(q=float(q), amplitude=float(2 * mag[peak] / n))


def ring_tunes(net: Network, amplitude: float = 1e-4, n_turns: int = 1024,
               aperture: float = 10e-3, params=None) -> dict:
    """Horizontal and vertical tunes from tracking an off-axis particle."""
    x0 = np.zeros(net.state_dim)
    x0[0] = amplitude
    if net.state_dim >= 4:
        x0[2] = amplitude
    states = turn_by_turn_state(net, x0, n_turns, aperture, params)
    if states.shape[0] < 64:
        raise ValueError(f"particle lost after {states.shape[0]} turns; cannot extract tunes")
    out = {"x": tune_fft(states[:, 0])}
    if net.state_dim >= 4:
        out["y"] = tune_fft(states[:, 2])
    return out


def fit_conic_residual(points: np.ndarray) -> float:
    """Relative residual of the best-fit conic through (x, x') points.

    Fits a x^2 + b x x' + c x'^2 + d x + e x' + f = 0 by SVD on normalized
    coordinates; returns the RMS algebraic residual over the RMS of the
    quadratic terms, which is ~0 for points on an ellipse.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 8:
        raise ValueError("need at least 8 points")
    scale = np.sqrt(np.mean(pts ** 2, axis=0))
    scale[scale == 0] = 1.0
    x, xp = pts[:, 0] / scale[0], pts[:, 1] / scale[1]
    a = np.stack([x * x, x * xp, xp * xp, x, xp, np.ones_like(x)], axis=1)
    _, _, vt = np.linalg.svd(a, full_matrices=False)
    coef = vt[-1]
    res = a @ coef
    norm = np.sqrt(np.mean((a[:, :3] @ coef[:3]) ** 2) + np.mean((a[:, 3:] @ coef[3:]) ** 2))
    if norm == 0:
        return 0.0
    return float(np.sqrt(np.mean(res ** 2)) / norm)
