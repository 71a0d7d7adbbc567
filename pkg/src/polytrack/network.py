"""Layered polynomial-map network with BPM taps and parameter bindings."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import elements as elem
from .basis import ORDERING_TAG
from .lattice import LatticeDoc, SegmentPlan, plan_segments
from .polymap import TaylorMap, compose, compose_chain, evaluate, evaluate_batch

MODEL_FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Malformed or incompatible model file."""


class ParameterError(KeyError):
    """A parametric layer was evaluated without its parameter value."""


@dataclass(eq=False)
class Layer:
    map: TaylorMap
    tap: bool = False
    trainable: bool = False
    label: str = ""
    kind: str = "map"  # map | hcorrector | vcorrector | parametric
    params: tuple = ()  # names of extra trailing inputs

    def trainable_mask(self) -> list[np.ndarray]:
        """Which weight entries training may touch (correctors: kick rows of W0)."""
        masks = [np.ones_like(w, dtype=bool) for w in self.map.weights]
        if self.kind in ("hcorrector", "vcorrector"):
            masks = [np.zeros_like(w, dtype=bool) for w in self.map.weights]
            row = 1 if self.kind == "hcorrector" or self.map.n_out == 2 else 3
            masks[0][row, 0] = True
        return masks


@dataclass(eq=False)
class Network:
    layers: list
    state_dim: int
    order: int

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for i, layer in enumerate(self.layers):
            m = layer.map
            if m.n_out != self.state_dim:
                raise ValueError(f"layer {i} ('{layer.label}') outputs {m.n_out}, expected {self.state_dim}")
            if m.n_in != self.state_dim + len(layer.params):
                raise ValueError(f"layer {i} ('{layer.label}') takes {m.n_in} inputs, "
                                 f"expected {self.state_dim}+{len(layer.params)} params")
        taps = self.tap_labels()
        if len(taps) != len(set(taps)):
            dup = next(t for t in taps if taps.count(t) > 1)
            raise ValueError(f"duplicate tap label '{dup}': readings would be ambiguous")

    def tap_labels(self) -> list[str]:
        return [l.label for l in self.layers if l.tap]

    def copy(self) -> "Network":
        return Network([replace(l) for l in self.layers], self.state_dim, self.order)

    def param_names(self) -> list[str]:
        seen = []
        for l in self.layers:
            for p in l.params:
                if p not in seen:
                    seen.append(p)
        return seen


def _layer_input(layer: Layer, x: np.ndarray, params) -> np.ndarray:
    if not layer.params:
        return x
    if params is None:
        raise ParameterError(f"layer '{layer.label}' needs parameters {layer.params}")
    try:
        extra = [params[p] for p in layer.params]
    except KeyError as exc:
        raise ParameterError(f"missing parameter value for {exc.args[0]!r}") from None
    return np.concatenate([x, np.asarray(extra, dtype=np.float64)])


def _position(x: np.ndarray) -> tuple[float, float]:
    return (float(x[0]), float(x[2]) if x.shape[0] >= 4 else 0.0)


def forward(net: Network, x0, params=None, full_taps: bool = False):
    """Propagate one state through all layers.

    Returns (final state, taps) where taps maps each tap label to its (x, y)
    reading, or to the full state vector when `full_taps` is set.
    """
    x = np.asarray(x0, dtype=np.float64)
    taps = {}
    for layer in net.layers:
        x = evaluate(layer.map, _layer_input(layer, x, params))
        if layer.tap:
            taps[layer.label] = x.copy() if full_taps else _position(x)
    return x, taps


def forward_batch(net: Network, x0s, params=None):
    """Batch forward; returns (final states (N, n), taps label -> (N, 2))."""
    x = np.asarray(x0s, dtype=np.float64)
    taps = {}
    for layer in net.layers:
        if layer.params:
            if params is None:
                raise ParameterError(f"layer '{layer.label}' needs parameters {layer.params}")
            extra = np.array([params[p] for p in layer.params], dtype=np.float64)
            x = np.hstack([x, np.broadcast_to(extra, (x.shape[0], extra.size))])
        x = evaluate_batch(layer.map, x)
        if layer.tap:
            if net.state_dim >= 4:
                taps[layer.label] = x[:, (0, 2)].copy()
            else:
                taps[layer.label] = np.stack([x[:, 0], np.zeros(x.shape[0])], axis=1)
    return x, taps


def _param_embedding(state_dim: int, order: int, values) -> TaylorMap:
    """Affine map appending fixed parameter values as extra coordinates."""
    values = np.asarray(values, dtype=np.float64)
    n_out = state_dim + values.size
    w = TaylorMap.zero_weights(state_dim, n_out, order)
    w[0][state_dim:, 0] = values
    w[1][:state_dim, :] = np.eye(state_dim)
    return TaylorMap(state_dim, n_out, order, tuple(w))


def one_turn_map(net: Network, params=None) -> TaylorMap:
    """Left-to-right composition of all layers, truncated at the order."""
    maps = []
    for layer in net.layers:
        if layer.params:
            if params is None:
                raise ParameterError(f"layer '{layer.label}' needs parameters {layer.params}")
            values = [params[p] for p in layer.params]
            maps.append(compose(_param_embedding(net.state_dim, net.order, values), layer.map))
        else:
            maps.append(layer.map)
    return compose_chain(maps)


# -- construction from a lattice ----------------------------------------------

def build_network(doc: LatticeDoc, order: int = 2, merge_policy: str = "minimal",
                  sextupole_slices: int = 4, paper_compat: bool = False,
                  plan: SegmentPlan | None = None) -> Network:
    """Build layer maps from a monitor-split lattice document."""
    if plan is None:
        plan = plan_segments(doc, merge_policy)
    n = doc.dim
    layers = []
    for seg in plan.segments:
        if seg.kind == "parametric":
            spec = doc.definitions[seg.element_names[0]]
            m = elem.element_map(spec, n, order, sextupole_slices, paper_compat)
            layers.append(Layer(m, tap=seg.tap, trainable=seg.trainable,
                                label=seg.label, kind="parametric", params=(spec.name,)))
            continue
        maps = [elem.element_map(doc.definitions[name], n, order, sextupole_slices, paper_compat)
                for name in seg.element_names]
        m = compose_chain(maps) if maps else TaylorMap.identity(n, order)
        layers.append(Layer(m, tap=seg.tap, trainable=seg.trainable,
                            label=seg.label, kind=seg.kind))
    return Network(layers, state_dim=n, order=order)


# -- serialization --------------------------------------------------------------

def save_model(net: Network) -> bytes:
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "order": net.order,
        "state_dim": net.state_dim,
        "basis": ORDERING_TAG,
        "layers": [
            {
                "label": l.label,
                "tap": l.tap,
                "trainable": l.trainable,
                "kind": l.kind,
                "params": list(l.params),
                "weights": {f"W{d}": w.tolist() for d, w in enumerate(l.map.weights)},
            }
            for l in net.layers
        ],
    }
    return json.dumps(doc, indent=1).encode()


def load_model(data: bytes) -> Network:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"not a valid model file: {exc}") from exc
    for key in ("version", "order", "state_dim", "basis", "layers"):
        if key not in doc:
            raise ModelFormatError(f"model file missing key '{key}'")
    if doc["version"] != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {doc['version']}")
    if doc["basis"] != ORDERING_TAG:
        raise ModelFormatError(f"unsupported basis convention '{doc['basis']}'")
    order, state_dim = doc["order"], doc["state_dim"]
    layers = []
    for i, ld in enumerate(doc["layers"]):
        try:
            params = tuple(ld.get("params", ()))
            n_in = state_dim + len(params)
            weights = [np.array(ld["weights"][f"W{d}"], dtype=np.float64)
                       for d in range(order + 1)]
            layers.append(Layer(TaylorMap(n_in, state_dim, order, tuple(weights)),
                                tap=ld["tap"], trainable=ld["trainable"],
                                label=ld["label"], kind=ld.get("kind", "map"),
                                params=params))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"layer {i}: {exc}") from exc
    return Network(layers, state_dim=state_dim, order=order)


# -- turn-by-turn records --------------------------------------------------------

@dataclass
class TrackRecord:
    """Per-turn (x, y) readings at each tap, with a validity mask."""

    tap_labels: list
    readings: np.ndarray  # (n_turns, n_taps, 2)
    valid: np.ndarray  # same shape, bool

    def __post_init__(self):
        self.readings = np.asarray(self.readings, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.readings.shape:
            raise ValueError("mask and readings must have identical shape")

    @property
    def n_turns(self) -> int:
        return self.readings.shape[0]

    @classmethod
    def empty(cls, tap_labels, n_turns: int) -> "TrackRecord":
        shape = (n_turns, len(tap_labels), 2)
        return cls(list(tap_labels), np.zeros(shape), np.ones(shape, dtype=bool))

    def series(self, tap: str, coord: int = 0) -> np.ndarray:
        return self.readings[:, self.tap_labels.index(tap), coord]

    def rms(self, mask=None) -> float:
        m = self.valid if mask is None else (self.valid & mask)
        if not m.any():
            return 0.0
        return float(np.sqrt(np.mean(self.readings[m] ** 2)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["turn", "tap", "x", "y", "valid"])
        for t in range(self.n_turns):
            for j, label in enumerate(self.tap_labels):
                w.writerow([t, label, repr(float(self.readings[t, j, 0])),
                            repr(float(self.readings[t, j, 1])), int(self.valid[t, j, 0])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrackRecord":
        rows = list(csv.DictReader(io.StringIO(text)))
        labels = []
        for r in rows:
            if r["tap"] not in labels:
                labels.append(r["tap"])
        n_turns = 1 + max((int(r["turn"]) for r in rows), default=-1)
        rec = cls.empty(labels, n_turns)
        rec.valid[:] = False
        for r in rows:
            t, j = int(r["turn"]), labels.index(r["tap"])
            rec.readings[t, j] = (float(r["x"]), float(r["y"]))
            rec.valid[t, j] = bool(int(r["valid"]))
        return rec
