"""Polynomial-map modeling of accelerator lattices."""

__version__ = "0.1.0"

from .basis import MonomialBasis, enumerate_monomials, get_basis
from .polymap import TaylorMap, compose, compose_chain, evaluate, evaluate_batch, jacobian, kron_power
from .network import Network, TrackRecord, build_network, forward, load_model, one_turn_map, save_model
from .lattice import LatticeDoc, parse_lattice, plan_segments, serialize_lattice, split_at_monitors
from .symplectic import penalty_gradient, symplectic_penalty, symplectic_residual
