"""Backward/forward-sweep power flow for radial three-phase feeders.

State ordering is the model's slot list: bus-major, phase-minor. Voltages
are complex line-to-neutral volts; the source bus is the slack with a
balanced reference (angles 0, -120, +120 degrees for phases A, B, C).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dsse.grid_model import FeederModel

SLACK_ANGLES = {"A": 0.0, "B": -2.0 * np.pi / 3.0, "C": 2.0 * np.pi / 3.0}

DEFAULT_TOL_PU = 1e-8
DEFAULT_MAX_ITER = 100


class PowerFlowError(RuntimeError):
    pass


class NotConvergedError(PowerFlowError):
    def __init__(self, iterations, mismatch):
        super().__init__(
            f"power flow did not converge in {iterations} iterations "
            f"(last mismatch {mismatch:.3e} V)"
        )
        self.iterations = iterations
        self.mismatch = mismatch


@dataclass
class StateVector:
    """Per (bus, phase) complex voltage, rectangular under the hood.

    ``values[s]`` is the phasor for the model's slot ``s``; ``rect`` is the
    interleaved real/imag vector of length ``2 * n_slots`` used by the
    estimator (slot s -> entries 2s, 2s+1).
    """

    values: np.ndarray  # complex, (n_slots,)

    @property
    def rect(self) -> np.ndarray:
        out = np.empty(2 * len(self.values))
        out[0::2] = self.values.real
        out[1::2] = self.values.imag
        return out

    @staticmethod
    def from_rect(rect: np.ndarray) -> "StateVector":
        return StateVector(rect[0::2] + 1j * rect[1::2])

    def magnitudes(self) -> np.ndarray:
        return np.abs(self.values)

    def copy(self) -> "StateVector":
        return StateVector(self.values.copy())


@dataclass
class PowerFlowResult:
    state: StateVector
    branch_currents: dict  # branch index -> complex array over branch phases
    iterations: int
    max_mismatch: float


def slack_state(model: FeederModel) -> StateVector:
    """Balanced nominal voltages at every bus (flat start / slack reference)."""
    values = np.array(
        [
            model.buses[b].base_voltage * np.exp(1j * SLACK_ANGLES[p])
            for b, p in model.slots
        ]
    )
    return StateVector(values)


def voltage_magnitudes(state: StateVector) -> np.ndarray:
    """Element-wise modulus of the rectangular voltage pairs."""
    return state.magnitudes()


def solve_power_flow(
    model: FeederModel,
    loads: dict | None = None,
    tolerance: float | None = None,
    max_iter: int = DEFAULT_MAX_ITER,
) -> PowerFlowResult:
    """Fixed point of backward current sweep / forward voltage-drop sweep.

    ``loads`` maps bus index -> {phase: complex S in W + jvar}; defaults to
    the feeder's own loads. ``tolerance`` is in volts and defaults to 1e-8
    of the base voltage.
    """
    if loads is None:
        loads = {ld.bus: ld.power for ld in model.loads}
    for bus, power in loads.items():
        for p in power:
            if p not in model.buses[bus].phases:
                raise PowerFlowError(
                    f"load on phase {p} absent at bus {model.buses[bus].label}"
                )
    if tolerance is None:
        tolerance = DEFAULT_TOL_PU * model.base_voltage
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")

    order = model.bfs_order()
    # branch feeding each non-source bus, with orientation parent -> child
    feed = {}
    for child, parent in order[1:]:
        feed[child] = model.branch_between(parent, child)

    v = slack_state(model).values.copy()
    slack = v.copy()
    branch_i = {br.index: np.zeros(len(br.phases), complex) for br in model.branches}

    mismatch = np.inf
    for it in range(1, max_iter + 1):
        # backward: aggregate currents from the leaves toward the source
        inflow = {b: {} for b, _ in order}  # bus -> phase -> downstream current
        for child, parent in reversed(order[1:]):
            br = feed[child]
            i_br = np.zeros(len(br.phases), complex)
            for k, p in enumerate(br.phases):
                i = 0.0 + 0.0j
                s = loads.get(child, {}).get(p)
                if s is not None:
                    i += np.conj(s / v[model.slot_index(child, p)])
                i += inflow[child].get(p, 0.0)
                i_br[k] = i
            branch_i[br.index] = i_br
            for k, p in enumerate(br.phases):
                inflow[parent][p] = inflow[parent].get(p, 0.0) + i_br[k]

        # forward: propagate voltage drops from the source outward
        v_new = v.copy()
        for b, p in model.slots:
            if b == model.source:
                v_new[model.slot_index(b, p)] = slack[model.slot_index(b, p)]
        for child, parent in order[1:]:
            br = feed[child]
            vp = np.array([v_new[model.slot_index(parent, p)] for p in br.phases])
            vc = vp - br.series_impedance @ branch_i[br.index]
            for k, p in enumerate(br.phases):
                v_new[model.slot_index(child, p)] = vc[k]
            # phases of the child not carried by the branch keep the slack value
        mismatch = float(np.max(np.abs(v_new - v))) if len(v) else 0.0
        v = v_new
        if mismatch < tolerance:
            return PowerFlowResult(StateVector(v), branch_i, it, mismatch)

    raise NotConvergedError(max_iter, mismatch)


def complex_power_balance(model: FeederModel, result: PowerFlowResult, loads=None):
    """(source injection, total load, total series loss) as complex powers.

    Diagnostic used by tests: source injection = load + loss on a converged
    solution, up to tolerance-induced slack.
    """
    if loads is None:
        loads = {ld.bus: ld.power for ld in model.loads}
    v = result.state.values
    s_src = 0.0 + 0.0j
    for br in model.branches_at(model.source):
        i = result.branch_currents[br.index]
        away = br.from_bus == model.source
        for k, p in enumerate(br.phases):
            sign = 1.0 if away else -1.0
            s_src += v[model.slot_index(model.source, p)] * np.conj(sign * i[k])
    s_load = sum(s for power in loads.values() for s in power.values())
    s_loss = 0.0 + 0.0j
    for br in model.branches:
        i = result.branch_currents[br.index]
        drop = br.series_impedance @ i
        s_loss += drop @ np.conj(i)
    return s_src, s_load, s_loss
