"""Measurement synthesis z = h(x) + e and the rows consumed by the estimator.

Measurement taxonomy and default accuracy classes:

* ``pmu`` -- synchronized voltage and branch-current phasors, stored as
  rectangular (real, imag) rows so they stay linear in the state.
  Maximum error 1% on magnitude and 1e-2 rad on angle, propagated to
  rectangular sigmas to first order.
* ``smart_meter`` -- per-phase P/Q at metered load buses, maximum error 2%.
* ``pseudo`` -- per-phase P/Q stand-ins at unmetered load buses, maximum
  error 30% or 50% depending on the scenario.
* ``zero_injection`` -- P/Q rows pinned to zero at buses with no load,
  maximum error 0.001% of the feeder power base.

"Maximum error" converts to a Gaussian sigma as max/3 (3-sigma coverage).
Injection rows use the load convention: positive value = power consumed at
the bus, so a load bus's P row equals its active demand.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from dsse.grid_model import FeederModel
from dsse.powerflow import StateVector

V_REAL, V_IMAG = "v_real", "v_imag"
I_REAL, I_IMAG = "i_real", "i_imag"
P_INJ, Q_INJ = "p_injection", "q_injection"

BUS_KINDS_ROWS = {V_REAL, V_IMAG, P_INJ, Q_INJ}
BRANCH_KINDS_ROWS = {I_REAL, I_IMAG}

PMU_MAG_MAX_ERROR = 0.01
PMU_ANGLE_MAX_ERROR = 1e-2  # rad, absolute
SMART_METER_MAX_ERROR = 0.02
PSEUDO_MAX_ERROR = 0.5
ZERO_INJECTION_MAX_ERROR = 1e-5

# relative floor keeping every variance strictly positive
SIGMA_FLOOR_REL = 1e-6


@dataclass(frozen=True)
class NoiseClass:
    kind: str  # pmu_voltage | pmu_current | smart_meter_power | pseudo_power | zero_injection
    max_error: float

    def __post_init__(self):
        if self.max_error <= 0:
            raise ValueError("max_error must be positive")


@dataclass
class Measurement:
    kind: str  # v_real | v_imag | i_real | i_imag | p_injection | q_injection
    locus: int  # bus index, or branch index for current kinds
    phase: str
    noise: NoiseClass
    value: float | None = None
    variance: float | None = None

    def key(self):
        return (self.kind, self.locus, self.phase, self.noise.kind, self.noise.max_error)


@dataclass
class MeasurementSet:
    """Ordered measurement rows plus the diagonal covariance they induce."""

    rows: list

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def values(self) -> np.ndarray:
        return np.array([m.value for m in self.rows], dtype=float)

    def variances(self) -> np.ndarray:
        return np.array([m.variance for m in self.rows], dtype=float)

    def signature(self) -> str:
        """Hash of the template structure (rows sans values)."""
        payload = json.dumps([m.key() for m in self.rows]).encode()
        return hashlib.sha256(payload).hexdigest()

    def with_values(self, values, variances) -> "MeasurementSet":
        return MeasurementSet(
            [
                replace(m, value=float(v), variance=float(s2))
                for m, v, s2 in zip(self.rows, values, variances)
            ]
        )

    def save(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "locus", "phase", "noise_class", "max_error", "value", "variance"])
            for m in self.rows:
                w.writerow(
                    [m.kind, m.locus, m.phase, m.noise.kind, repr(m.noise.max_error),
                     "" if m.value is None else repr(m.value),
                     "" if m.variance is None else repr(m.variance)]
                )

    @staticmethod
    def load(path) -> "MeasurementSet":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(
                    Measurement(
                        kind=rec["kind"],
                        locus=int(rec["locus"]),
                        phase=rec["phase"],
                        noise=NoiseClass(rec["noise_class"], float(rec["max_error"])),
                        value=float(rec["value"]) if rec["value"] else None,
                        variance=float(rec["variance"]) if rec["variance"] else None,
                    )
                )
        return MeasurementSet(rows)


def plan_measurements(
    model: FeederModel,
    pmu_buses,
    metered_loads=frozenset(),
    pseudo_noise: float = 0.3,
) -> MeasurementSet:
    """Template (values unset) for a PMU placement and metering choice.

    Rows, in stable order: PMU voltage (real+imag per phase) at each PMU
    bus; PMU current (real+imag per phase) on every branch incident to a
    PMU bus; P/Q per phase at every load bus (smart-meter class if metered,
    pseudo otherwise); P/Q per phase at every zero-injection bus.
    """
    pmu_buses = sorted(set(pmu_buses))
    if not pmu_buses:
        raise ValueError("pmu_buses must be non-empty")
    for b in pmu_buses:
        if not 0 <= b < model.n_buses:
            raise KeyError(f"invalid pmu bus id {b}")
    metered = set(metered_loads)
    load_buses = {ld.bus for ld in model.loads}
    if not metered <= load_buses:
        raise ValueError(f"metered buses {sorted(metered - load_buses)} carry no load")

    rows = []
    pmu_v = NoiseClass("pmu_voltage", PMU_MAG_MAX_ERROR)
    pmu_i = NoiseClass("pmu_current", PMU_MAG_MAX_ERROR)
    for b in pmu_buses:
        for p in model.buses[b].phases:
            rows.append(Measurement(V_REAL, b, p, pmu_v))
            rows.append(Measurement(V_IMAG, b, p, pmu_v))
    seen_branches = set()
    for b in pmu_buses:
        for br in model.branches_at(b):
            if br.index in seen_branches:
                continue
            seen_branches.add(br.index)
            for p in br.phases:
                rows.append(Measurement(I_REAL, br.index, p, pmu_i))
                rows.append(Measurement(I_IMAG, br.index, p, pmu_i))
    for ld in sorted(model.loads, key=lambda l: l.bus):
        cls = (
            NoiseClass("smart_meter_power", SMART_METER_MAX_ERROR)
            if ld.bus in metered
            else NoiseClass("pseudo_power", pseudo_noise)
        )
        for p in sorted(ld.power):
            rows.append(Measurement(P_INJ, ld.bus, p, cls))
            rows.append(Measurement(Q_INJ, ld.bus, p, cls))
    zi = NoiseClass("zero_injection", ZERO_INJECTION_MAX_ERROR)
    for bus in model.buses:
        if bus.kind == "zero_injection":
            for p in bus.phases:
                rows.append(Measurement(P_INJ, bus.index, p, zi))
                rows.append(Measurement(Q_INJ, bus.index, p, zi))
    return MeasurementSet(rows)


# -- h(x) and its Jacobian -------------------------------------------------
#
# Every row reduces to at most two complex quantities that are linear in the
# complex state: the local voltage V and a branch/injection current I, each
# expressed as {slot: complex coefficient}. PMU rows are linear in the
# rectangular state; injection rows are the bilinear form -V * conj(I)
# (consumption-positive).


def _branch_current_coeffs(model: FeederModel, branch, phase) -> dict:
    """Complex coefficients of I_phase (from -> to) w.r.t. the slot phasors."""
    y = branch.admittance
    k = branch.phases.index(phase)
    coeffs = {}
    for q_idx, q in enumerate(branch.phases):
        c = y[k, q_idx]
        coeffs[model.slot_index(branch.from_bus, q)] = coeffs.get(
            model.slot_index(branch.from_bus, q), 0.0
        ) + c
        coeffs[model.slot_index(branch.to_bus, q)] = coeffs.get(
            model.slot_index(branch.to_bus, q), 0.0
        ) - c
    return coeffs


def _injection_current_coeffs(model: FeederModel, bus, phase) -> dict:
    """Coefficients of the net current leaving `bus` into its branches."""
    coeffs = {}
    for br in model.branches_at(bus):
        if phase not in br.phases:
            continue
        sign = 1.0 if br.from_bus == bus else -1.0
        for slot, c in _branch_current_coeffs(model, br, phase).items():
            coeffs[slot] = coeffs.get(slot, 0.0) + sign * c
    return coeffs


class RowEvaluator:
    """Precomputed coefficient structure for one template, reused per state."""

    def __init__(self, model: FeederModel, template: MeasurementSet):
        self.model = model
        self.rows = []
        for m in template:
            if m.kind in (V_REAL, V_IMAG):
                slot = model.slot_index(m.locus, m.phase)
                self.rows.append((m.kind, slot, None))
            elif m.kind in (I_REAL, I_IMAG):
                br = model.branches[m.locus]
                self.rows.append(
                    (m.kind, None, _branch_current_coeffs(model, br, m.phase))
                )
            elif m.kind in (P_INJ, Q_INJ):
                slot = model.slot_index(m.locus, m.phase)
                self.rows.append(
                    (m.kind, slot, _injection_current_coeffs(model, m.locus, m.phase))
                )
            else:
                raise ValueError(f"unknown measurement kind {m.kind!r}")

    def h(self, state: StateVector) -> np.ndarray:
        v = state.values
        out = np.empty(len(self.rows))
        for r, (kind, slot, coeffs) in enumerate(self.rows):
            if kind == V_REAL:
                out[r] = v[slot].real
            elif kind == V_IMAG:
                out[r] = v[slot].imag
            else:
                i = sum(c * v[s] for s, c in coeffs.items())
                if kind == I_REAL:
                    out[r] = i.real
                elif kind == I_IMAG:
                    out[r] = i.imag
                else:
                    s_cons = -v[slot] * np.conj(i)
                    out[r] = s_cons.real if kind == P_INJ else s_cons.imag
        return out

    def jacobian(self, state: StateVector) -> np.ndarray:
        """Analytic d h / d x_rect, |rows| x (2 * n_slots)."""
        v = state.values
        H = np.zeros((len(self.rows), 2 * self.model.n_slots))
        for r, (kind, slot, coeffs) in enumerate(self.rows):
            if kind == V_REAL:
                H[r, 2 * slot] = 1.0
            elif kind == V_IMAG:
                H[r, 2 * slot + 1] = 1.0
            elif kind in (I_REAL, I_IMAG):
                for s, c in coeffs.items():
                    # dI/de = c, dI/df = jc
                    if kind == I_REAL:
                        H[r, 2 * s] = c.real
                        H[r, 2 * s + 1] = -c.imag
                    else:
                        H[r, 2 * s] = c.imag
                        H[r, 2 * s + 1] = c.real
            else:
                i = sum(c * v[s] for s, c in coeffs.items())
                vb = v[slot]
                for s, c in coeffs.items():
                    # dS/de_s = -(delta * conj(I) + V * conj(c))
                    # dS/df_s = -(j delta * conj(I) - j V * conj(c))
                    d_e = -vb * np.conj(c)
                    d_f = 1j * vb * np.conj(c)
                    if s == slot:
                        d_e -= np.conj(i)
                        d_f -= 1j * np.conj(i)
                    if kind == P_INJ:
                        H[r, 2 * s] += d_e.real
                        H[r, 2 * s + 1] += d_f.real
                    else:
                        H[r, 2 * s] += d_e.imag
                        H[r, 2 * s + 1] += d_f.imag
                if slot not in coeffs:
                    d_e = -np.conj(i)
                    d_f = -1j * np.conj(i)
                    if kind == P_INJ:
                        H[r, 2 * slot] += d_e.real
                        H[r, 2 * slot + 1] += d_f.real
                    else:
                        H[r, 2 * slot] += d_e.imag
                        H[r, 2 * slot + 1] += d_f.imag
        return H


def measurement_function(
    model: FeederModel, x: StateVector, template: MeasurementSet
) -> np.ndarray:
    """h(x) aligned with the template's row order."""
    return RowEvaluator(model, template).h(x)


def jacobian_rows(
    model: FeederModel, x: StateVector, template: MeasurementSet
) -> np.ndarray:
    """Analytic partial derivatives of every row w.r.t. the rectangular state."""
    return RowEvaluator(model, template).jacobian(x)


def _phasor_sigmas(value: complex, max_mag_err: float, max_ang_err: float, floor: float):
    """First-order propagation of magnitude/angle maxima to rectangular sigmas."""
    mag = abs(value)
    theta = np.angle(value)
    s_mag = max_mag_err * mag / 3.0
    s_ang = max_ang_err / 3.0
    c, s = np.cos(theta), np.sin(theta)
    s_re = np.hypot(c * s_mag, mag * s * s_ang)
    s_im = np.hypot(s * s_mag, mag * c * s_ang)
    return max(s_re, floor), max(s_im, floor)


def row_sigmas(model: FeederModel, template: MeasurementSet, h_true: np.ndarray):
    """Per-row Gaussian sigma implied by each row's noise class at h(x_true)."""
    v_floor = SIGMA_FLOOR_REL * model.base_voltage
    i_floor = SIGMA_FLOOR_REL * model.power_base / model.base_voltage
    s_floor = SIGMA_FLOOR_REL * model.power_base

    sigmas = np.empty(len(template))
    rows = template.rows
    r = 0
    while r < len(rows):
        m = rows[r]
        if m.kind in (V_REAL, I_REAL):
            # PMU rows come in (real, imag) pairs sharing one phasor
            pair = rows[r + 1]
            assert pair.kind in (V_IMAG, I_IMAG) and pair.locus == m.locus
            phasor = complex(h_true[r], h_true[r + 1])
            floor = v_floor if m.kind == V_REAL else i_floor
            s_re, s_im = _phasor_sigmas(
                phasor, m.noise.max_error, PMU_ANGLE_MAX_ERROR, floor
            )
            sigmas[r], sigmas[r + 1] = s_re, s_im
            r += 2
        elif m.kind in (P_INJ, Q_INJ):
            if m.noise.kind == "zero_injection":
                sigmas[r] = m.noise.max_error * model.power_base / 3.0
            else:
                sigmas[r] = max(m.noise.max_error * abs(h_true[r]) / 3.0, s_floor)
            r += 1
        else:
            raise ValueError(f"unpaired PMU row {m.kind}")
    return sigmas


def synthesize(
    template: MeasurementSet,
    x_true: StateVector,
    model: FeederModel,
    rng,
    noiseless: bool = False,
) -> MeasurementSet:
    """Realize a measurement set: value = h(x_true) + N(0, sigma) per row.

    ``rng`` is a seed or a ``numpy.random.Generator``; identical seeds give
    identical sets. ``noiseless=True`` keeps the class variances (R must
    stay positive definite) but skips the noise draw.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    h_true = measurement_function(model, x_true, template)
    sigmas = row_sigmas(model, template, h_true)
    noise = np.zeros_like(h_true) if noiseless else rng.normal(0.0, 1.0, len(h_true)) * sigmas
    return template.with_values(h_true + noise, sigmas**2)
