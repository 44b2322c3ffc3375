"""Event-count energy model and savings relative to the dense baseline.

Coefficients are in arbitrary units.  The shipped defaults are fitted to
published savings ratios, not measured; see ``calibrate``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from importlib import resources

import numpy as np

from .systolic import EventCounters

# counter field -> coefficient field
CATEGORIES = {
    "weight_fetches": "e_weight_fetch",
    "mac_ops": "e_mac",
    "index_reads": "e_index_read",
    "reorder_moves": "e_reorder_move",
    "act_fetches": "e_act_fetch",
    "output_writes": "e_output_write",
}

SAVINGS_TARGETS = {"sps": 4.49, "fkw_model": 3.1, "csr_model": 1.4}


@dataclass(frozen=True)
class EnergyCoefficients:
    e_weight_fetch: float = 1.0
    e_mac: float = 1.0
    e_index_read: float = 0.0
    e_reorder_move: float = 0.0
    e_act_fetch: float = 0.0
    e_output_write: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def scaled(self, **factors) -> "EnergyCoefficients":
        return EnergyCoefficients(**{f.name: getattr(self, f.name) * factors.get(f.name, 1.0)
                                     for f in fields(self)})

    def to_dict(self) -> dict:
        return asdict(self)


def load_coefficients(path=None) -> EnergyCoefficients:
    if path is None:
        text = resources.files("spsflow").joinpath("data/energy_coefficients.json").read_text()
    else:
        with open(path) as f:
            text = f.read()
    doc = json.loads(text)
    return EnergyCoefficients(**doc["coefficients"])


def breakdown(counters: EventCounters, coeffs: EnergyCoefficients) -> dict[str, float]:
    return {name: getattr(counters, name) * getattr(coeffs, coef) for name, coef in CATEGORIES.items()}


def energy(counters: EventCounters, coeffs: EnergyCoefficients) -> float:
    return float(sum(breakdown(counters, coeffs).values()))


def savings(mode_energy: float, dense_energy: float) -> float:
    if mode_energy <= 0:
        raise ValueError("mode energy must be positive to form a savings ratio")
    return dense_energy / mode_energy


@dataclass
class EnergyReport:
    energy: dict[str, float]
    savings: dict[str, float]
    breakdown: dict[str, dict[str, float]]

    def rows(self) -> list[dict]:
        out = []
        for mode, e in self.energy.items():
            row = {"mode": mode, "energy": e, "savings": self.savings[mode]}
            row.update(self.breakdown[mode])
            out.append(row)
        return out


def energy_report(counters_by_mode: dict[str, EventCounters], coeffs: EnergyCoefficients,
                  baseline: str = "dense_baseline") -> EnergyReport:
    e = {m: energy(c, coeffs) for m, c in counters_by_mode.items()}
    return EnergyReport(
        energy=e,
        savings={m: savings(v, e[baseline]) for m, v in e.items()},
        breakdown={m: breakdown(c, coeffs) for m, c in counters_by_mode.items()},
    )


def calibrate(counters_by_mode: dict[str, EventCounters], targets: dict[str, float] = SAVINGS_TARGETS,
              base: EnergyCoefficients = EnergyCoefficients()) -> EnergyCoefficients:
    """Fit e_index_read and e_reorder_move to target savings ratios.

    Every other coefficient stays as in ``base``.  Each target fixes the
    energy its mode should have, ``E_dense / target``; the two free
    coefficients enter linearly, so this is a least-squares problem on
    relative energy error.
    """
    dense_e = energy(counters_by_mode["dense_baseline"], base)
    rows, rhs = [], []
    for mode, target in targets.items():
        c = counters_by_mode[mode]
        want = dense_e / target
        fixed = energy(c, base.scaled(e_index_read=0.0, e_reorder_move=0.0))
        rows.append([c.index_reads / want, c.reorder_moves / want])
        rhs.append((want - fixed) / want)
    (e_idx, e_reorder), *_ = np.linalg.lstsq(np.array(rows, dtype=float), np.array(rhs), rcond=None)
    values = base.to_dict()
    values.update(e_index_read=max(0.0, float(e_idx)), e_reorder_move=max(0.0, float(e_reorder)))
    return EnergyCoefficients(**values)


COEFFICIENTS_VERSION = 1


def calibration_document(coeffs: EnergyCoefficients, fixture: dict,
                         targets: dict[str, float] = SAVINGS_TARGETS) -> dict:
    return {
        "version": COEFFICIENTS_VERSION,
        "calibrated": True,
        "note": ("Fitted, not measured. e_weight_fetch = e_mac = 1 and the activation/output "
                 "terms are held at 0; e_index_read and e_reorder_move minimise relative energy "
                 "error against the target savings on the fixture workload."),
        "fixture": fixture,
        "targets": targets,
        "coefficients": coeffs.to_dict(),
    }
