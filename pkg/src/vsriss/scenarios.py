"""Built-in scenarios, stored as plain config trees."""

from __future__ import annotations

import copy

_CERT = {
    "V": {"kind": "quadratic", "dim": 1},
    "alpha1": {"kind": "power", "c": 1, "p": 2},
    "alpha2": {"kind": "power", "c": 1, "p": 2},
    "alpha3": {"kind": "power", "c": 2.194, "p": 4},
    "rho": {"kind": "power", "c": 10, "p": 1},
    "M": 2, "E": 0.1, "R": 0.5,
    "T_tilde": {"from_sup": {"g": "cubic_u_bracket_sq", "box": [[-2, 2], [-0.1, 0.1]],
                             "factor": 1.8}},
}

BUILTIN = {
    "cubic-U-spiss": {
        "description": "cubic plant, Euler model, u = -x - 3x^3: Lyapunov certificate and "
                       "trajectory bound on the exact loop",
        "seed": 0,
        "plant": {"name": "cubic"},
        "law": {"name": "U"},
        "model": {"kind": "euler"},
        "schedule": {"x0": [1.0], "K": 200,
                     "periods": {"kind": "random_vsr", "T_star": 0.01},
                     "errors": {"kind": "random", "E": 0.1}},
        "checks": [
            {"kind": "lyapunov", "name": "certificate", "system": "approx",
             "certificate": _CERT, "expect": "pass"},
            {"kind": "iss", "name": "trajectory-bound", "system": "exact", "M": 2, "E": 0.1,
             "T_star_list": [0.02, 0.01], "trials": 20, "K": 400, "margin": 0.1,
             "ultimate_bound": True, "expect": "pass"},
        ],
    },
    "cubic-W-diverge": {
        "description": "cubic plant, Euler model, u = -x - x^3 with e = -1: the certificate "
                       "fails and trajectories diverge",
        "seed": 0,
        "plant": {"name": "cubic"},
        "law": {"name": "W"},
        "model": {"kind": "euler"},
        "schedule": {"x0": [1.0], "K": 40,
                     "periods": {"kind": "uniform", "T": 0.05},
                     "errors": {"kind": "constant", "e": [-1.0]}},
        "checks": [
            {"kind": "divergence", "name": "growth", "system": "approx", "threshold": 1e6,
             "growth_window": 10, "expect": "diverge"},
            {"kind": "lyapunov", "name": "certificate", "system": "approx",
             "certificate": _CERT, "expect": "fail"},
        ],
    },
    "cubic-consistency": {
        "description": "cubic plant: one-step consistency of Euler against the exact flow "
                       "and empirical multi-step error consistency",
        "seed": 0,
        "plant": {"name": "cubic"},
        "law": {"name": "U"},
        "model": {"kind": "euler"},
        "checks": [
            {"kind": "consistency", "name": "rho-40s", "omega": [[-1, 1], [-4, 4]],
             "rho": {"kind": "power", "c": 40, "p": 1},
             "T_grid": {"log": [1e-4, 1e-2, 9]}, "expect": "pass"},
            {"kind": "consistency", "name": "rho-tiny", "omega": [[-1, 1], [-4, 4]],
             "rho": {"kind": "power", "c": 1e-6, "p": 1},
             "T_grid": {"log": [1e-4, 1e-2, 9]}, "expect": "fail"},
            {"kind": "field_bounds", "name": "field-bounds", "X": [[-1, 1]], "U": [[-4, 4]],
             "rho": {"kind": "power", "c": 3, "p": 1}, "expect": "pass"},
            {"kind": "msec", "name": "multi-step", "X": [[-2, 2]], "E": [[-0.1, 0.1]],
             "L": 1.0, "eta": 0.05, "T_star": {"search_from": 0.03125}, "trials": 50,
             "expect": "pass"},
        ],
    },
}


def builtin_names() -> list[str]:
    return sorted(BUILTIN)


def builtin(name: str) -> dict:
    try:
        cfg = copy.deepcopy(BUILTIN[name])
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {builtin_names()}") from None
    cfg["name"] = name
    return cfg
