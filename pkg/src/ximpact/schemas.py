"""JSON schemas of the machine-readable outputs."""

from __future__ import annotations

CONTRACT_VERSIONS = {"ticks": 1, "panel": 1, "moments": 1, "impact_matrix": 1, "fit": 1,
                     "scan": 1, "significance": 1, "truth": 1, "manifest": 1}

_num = {"type": "number"}
_num_or_null = {"type": ["number", "null"]}
_matrix = {"type": "array", "items": {"type": "array", "items": _num}}
_pair = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1}

IMPACT_MATRIX = {
    "type": "object",
    "required": ["kind", "y", "tau_seconds", "lambda"],
    "properties": {"kind": {"enum": ["diag", "ml", "kyle"]}, "y": _num, "tau_seconds": _num_or_null,
                   "lambda": _matrix},
}

FIT = {
    "type": "object",
    "required": ["pair", "model", "weight", "segment", "tau", "r2", "delta_r2", "y"],
    "properties": {"pair": _pair, "model": {"enum": ["diag", "ml", "kyle"]},
                   "weight": {"type": "string"}, "segment": {"enum": ["in", "out"]},
                   "tau": {"type": "number", "exclusiveMinimum": 0},
                   "r2": {"type": "number", "maximum": 1}, "delta_r2": _num, "y": _num},
}

SCAN = {
    "type": "object",
    "required": ["pair", "model", "weight", "tau", "r2", "delta_r2"],
    "properties": {"pair": _pair, "model": {"enum": ["diag", "ml", "kyle"]},
                   "weight": {"type": "string"}, "tau": {"type": "number", "exclusiveMinimum": 0},
                   "r2": {"type": "number", "maximum": 1}, "delta_r2": _num},
}

SIGNIFICANCE = {
    "type": "object",
    "required": ["pair", "model", "tau", "F", "p", "robust"],
    "properties": {"pair": _pair, "model": {"enum": ["diag", "ml", "kyle"]}, "tau": _num,
                   "F": {"type": "number", "minimum": 0},
                   "p": {"type": "number", "minimum": 0, "maximum": 1}, "robust": {"type": "boolean"}},
}

MOMENTS = {
    "type": "array",
    "items": {"type": "object", "required": ["day", "sigma_hat", "omega_hat", "Sigma", "Omega", "R"],
              "properties": {"day": {"type": "integer"}, "Sigma": _matrix, "Omega": _matrix, "R": _matrix}},
}

TRUTH = {
    "type": "object",
    "required": ["lambda"],
    "properties": {"lambda": _matrix},
}

MANIFEST = {
    "type": "object",
    "required": ["command", "config_sha256", "seed", "contracts", "package_version", "outputs"],
    "properties": {
        "command": {"type": "string"},
        "config_sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "seed": {"type": ["integer", "null"]},
        "contracts": {"type": "object"},
        "package_version": {"type": "string"},
        "outputs": {"type": "array", "items": {
            "type": "object", "required": ["path", "sha256"],
            "properties": {"path": {"type": "string"},
                           "sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"}}}},
    },
}
