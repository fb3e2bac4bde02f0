"""Strict JSON run configurations for the command-line tools.

Unknown keys are rejected, types are checked, and all paths are resolved
relative to the configuration file so runs are reproducible from anywhere.
"""

import json
import os

import numpy as np


class ConfigError(ValueError):
    pass


def _check_type(value, kind, where):
    if kind == "number":
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if kind == "int":
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if kind == "vec3":
        if not isinstance(value, (list, tuple)) or len(value) != 3:
            raise ConfigError(f"{where}: expected a 3-vector")
        return np.asarray([float(v) for v in value])
    if kind == "ivec3":
        if not isinstance(value, (list, tuple)) or len(value) != 3:
            raise ConfigError(f"{where}: expected 3 integers")
        return tuple(int(v) for v in value)
    raise AssertionError(kind)


def parse_block(data, schema, where="config"):
    """Validate a dict against {key: (kind, default)}; None default = required.

    kind may also be ("list", subschema) or ("block", subschema).
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(data) - set(schema)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    out = {}
    for key, (kind, default) in schema.items():
        if key not in data:
            if default is REQUIRED:
                raise ConfigError(f"{where}: missing required key {key!r}")
            if isinstance(kind, tuple) and kind[0] == "block" and isinstance(default, dict):
                out[key] = parse_block(default, kind[1], f"{where}.{key}")
            else:
                out[key] = default
            continue
        value = data[key]
        w = f"{where}.{key}"
        if isinstance(kind, tuple) and kind[0] == "block":
            out[key] = parse_block(value, kind[1], w)
        elif isinstance(kind, tuple) and kind[0] == "list":
            if not isinstance(value, list):
                raise ConfigError(f"{w}: expected a list")
            out[key] = [parse_block(v, kind[1], f"{w}[{i}]") for i, v in enumerate(value)]
        elif isinstance(kind, tuple) and kind[0] == "optional":
            out[key] = None if value is None else _check_type(value, kind[1], w)
        else:
            out[key] = _check_type(value, kind, w)
    return out


class _Required:
    def __repr__(self):
        return "<required>"


REQUIRED = _Required()

BOX_SCHEMA = {
    "lo": ("vec3", REQUIRED),
    "hi": ("vec3", REQUIRED),
    "value": ("vec3", np.zeros(3)),
}

LOAD_SCHEMA = {
    "lo": ("vec3", REQUIRED),
    "hi": ("vec3", REQUIRED),
    "force": ("vec3", REQUIRED),
}

STIFF_REGION_SCHEMA = {
    "lo": ("vec3", REQUIRED),
    "hi": ("vec3", REQUIRED),
    "multiplier": ("number", REQUIRED),
}

GRID_SCHEMA = {
    "file": (("optional", "str"), None),
    "shape": (("optional", "str"), None),
    "dims": ("ivec3", (16, 16, 16)),
    "extent": ("number", 1.0),
}

MATERIAL_SCHEMA = {
    "young_modulus": ("number", REQUIRED),
    "poisson_ratio": ("number", REQUIRED),
    "density": ("number", 1000.0),
    "stiffness_regions": (("list", STIFF_REGION_SCHEMA), []),
}

SETUP_SCHEMA = {
    "dt": (("optional", "number"), None),
    "gravity": ("vec3", np.zeros(3)),
    "dirichlet": (("list", BOX_SCHEMA), []),
    "loads": (("list", LOAD_SCHEMA), []),
}

QUADRATURE_SCHEMA = {
    "source": ("str", "neural"),
    "order": ("int", 2),
    "net": (("optional", "str"), None),
    "oracle_res": ("int", 32),
}

SOLVER_SCHEMA = {
    "kind": ("str", "mixed"),
    "tol": ("number", 1e-6),
    "max_iters": ("int", 100),
    "linear_solver": ("str", "jacobi_pcg"),
    "linear_tol": ("number", 1e-8),
    "epsilon": (("optional", "number"), None),
}

QUAD_TRAIN_SCHEMA = {
    "order": ("int", 2),
    "dataset_size": ("int", 2**18),
    "batch_size": ("int", 2**12),
    "iterations": ("int", 8000),
    "learning_rate": ("number", 1e-3),
    "weight_decay": ("number", 1e-4),
    "gamma_box": ("number", 10.0),
    "gamma_cond": ("number", 1e-5),
    "oracle_res": ("int", 16),
    "test_size": ("int", 2**10),
    "eval_every": ("int", 250),
    "seed": ("int", 0),
    "output": ("str", "quadnet.bin"),
    "metrics": ("str", "quadnet_metrics.csv"),
}

QUAD_EVAL_SCHEMA = {
    "order": ("int", 2),
    "net": (("optional", "str"), None),
    "n_cells": ("int", 1000),
    "oracle_res": ("int", 32),
    "seed": ("int", 0),
    "per_cell_csv": ("str", "quad_eval_cells.csv"),
    "summary_csv": ("str", "quad_eval_summary.csv"),
}

SIMULATE_SCHEMA = {
    "grid": (("block", GRID_SCHEMA), REQUIRED),
    "material": (("block", MATERIAL_SCHEMA), REQUIRED),
    "setup": (("block", SETUP_SCHEMA), REQUIRED),
    "quadrature": (("block", QUADRATURE_SCHEMA), {}),
    "solver": (("block", SOLVER_SCHEMA), {}),
    "seed": ("int", 0),
    "outputs": (
        ("block", {
            "rest_obj": (("optional", "str"), None),
            "deformed_obj": (("optional", "str"), None),
            "trace_csv": (("optional", "str"), None),
            "strain_vtk": (("optional", "str"), None),
        }),
        {},
    ),
}

OPTIMIZE_SCHEMA = {
    "grid": (("block", GRID_SCHEMA), REQUIRED),
    "material": (("block", MATERIAL_SCHEMA), REQUIRED),
    "setup": (("block", SETUP_SCHEMA), REQUIRED),
    "quadrature": (("block", QUADRATURE_SCHEMA), {}),
    "solver": (("block", SOLVER_SCHEMA), {}),
    "schedule": (
        ("block", {
            "total_iters": ("int", 200),
            "recon_only_fraction": ("number", 0.30),
            "dt_ramp_fraction": ("number", 0.50),
            "dt_initial_scale": ("number", 0.1),
            "dt_final": ("number", 1.0),
            "learning_rate": ("number", 0.02),
        }),
        {},
    ),
    "loss": (
        ("block", {
            "ell_u": ("number", 1.0),
            "ell_sigma": ("number", 0.0),
            "power": ("int", 8),
            "recon_weight": ("number", 1.0),
            "phys_weight": ("number", 1.0),
            "reg_weight": ("number", 0.0),
        }),
        {},
    ),
    "smoothing": (
        ("block", {
            "sigma": ("number", 1.0),
            "kernel_radius": ("int", 3),
            "symmetry_axis": (("optional", "int"), None),
        }),
        {},
    ),
    "newton_steps": ("int", 5),
    "init_noise": ("number", 0.5),
    "optimize_shape": ("bool", True),
    "optimize_stiffness": ("bool", False),
    "seed": ("int", 0),
    "snapshot_every": ("int", 0),
    "outputs": (
        ("block", {
            "trace_csv": ("str", "optimize_trace.csv"),
            "final_grid": ("str", "final_grid.txt"),
            "rest_obj": (("optional", "str"), None),
            "deformed_obj": (("optional", "str"), None),
        }),
        {},
    ),
}


def load_config(path, schema):
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = parse_block(data, schema)
    cfg["_base_dir"] = os.path.dirname(os.path.abspath(path))
    return cfg


def resolve_path(cfg, path):
    if path is None:
        return None
    if os.path.isabs(path):
        return path
    return os.path.join(cfg["_base_dir"], path)
