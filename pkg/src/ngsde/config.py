"""Declarative experiment configuration.

Configs are YAML mappings validated against a nested schema; unknown keys
are rejected with the offending key path.  The parsed config is kept as a
plain dict (round-trippable through YAML) with typed accessors in
:mod:`ngsde.experiments`.
"""

import copy

import yaml

from .errors import ConfigError

_SCALAR = (int, float)


def _type_name(t):
    return getattr(t, "__name__", str(t))


# schema nodes: dict -> nested mapping; tuple -> (types...); list -> list of
# scalars; "any" -> unchecked
SCHEMA = {
    "name": (str,),
    "seed": (int,),
    "output_dir": (str,),
    "metrics": list,
    "dataset": {
        "kind": (str,),            # generate | ingest
        "path": (str,),
        "seed": (int,),
        "trials": (int,),
        "t_max": _SCALAR,
        "dt": _SCALAR,
        "obs_every": (int,),
        "obs_fraction": _SCALAR,
        "obs_seed": (int,),
    },
    "model": {
        "dim": (int,),
        "drift": {
            "kind": (str,),
            "A": list,
            "b": list,
            "spiral_theta": _SCALAR,
            "spiral_decay": _SCALAR,
            "degree": (int,),
            "weights_scale": _SCALAR,
            "alpha": _SCALAR,
            "rho": _SCALAR,
            "beta": _SCALAR,
            "gamma": _SCALAR,
            "tau": _SCALAR,
            "mu": _SCALAR,
        },
        "diffusion": {"variance": _SCALAR, "matrix": list},
        "initial": {"mean": list, "cov": _SCALAR, "uniform_box": _SCALAR},
        "observation": {
            "kind": (str,),
            "n_out": (int,),
            "c_scale": _SCALAR,
            "d_scale": _SCALAR,
            "r_diag": _SCALAR,
            "width": _SCALAR,
            "peak": _SCALAR,
            "baseline": _SCALAR,
            "center_burn_in": _SCALAR,
            "param_seed": (int,),
        },
    },
    "inference": {
        "method": (str,),          # sing | vdp | kalman
        "iterations": (int,),
        "rho": {
            "kind": (str,),
            "rho": _SCALAR,
            "rho_start": _SCALAR,
            "rho_end": _SCALAR,
            "ramp_iters": (int,),
        },
        "expectation": {
            "method": (str,),
            "nodes_per_dim": (int,),
            "samples": (int,),
        },
        "omega": _SCALAR,
        "conversion": (str,),
        "max_halvings": (int,),
    },
    "learning": {
        "outer_iters": (int,),
        "e_steps_per_iter": (int,),
        "m_steps_per_iter": (int,),
        "learn_output": (bool,),
        "learn_r": (bool,),
        "learn_drift": (bool,),
        "drift_lr": _SCALAR,
        "drift_class": (str,),     # same-as-model | polynomial | linear | gp
        "drift_degree": (int,),
        "drift_init_scale": _SCALAR,
        "gp": {
            "inducing_per_dim": (int,),
            "inducing_lo": _SCALAR,
            "inducing_hi": _SCALAR,
            "lengthscale": _SCALAR,
            "outputscale": _SCALAR,
            "hyper_steps": (int,),
            "kernel_lr": _SCALAR,
        },
    },
    "bench": {
        "t_list": list,
        "d_list": list,
        "reps": (int,),
        "iterations": (int,),
        "trials": (int,),
    },
    "study_dt": {
        "dt_base": _SCALAR,
        "halvings": (int,),
        "refine": (int,),
        "obs_every_seconds": _SCALAR,
    },
}


def _validate(node, schema, path=""):
    if not isinstance(node, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    for key, val in node.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown key: {where}")
        spec = schema[key]
        if isinstance(spec, dict):
            _validate(val, spec, where)
        elif spec is list:
            if not isinstance(val, list):
                raise ConfigError(f"{where}: expected a list")
        else:
            if isinstance(val, bool) and bool not in spec:
                raise ConfigError(f"{where}: unexpected boolean")
            if not isinstance(val, spec):
                names = "/".join(_type_name(t) for t in spec)
                raise ConfigError(f"{where}: expected {names}, got "
                                  f"{_type_name(type(val))}")


def validate_config(cfg):
    _validate(cfg, SCHEMA)
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML parse error in {path}: {exc}") from exc
    if raw is None:
        raw = {}
    return validate_config(raw)


def loads_config(text):
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    return validate_config(raw)


def dump_config(cfg):
    return yaml.safe_dump(copy.deepcopy(cfg), sort_keys=True)


def preset_path(name):
    """Path of a packaged preset config."""
    from importlib.resources import files

    return files("ngsde").joinpath("presets", f"{name}.yaml")


def load_preset(name):
    return loads_config(preset_path(name).read_text())
