"""Run configuration: YAML files and ``key=value`` overrides with dotted keys."""

from __future__ import annotations

from pathlib import Path

import yaml

from ..gad import GadConfig
from ..hmm import HmmConfig, MSchedule
from ..sampling import MicroConfig
from ..scm import ScmConfig

MODEL_KEYS = {"kappa", "mu", "sigma", "grid_n", "D", "sigma2", "center"}
MICRO_KEYS = {"scheme", "dt_eff", "M", "burn_in"}
GAD_KEYS = {"dt", "dtau", "gamma", "K", "tol", "max_steps", "fd_h", "kick"}
HMM_KEYS = {"dt", "dtau", "gamma", "K", "M", "avg_burn_in", "tol", "max_time", "stop_err",
            "cold_burn_in", "kick", "M_schedule.r", "M_schedule.t_on", "M_schedule.M_max"}
SCM_KEYS = {"dt0", "eps_prime0", "adaptive", "trigger_err", "trigger_time", "trigger_force",
            "p_dt", "p_eps", "avg_burn_in", "max_time", "stop_err", "cov_variant", "gamma",
            "K", "fast_burn_in", "switch_to_hmm", "switch_eps", "kick", "record_every", "max_steps"}
SCAN_KEYS = {"n_points", "M", "segment"}
TOP_KEYS = {"seed", "model", "x0", "v0", "reference", "keep_states"}

KNOWN_KEYS = (
    TOP_KEYS
    | {f"model.{k}" for k in MODEL_KEYS}
    | {f"micro.{k}" for k in MICRO_KEYS}
    | {f"gad.{k}" for k in GAD_KEYS}
    | {f"hmm.{k}" for k in HMM_KEYS}
    | {f"scm.{k}" for k in SCM_KEYS}
    | {f"scan.{k}" for k in SCAN_KEYS}
)


class ConfigError(ValueError):
    """Unknown key or malformed value; the message names the offending key."""


def flatten(tree: dict, prefix="") -> dict:
    """Nested mappings to dotted keys. Keys already containing dots are kept."""
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        # model.D is a matrix, not a section
        if isinstance(value, dict) and name != "model":
            flat.update(flatten(value, name + "."))
        elif isinstance(value, dict):
            flat.update({f"model.{k}": v for k, v in value.items()})
        else:
            flat[name] = value
    return flat


def _scalar(value):
    # YAML 1.1 reads exponent literals without a dot (1e-3) as strings
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(value, list):
        return [_scalar(v) for v in value]
    return value


def validate(flat: dict) -> dict:
    for key in flat:
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    return flat


def load_config(path) -> dict:
    """Read a YAML file into a validated flat dict of dotted keys."""
    path = Path(path)
    try:
        with open(path) as fh:
            tree = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(tree, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return {k: _scalar(v) for k, v in validate(flatten(tree)).items()}


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as a YAML scalar or list."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    validate({key: None})
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key!r}: {raw!r}") from exc
    return key, _scalar(value)


def section(flat: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}


def _build(cls, key_prefix, kwargs):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {key_prefix} settings: {exc}") from exc


def micro_config(flat: dict) -> MicroConfig:
    kw = section(flat, "micro")
    if "seed" in flat:
        kw["seed"] = int(flat["seed"])
    return _build(MicroConfig, "micro.*", kw)


def gad_config(flat: dict) -> GadConfig:
    kw = section(flat, "gad")
    if "keep_states" in flat:
        kw["keep_states"] = bool(flat["keep_states"])
    return _build(GadConfig, "gad.*", kw)


def hmm_config(flat: dict) -> HmmConfig:
    kw = section(flat, "hmm")
    sched = {k[len("M_schedule."):]: kw.pop(k) for k in list(kw) if k.startswith("M_schedule.")}
    micro = micro_config(flat)
    if "M" in kw:
        micro = _build(MicroConfig, "micro.*", {**vars(micro), "M": int(kw.pop("M"))})
    kw["micro"] = micro
    if sched:
        kw["M_schedule"] = _build(MSchedule, "hmm.M_schedule.*", sched)
    if "keep_states" in flat:
        kw["keep_states"] = bool(flat["keep_states"])
    return _build(HmmConfig, "hmm.*", kw)


def scm_config(flat: dict) -> ScmConfig:
    kw = section(flat, "scm")
    if "micro.scheme" in flat:
        kw["scheme"] = flat["micro.scheme"]
    if "keep_states" in flat:
        kw["keep_states"] = bool(flat["keep_states"])
    if kw.get("switch_to_hmm"):
        kw["hmm"] = hmm_config(flat)
    return _build(ScmConfig, "scm.*", kw)
