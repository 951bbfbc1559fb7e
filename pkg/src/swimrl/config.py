"""Strict JSON experiment configuration.

Every section has a fixed key set.  Physical parameters (gain, penalty
weight, flow amplitudes, noise, step size, horizon) have no defaults; the
numerical knobs do.  Errors carry ``file:line: key`` locations, the line
being where the offending key appears in the source text.

Example::

    {
      "flow": {"type": "bk", "D": 0.04, "d": 3, "kappa": 1e-4},
      "integrator": {"dt": 0.01},
      "episode": {"horizon": 10.0, "beta": 0.1, "nu": 0.1},
      "baseline": {"phi": 0.574166, "d_tilde": 0.4},
      "agent": {"kind": "ap"}
    }
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from pathlib import Path

from .errors import ConfigError

REQUIRED = object()

# section -> {key: default or REQUIRED}
SCHEMA = {
    "flow": {"type": REQUIRED, "D": None, "d": 3, "A": None, "B": None, "C": None, "kappa": REQUIRED},
    "integrator": {"dt": REQUIRED, "max_sep": None},
    "episode": {"horizon": REQUIRED, "beta": REQUIRED, "nu": 0.1, "init_scale": None,
                "episodes": 250, "eval_episodes": 500, "curve_every": 10, "curve_episodes": 100,
                "lr_decay": True, "chunk": 500},
    "baseline": {"phi": REQUIRED, "d_tilde": None},
    "agent": {"kind": "ap", "hidden": [64, 64], "lr": 1e-3, "critic_lr": None, "log_std": 0.0,
              "a_max": 20.0, "obs_scale": 1.0, "act_scale": 1.0, "clip": 0.2, "epochs": 4,
              "schedule": "adam", "normalize": True, "checkpoint": None},
    "lyapunov": {"t_window": REQUIRED, "n_samples": 10000, "dt": None, "kappa": None},
    "cramer": {"lambda_bar": REQUIRED, "s1_curv": REQUIRED},
    "histogram": {"phi": REQUIRED, "n_particles": 4000, "burn_in": 20.0, "duration": 60.0,
                  "split_every": 1, "max_split": 16, "fit_lo": 3.0, "fit_hi": 10.0,
                  "bins_per_decade": 20, "splitting": True},
    "value": {"times": REQUIRED, "norms": REQUIRED, "rollouts": 10000},
    "compare": {"phis": REQUIRED, "n_eval": 1000},
    "hybrid": {"n": 10, "threshold": 0.0, "episodes": 500},
    "horizons": {"values": REQUIRED, "episodes": 250, "phis": None},
}
TOP_LEVEL = {"seed": 0, "workers": 1, "out": None, "experiment": None, **{k: None for k in SCHEMA}}
FLOW_KEYS = {"bk": {"type", "D", "d", "kappa"}, "abc": {"type", "A", "B", "C", "kappa"}}


def _locate(text: str, path) -> int | None:
    """Line of the last key in ``path`` (searched in order), or None."""
    pos = 0
    for key in path:
        m = re.compile(r'"%s"\s*:' % re.escape(str(key))).search(text, pos)
        if m is None:
            return None
        pos = m.end()
    return text.count("\n", 0, pos) + 1


class ConfigLoader:
    def __init__(self, text: str, source: str = "<config>"):
        self.text = text
        self.source = source

    def error(self, message: str, path=()) -> ConfigError:
        line = _locate(self.text, path) if path else None
        where = self.source if line is None else f"{self.source}:{line}"
        if path:
            where += ": " + ".".join(str(p) for p in path)
        return ConfigError(message, where)

    def load(self) -> dict:
        try:
            doc = json.loads(self.text)
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, f"{self.source}:{exc.lineno}") from None
        if not isinstance(doc, dict):
            raise self.error("top level must be an object")
        return self.normalize(doc)

    def normalize(self, doc: dict) -> dict:
        out = {}
        for key, value in doc.items():
            if key not in TOP_LEVEL:
                raise self.error("unknown key", (key,))
            if key in SCHEMA and value is not None:
                if not isinstance(value, dict):
                    raise self.error("section must be an object", (key,))
                out[key] = self.section(key, value)
            else:
                out[key] = value
        for key, default in TOP_LEVEL.items():
            out.setdefault(key, copy.deepcopy(default))
        self.check(out)
        return out

    def section(self, name: str, value: dict) -> dict:
        schema = SCHEMA[name]
        sec = {}
        for key, v in value.items():
            if key not in schema:
                raise self.error("unknown key", (name, key))
            if isinstance(v, bool) and not isinstance(schema[key], bool) and key not in (
                    "lr_decay", "splitting", "normalize"):
                raise self.error("expected a number, got a boolean", (name, key))
            if isinstance(v, (int, float)) and not isinstance(v, bool) and not math.isfinite(v):
                raise self.error("value must be finite", (name, key))
            sec[key] = v
        for key, default in schema.items():
            if key not in sec:
                if default is REQUIRED:
                    raise self.error(f"missing required key '{key}'", (name,))
                sec[key] = copy.deepcopy(default)
        return sec

    def check(self, cfg: dict) -> None:
        flow = cfg.get("flow")
        if flow is not None:
            kind = flow["type"]
            if kind not in FLOW_KEYS:
                raise self.error(f"unknown flow type {kind!r} (expected 'bk' or 'abc')", ("flow", "type"))
            given = {k for k, v in flow.items() if v is not None}
            for key in FLOW_KEYS[kind] - given:
                raise self.error(f"missing required key '{key}' for a {kind} flow", ("flow",))
            for key in given - FLOW_KEYS[kind]:
                if key == "d" and flow[key] == 3:
                    continue
                raise self.error(f"key not used by a {kind} flow", ("flow", key))
        agent = cfg.get("agent")
        if agent is not None and agent["kind"] not in ("ap", "a2c", "ppo"):
            raise self.error(f"unknown agent kind {agent['kind']!r}", ("agent", "kind"))
        if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
            raise self.error("seed must be a non-negative integer", ("seed",))
        if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
            raise self.error("workers must be a positive integer", ("workers",))


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return ConfigLoader(text, str(path)).load()


def parse_config(text: str, source: str = "<config>") -> dict:
    return ConfigLoader(text, source).load()


def dump_config(cfg: dict) -> str:
    """Canonical form: sorted keys, no insignificant whitespace."""
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict, sections=None) -> str:
    """SHA-256 of the canonical JSON of ``cfg`` (or of the listed sections)."""
    doc = cfg if sections is None else {k: cfg.get(k) for k in sections}
    return hashlib.sha256(dump_config(doc).encode()).hexdigest()


ENVIRONMENT_SECTIONS = ("flow", "integrator", "episode")


def environment_hash(cfg: dict) -> str:
    """Hash of the physical environment and episode protocol only."""
    env = {"flow": cfg.get("flow"), "integrator": cfg.get("integrator")}
    ep = cfg.get("episode")
    if ep is not None:
        env["episode"] = {k: ep[k] for k in ("horizon", "beta", "nu", "init_scale")}
    return config_hash(env)
