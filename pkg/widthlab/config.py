"""Experiment config loading, validation and conversion into typed configs.

A config is a YAML document with ``version: 1``, optional ``seed`` and
``output_dir``, shared sections (network, data, optimizer, parametrization,
loss, limit) and workflow sections (program, classify, nt, mu, train,
sweep, ketcheck). A workflow section may repeat any shared section to
override it; ``sweep.modes.<mode>`` overrides the sweep section per mode.
"""
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import yaml

from widthlab.errors import ConfigError
from widthlab.harness import Dataset, SweepConfig, gram_program, make_dataset, nngp_program
from widthlab.ketvm import DEFAULT_COPIES, DEFAULT_SAMPLES
from widthlab.limits import F0_MODES, LimitConfig
from widthlab.mlp import FiniteTrainConfig
from widthlab.optim import Modifiers, UpdateRule
from widthlab.param import AbcdParam, preset
from widthlab.program import ProgramIR, build_program, load_program
from widthlab.signals import MSESignal

SCHEMA_VERSION = 1
WORKFLOWS = ("program", "classify", "nt", "mu", "train", "sweep", "ketcheck")
SHARED_SECTIONS = ("network", "data", "optimizer", "parametrization", "loss", "limit")
BUNDLED_DIR = Path(__file__).parent / "configs"
OUTPUT_ENV = "WIDTHLAB_OUT"
DEFAULT_OUTPUT = "results"

KeyPath = Tuple[str, ...]


def _line_index(text: str) -> Dict[KeyPath, int]:
    """1-based line of every mapping key, by dotted path."""
    lines: Dict[KeyPath, int] = {}

    def walk(node, prefix: KeyPath):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                path = prefix + (str(key.value),)
                lines[path] = key.start_mark.line + 1
                walk(value, path)

    root = yaml.compose(text)
    if root is not None:
        walk(root, ())
    return lines


def _merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass
class LoadedConfig:
    """A validated config document narrowed to one workflow."""
    path: Path
    workflow: str
    section: Dict[str, Any]
    seed: int
    output_dir: Path
    lines: Dict[KeyPath, int] = field(default_factory=dict, repr=False)

    def error(self, dotted: str, reason: str) -> ConfigError:
        """ConfigError naming the field and the line it came from."""
        parts = tuple(dotted.split("."))
        candidates = [(self.workflow,) + parts, parts]
        if "mode" in self.section:
            candidates.insert(0, (self.workflow, "modes", str(self.section["mode"])) + parts)
        line = next((self.lines[c] for c in candidates if c in self.lines), None)
        where = f" (line {line})" if line is not None else ""
        return ConfigError(f"field '{self.workflow}.{dotted}'{where}: {reason}")

    def get(self, dotted: str, default: Any = None) -> Any:
        node: Any = self.section
        for part in dotted.split("."):
            if not isinstance(node, Mapping) or part not in node:
                return default
            node = node[part]
        return node

    def number(self, dotted: str, default: Any, kind=float, minimum: Optional[float] = None,
               exclusive: bool = False) -> Any:
        value = self.get(dotted, default)
        if value is None:
            return None
        try:
            value = kind(value)
        except (TypeError, ValueError):
            raise self.error(dotted, f"expected {kind.__name__}, got {value!r}") from None
        if minimum is not None and (value < minimum or (exclusive and value == minimum)):
            raise self.error(dotted, f"must be {'>' if exclusive else '>='} {minimum}, got {value}")
        return value

    def int_list(self, dotted: str, default: Sequence[int]) -> Tuple[int, ...]:
        value = self.get(dotted, default)
        if isinstance(value, str):
            value = [part for part in value.split(",") if part.strip()]
        try:
            return tuple(int(v) for v in value)
        except (TypeError, ValueError):
            raise self.error(dotted, f"expected a list of integers, got {value!r}") from None


def resolve_config_path(name: str) -> Path:
    """A path, or the name of a bundled config such as 'width-experiments'."""
    path = Path(name)
    if path.exists():
        return path
    bundled = BUNDLED_DIR / f"{name}.yaml"
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"Config file not found: {name}")


def load_config(config_path: Path, workflow: Optional[str] = None,
                mode: Optional[str] = None) -> LoadedConfig:
    """Load and validate a config file.

    Args:
        config_path: Path to the YAML config
        workflow: Workflow section to use; when None the document must hold
            exactly one workflow section
        mode: Sweep mode whose ``sweep.modes`` overrides apply

    Returns:
        LoadedConfig for the selected workflow

    Raises:
        FileNotFoundError: If the config file doesn't exist
        ConfigError: If required fields are missing or invalid
    """
    if not config_path.exists():
        raise FileNotFoundError(f"Config file not found: {config_path}")
    text = config_path.read_text()
    try:
        raw = yaml.safe_load(text)
        lines = _line_index(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{config_path}: invalid YAML: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{config_path}: expected a mapping at the top level")

    if "version" not in raw:
        raise ConfigError("Missing required field: version")
    if raw["version"] != SCHEMA_VERSION:
        raise ConfigError(f"field 'version' (line {lines.get(('version',))}): "
                          f"unsupported schema version {raw['version']!r}")
    unknown = [key for key in raw if key not in WORKFLOWS + SHARED_SECTIONS
               and key not in ("version", "seed", "output_dir")]
    if unknown:
        key = unknown[0]
        raise ConfigError(f"field '{key}' (line {lines.get((key,))}): unknown section")

    present = [name for name in WORKFLOWS if name in raw]
    if workflow is None:
        if len(present) != 1:
            raise ConfigError(f"expected exactly one workflow section "
                              f"({', '.join(WORKFLOWS)}), found {len(present)}")
        workflow = present[0]
    elif workflow not in raw:
        raise ConfigError(f"Missing required field: {workflow}")

    section = raw.get(workflow) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"field '{workflow}' (line {lines.get((workflow,))}): expected a mapping")
    shared = {key: raw[key] for key in SHARED_SECTIONS if key in raw}
    merged = _merge(shared, section)
    if mode is not None:
        merged = _merge(merged, (section.get("modes") or {}).get(mode, {}))
        merged["mode"] = mode

    try:
        seed = int(raw.get("seed", 0))
    except (TypeError, ValueError):
        raise ConfigError(f"field 'seed' (line {lines.get(('seed',))}): expected int") from None
    output_dir = Path(raw.get("output_dir") or os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT))
    return LoadedConfig(config_path, workflow, merged, seed, output_dir, lines)


# ---------------------------------------------------------------------------
# Builders


def build_param(cfg: LoadedConfig, L: int, default_preset: Optional[str] = None) -> AbcdParam:
    """Parametrization from a preset name (with optional s) or explicit a..e lists."""
    section = cfg.get("parametrization") or {}
    if not isinstance(section, Mapping):
        raise cfg.error("parametrization", "expected a mapping")
    try:
        if "preset" in section or not any(key in section for key in "abcd"):
            name = section.get("preset", default_preset)
            if name is None:
                raise cfg.error("parametrization.preset", "missing preset or a,b,c,d lists")
            return preset(str(name), L, section.get("s"))
        missing = [key for key in "abcd" if key not in section]
        if missing:
            raise cfg.error(f"parametrization.{missing[0]}", "missing exponent list")
        return AbcdParam(L, *(_exponents(section[key]) for key in "abcd"),
                         e=_exponents(section.get("e", ())), name=str(section.get("name", "custom")))
    except ConfigError:
        raise
    except ValueError as e:
        key = str(e).split("'")[1] if str(e).startswith("field '") else "preset"
        raise cfg.error(f"parametrization.{key}", str(e)) from None


def _exponents(value) -> Tuple[str, ...]:
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return tuple(str(v) for v in value)


def build_rule(cfg: LoadedConfig) -> UpdateRule:
    kind = str(cfg.get("optimizer.kind", "adam"))
    try:
        return UpdateRule(
            kind=kind,
            beta=cfg.number("optimizer.beta", 0.9),
            beta1=cfg.number("optimizer.beta1", 0.9),
            beta2=cfg.number("optimizer.beta2", 0.999),
            eps=cfg.number("optimizer.eps", 1e-4 if kind in ("adam", "signsgd") else 1e-8),
        )
    except ValueError as e:
        raise cfg.error("optimizer.kind", str(e)) from None


def build_modifiers(cfg: LoadedConfig) -> Modifiers:
    theta0 = cfg.get("optimizer.theta0", 1.0)
    if isinstance(theta0, list):
        theta0 = tuple(float(x) for x in theta0)
    try:
        return Modifiers(
            weight_decay=cfg.number("optimizer.weight_decay", 0.0, minimum=0.0),
            clip=str(cfg.get("optimizer.clip", "none")),
            theta0=theta0,
            norm_source=str(cfg.get("optimizer.norm_source", "update")),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise cfg.error("optimizer.clip", str(e)) from None


def _network(cfg: LoadedConfig, default_depth: int = 2) -> Tuple[int, str]:
    return (cfg.number("network.depth", default_depth, int, minimum=1),
            str(cfg.get("network.activation", "gelu")))


def _data(cfg: LoadedConfig) -> Dataset:
    return make_dataset(
        input_dim=cfg.number("data.input_dim", 10, int, minimum=1),
        n_train=cfg.number("data.samples", 100, int, minimum=1),
        n_test=cfg.number("data.test_inputs", 4, int, minimum=0),
        seed=cfg.seed + cfg.number("data.seed_offset", 0, int),
    )


def _strictly_increasing(cfg: LoadedConfig, dotted: str, widths: Tuple[int, ...]):
    if not widths:
        raise cfg.error(dotted, "needs at least one width")
    if any(n < 1 for n in widths):
        raise cfg.error(dotted, "widths must be >= 1")
    if any(b <= a for a, b in zip(widths, widths[1:])):
        raise cfg.error(dotted, "widths must be strictly increasing")


def build_sweep_config(cfg: LoadedConfig, widths: Optional[Sequence[int]] = None,
                       steps: Optional[int] = None, samples: Optional[int] = None) -> SweepConfig:
    """SweepConfig from the sweep section; explicit arguments are CLI overrides."""
    mode = str(cfg.get("mode", "nt"))
    if mode not in ("nt", "mu"):
        raise cfg.error("mode", f"must be 'nt' or 'mu', got '{mode}'")
    L, activation = _network(cfg)
    widths = tuple(widths) if widths else cfg.int_list("widths", (64, 512, 4096))
    _strictly_increasing(cfg, "widths", widths)
    try:
        return SweepConfig(
            mode=mode,
            widths=widths,
            L=L,
            activation=activation,
            rule=build_rule(cfg),
            lr=cfg.number("optimizer.lr", 0.2, minimum=0.0),
            steps=steps if steps is not None else cfg.number("steps", 8, int, minimum=0),
            trials=cfg.number("trials", 10, int, minimum=1),
            input_dim=cfg.number("data.input_dim", 10, int, minimum=1),
            n_train=cfg.number("data.samples", 100, int, minimum=1),
            n_test=cfg.number("data.test_inputs", 4, int, minimum=0),
            batch_size=cfg.number("loss.batch_size", None, int, minimum=1),
            samples=samples or cfg.number("limit.samples", DEFAULT_SAMPLES, int, minimum=2),
            copies=cfg.number("limit.copies", DEFAULT_COPIES, int, minimum=1),
            seed=cfg.seed,
            modifiers=build_modifiers(cfg),
            param=build_param(cfg, L, "NTP" if mode == "nt" else "muP"),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise cfg.error("parametrization", str(e)) from None


def build_train_config(cfg: LoadedConfig, widths: Optional[Sequence[int]] = None,
                       steps: Optional[int] = None) -> FiniteTrainConfig:
    L, activation = _network(cfg)
    data = _data(cfg)
    widths = tuple(widths) if widths else cfg.int_list("widths", (64, 512, 4096))
    _strictly_increasing(cfg, "widths", widths)
    return FiniteTrainConfig(
        L=L, widths=widths, xi=data.xi, param=build_param(cfg, L, "muP"), rule=build_rule(cfg),
        signal=_signal(cfg, data), lr=cfg.number("optimizer.lr", 0.2, minimum=0.0),
        steps=steps if steps is not None else cfg.number("steps", 8, int, minimum=0),
        trials=cfg.number("trials", 1, int, minimum=1), seed=cfg.seed,
        subtract_f0=bool(cfg.get("subtract_f0", True)), activation=activation,
        modifiers=build_modifiers(cfg),
        track_kernels=cfg.int_list("track_kernels", ()),
    )


def _signal(cfg: LoadedConfig, data: Dataset) -> MSESignal:
    kind = str(cfg.get("loss.kind", "mse"))
    if kind != "mse":
        raise cfg.error("loss.kind", f"unknown loss '{kind}'")
    reduction = str(cfg.get("loss.reduction", "mean"))
    if reduction not in ("mean", "sum"):
        raise cfg.error("loss.reduction", f"must be 'mean' or 'sum', got '{reduction}'")
    return MSESignal(
        data.targets, reduction=reduction, train_mask=data.train_mask,
        batch_size=cfg.number("loss.batch_size", None, int, minimum=1), seed=cfg.seed)


def build_limit_config(cfg: LoadedConfig, steps: Optional[int] = None,
                       samples: Optional[int] = None) -> LimitConfig:
    L, activation = _network(cfg)
    data = _data(cfg)
    f0_mode = str(cfg.get("limit.f0_mode", "zero"))
    if f0_mode not in F0_MODES:
        raise cfg.error("limit.f0_mode", f"must be one of {', '.join(F0_MODES)}")
    track = cfg.int_list("track_kernels", ())
    for l in track:
        if not 1 <= l <= L:
            raise cfg.error("track_kernels", f"layer {l} out of range 1..{L}")
    try:
        return LimitConfig(
            L=L, xi=data.xi, rule=build_rule(cfg), signal=_signal(cfg, data),
            lr=cfg.number("optimizer.lr", 0.2, minimum=0.0),
            steps=steps if steps is not None else cfg.number("steps", 8, int, minimum=0),
            samples=samples or cfg.number("limit.samples", DEFAULT_SAMPLES, int, minimum=2),
            seed=cfg.seed, copies=cfg.number("limit.copies", DEFAULT_COPIES, int, minimum=1),
            activation=activation, modifiers=build_modifiers(cfg),
            subtract_f0=bool(cfg.get("subtract_f0", True)), f0_mode=f0_mode,
            track_kernels=track,
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise cfg.error("network", str(e)) from None


def build_program_from_config(cfg: LoadedConfig, key: str = "program") -> ProgramIR:
    """Program given inline, by ``file`` (relative to the config) or as a ``builtin`` name."""
    section = cfg.get(key) if key != cfg.workflow else cfg.section
    if not isinstance(section, Mapping):
        raise cfg.error(key, "expected a program mapping")
    if "builtin" in section:
        name = str(section["builtin"])
        if name == "gram":
            return gram_program()
        if name == "nngp":
            L, activation = _network(cfg)
            return nngp_program(L, activation)
        raise cfg.error(f"{key}.builtin" if key != cfg.workflow else "builtin",
                        f"unknown builtin program '{name}' (known: gram, nngp)")
    if "file" in section:
        path = Path(section["file"])
        if not path.is_absolute():
            path = cfg.path.parent / path
        return load_program(path)
    return build_program(section)
