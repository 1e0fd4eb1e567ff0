"""
Configuration Manager for hrapr runs

Holds the named run presets (indoor, outdoor) and resolves the effective
run configuration from a preset, an optional `key = value` config file and
command-line overrides, in that order.
"""

import configparser
import dataclasses
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from dotenv import load_dotenv

from hrapr.exceptions import ConfigError, GenerationError
from hrapr.synthbench import SceneSpec
from hrapr.uncertainty import GatingMode, GatingPolicy
from utils.report_writer import PathLike, atomic_write_text

DEFAULT_GRID: Tuple[float, ...] = (0.0, 0.5, 0.8, 0.9, 0.95, 0.98)
MANIFEST_FORMAT = "hrapr-scene v1"
POLICY_RE = re.compile(r"^hs(\d+)_ls(\d+)$")
SCENE_PREFIX = "scene."
CONFIG_SECTION = "hrapr"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    """Effective settings of one run"""
    name: str
    d_th: float
    gamma: float = 0.95
    hs_steps: int = 10
    ls_steps: int = 50
    mode: str = "refine"
    grid: Tuple[float, ...] = DEFAULT_GRID
    cell_size: Optional[float] = None
    threads: int = 1
    strict: bool = False
    early_stop: bool = False
    seed: int = 42
    eps_t: float = 1e-3
    eps_r: float = 1e-3
    shrink: float = 0.5
    max_backtracks: int = 20
    scene_overrides: Dict[str, Any] = field(default_factory=dict)

    def policy(self) -> GatingPolicy:
        return GatingPolicy(gamma=self.gamma, hs_steps=self.hs_steps, ls_steps=self.ls_steps, mode=GatingMode(self.mode))

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(seed=self.seed).with_overrides(**self.scene_overrides)

    def refiner_options(self) -> Dict[str, Any]:
        return {"eps_t": self.eps_t, "eps_r": self.eps_r, "shrink": self.shrink, "max_backtracks": self.max_backtracks}

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["grid"] = list(self.grid)
        return data


def parse_policy(text: str) -> Tuple[int, int]:
    """
    Parse a `hs<N>_ls<M>` policy name.

    Raises:
        ConfigError: If text is not of that form
    """
    match = POLICY_RE.match(text.strip())
    if not match:
        raise ConfigError(f"Policy '{text}' must look like hs10_ls50")
    return int(match.group(1)), int(match.group(2))


def _parse_bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in _TRUE:
        return True
    if value in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_grid(text) -> Tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _parse_cell_size(text) -> Optional[float]:
    if text is None:
        return None
    if str(text).strip().lower() in ("", "none", "exhaustive"):
        return None
    return float(text)


_PARSERS = {
    "name": str,
    "d_th": float,
    "gamma": float,
    "hs_steps": int,
    "ls_steps": int,
    "mode": lambda v: str(v).strip().lower(),
    "grid": _parse_grid,
    "cell_size": _parse_cell_size,
    "threads": int,
    "strict": lambda v: v if isinstance(v, bool) else _parse_bool(v),
    "early_stop": lambda v: v if isinstance(v, bool) else _parse_bool(v),
    "seed": int,
    "eps_t": float,
    "eps_r": float,
    "shrink": float,
    "max_backtracks": int,
}


def validate_run_config(config: RunConfig) -> List[str]:
    """Return a list of problems; empty when config is usable"""
    errors = []
    if not (math.isfinite(config.d_th) and config.d_th >= 0):
        errors.append(f"d_th must be finite and >= 0, got {config.d_th}")
    if not math.isfinite(config.gamma):
        errors.append(f"gamma must be finite, got {config.gamma}")
    if config.mode not in (m.value for m in GatingMode):
        errors.append(f"mode must be refine or filter, got {config.mode!r}")
    if config.hs_steps < 0 or config.ls_steps < 0:
        errors.append("step budgets must be >= 0")
    elif config.mode == GatingMode.REFINE.value and config.hs_steps > config.ls_steps:
        errors.append(f"hs_steps ({config.hs_steps}) must not exceed ls_steps ({config.ls_steps})")
    if not config.grid:
        errors.append("grid must not be empty")
    elif any(b < a for a, b in zip(config.grid, config.grid[1:])):
        errors.append(f"grid must be ascending, got {list(config.grid)}")
    if config.cell_size is not None and not config.cell_size > 0:
        errors.append(f"cell_size must be > 0, got {config.cell_size}")
    if config.threads < 1:
        errors.append(f"threads must be >= 1, got {config.threads}")
    if not (config.eps_t > 0 and config.eps_r > 0):
        errors.append("eps_t and eps_r must be > 0")
    if not 0.0 < config.shrink < 1.0:
        errors.append(f"shrink must lie in (0, 1), got {config.shrink}")
    if config.max_backtracks < 0:
        errors.append("max_backtracks must be >= 0")
    try:
        config.scene_spec()
    except (GenerationError, ValueError) as e:
        errors.append(f"scene overrides: {e}")
    return errors


class ConfigManager:
    """
    Central configuration manager for hrapr.

    Presets are built once from defaults and HRAPR_* environment variables;
    a `.env` file at the project root is loaded first when present.
    """

    def __init__(self, project_root: Optional[Path] = None):
        self.project_root = Path(project_root) if project_root else Path(__file__).parent.parent
        self._load_environment_variables()
        self._setup_presets()

    def _load_environment_variables(self):
        """Load environment variables from .env file if present"""
        env_file = self.project_root / '.env'
        if env_file.exists():
            load_dotenv(env_file, override=False)

    def _setup_presets(self):
        """Setup run presets"""
        gamma = float(os.getenv('HRAPR_GAMMA', '0.95'))
        self.presets = {
            'indoor': RunConfig(
                name='indoor',
                d_th=float(os.getenv('HRAPR_INDOOR_DTH', '0.2')),
                gamma=gamma,
                hs_steps=int(os.getenv('HRAPR_INDOOR_HS', '10')),
                ls_steps=int(os.getenv('HRAPR_INDOOR_LS', '50')),
            ),
            'outdoor': RunConfig(
                name='outdoor',
                d_th=float(os.getenv('HRAPR_OUTDOOR_DTH', '1.5')),
                gamma=gamma,
                hs_steps=int(os.getenv('HRAPR_OUTDOOR_HS', '30')),
                ls_steps=int(os.getenv('HRAPR_OUTDOOR_LS', '50')),
            ),
        }

    @staticmethod
    def thread_cap() -> int:
        """
        Worker thread cap from HRAPR_THREADS (CPU count when unset).

        Raises:
            ConfigError: If the variable is not a positive integer
        """
        raw = os.getenv('HRAPR_THREADS', str(os.cpu_count() or 1))
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"HRAPR_THREADS must be a positive integer, got {raw!r}") from None
        if value < 1:
            raise ConfigError(f"HRAPR_THREADS must be a positive integer, got {raw!r}")
        return value

    def get_preset(self, name: Optional[str] = None) -> RunConfig:
        """
        Get a copy of a run preset by name.

        Args:
            name: Preset name (indoor, outdoor); HRAPR_PRESET or indoor when omitted

        Returns:
            RunConfig object

        Raises:
            ConfigError: If the preset is not found
        """
        if name is None:
            name = os.getenv('HRAPR_PRESET', 'indoor')
        if name not in self.presets:
            raise ConfigError(f"Preset '{name}' not found. Available: {list(self.presets.keys())}")
        preset = self.presets[name]
        return dataclasses.replace(preset, scene_overrides=dict(preset.scene_overrides))

    @staticmethod
    def read_config_file(path: PathLike) -> Dict[str, str]:
        """
        Read `key = value` lines; `#` and `;` start comments.

        Raises:
            ConfigError: If the file cannot be read or parsed
        """
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            text = Path(path).read_text(encoding="utf-8")
            parser.read_string(f"[{CONFIG_SECTION}]\n{text}", source=str(path))
        except (OSError, configparser.Error) as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e
        return dict(parser.items(CONFIG_SECTION))

    @staticmethod
    def apply_values(config: RunConfig, values: Mapping[str, Any], source: str = "overrides") -> RunConfig:
        """
        Return config with values applied; None values are skipped.

        Keys are RunConfig field names, `policy` (hs<N>_ls<M>) and
        `scene.<SceneSpec field>`.
        """
        changes: Dict[str, Any] = {}
        scene = dict(config.scene_overrides)
        for key, value in values.items():
            if value is None:
                continue
            try:
                if key.startswith(SCENE_PREFIX):
                    scene[key[len(SCENE_PREFIX):]] = value
                elif key == "policy":
                    changes["hs_steps"], changes["ls_steps"] = parse_policy(str(value))
                elif key in _PARSERS:
                    changes[key] = _PARSERS[key](value)
                else:
                    raise ConfigError(f"unknown key '{key}'")
            except ValueError as e:
                raise ConfigError(f"{source}: bad value for '{key}': {e}") from e
        return dataclasses.replace(config, scene_overrides=scene, **changes)

    def resolve(self, preset: Optional[str] = None, config_file: Optional[PathLike] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
        """
        Effective run configuration: preset < config file < overrides.

        Raises:
            ConfigError: On unknown presets or keys, bad values, or an invalid result
        """
        config = self.get_preset(preset)
        if config_file is not None:
            config = self.apply_values(config, self.read_config_file(config_file), source=str(config_file))
        if overrides:
            config = self.apply_values(config, overrides)
        config.threads = min(config.threads, self.thread_cap())
        errors = validate_run_config(config)
        if errors:
            raise ConfigError("Invalid configuration: " + "; ".join(errors))
        return config

    def validate_configuration(self, preset: Optional[str] = None) -> bool:
        """True when the named preset resolves to a usable configuration"""
        try:
            return not validate_run_config(self.get_preset(preset))
        except ConfigError:
            return False


def manifest_path(stem: PathLike) -> Path:
    return Path(f"{stem}.json")


def save_manifest(stem: PathLike, spec: SceneSpec, run_config: RunConfig) -> Path:
    """
    Write `<stem>.json` describing a generated scene and its run preset.

    Keys are sorted and no timestamps are written, so equal inputs give equal bytes.
    """
    stem_name = Path(stem).name
    data = {
        "format": MANIFEST_FORMAT,
        "scene": spec.to_dict(),
        "run": run_config.to_dict(),
        "files": {ext: f"{stem_name}.{ext}" for ext in ("poses", "feat", "queries", "qfeat")},
    }
    return atomic_write_text(manifest_path(stem), json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_manifest(path: PathLike) -> Tuple[SceneSpec, Dict[str, Any]]:
    """
    Read a scene manifest.

    Returns:
        (SceneSpec, run settings dict)

    Raises:
        ConfigError: If the file is missing, malformed or of another format
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read manifest {path}: {e}") from e
    if not isinstance(data, dict) or data.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"{path} is not a {MANIFEST_FORMAT} manifest")
    try:
        spec = SceneSpec(**data["scene"])
    except (KeyError, TypeError, GenerationError) as e:
        raise ConfigError(f"{path}: bad scene section: {e}") from e
    return spec, dict(data.get("run", {}))


# Global configuration instance
config_manager = ConfigManager()


def get_config() -> ConfigManager:
    """
    Get the global configuration manager instance.

    Returns:
        ConfigManager instance
    """
    return config_manager


# Convenience functions for quick access
def get_d_th(preset: Optional[str] = None) -> float:
    """Get the retrieval radius of a preset"""
    return config_manager.get_preset(preset).d_th


def get_policy(preset: Optional[str] = None) -> GatingPolicy:
    """Get the gating policy of a preset"""
    return config_manager.get_preset(preset).policy()
