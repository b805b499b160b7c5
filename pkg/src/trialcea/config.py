"""Run configuration (TOML), its content hash, and the run manifest."""

from __future__ import annotations

import hashlib
import json
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .errors import ConfigError

SECTIONS = ("inputs", "analysis", "imputation", "scenarios", "run", "simulate")
INPUT_KEYS = ("routine", "crf", "wards", "valueset", "unit_costs")


def read_toml(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


@dataclass(frozen=True)
class AnalysisConfig:
    seed: int = 20220401
    B: int = 1000
    M: int = 0                          # 0 picks M from the incomplete-case share
    thresholds: tuple = (15000.0, 20000.0, 30000.0)
    ceac_grid: tuple = (0.0, 50000.0, 500.0)
    cost_family: str = "gaussian"
    estimators: tuple = ("lmm", "sur")
    primary_estimator: str = "lmm"
    include_decedents: bool = True
    include_index_stay: bool = False
    resource_threshold: float = 0.60

    def __post_init__(self):
        if self.B < 1:
            raise ConfigError("analysis.B must be >= 1")
        if self.M != 0 and self.M < 2:
            raise ConfigError("analysis.M must be 0 (automatic) or >= 2")
        if self.cost_family not in ("gaussian", "gamma"):
            raise ConfigError("analysis.cost_family must be 'gaussian' or 'gamma'")
        bad = set(self.estimators) - {"lmm", "sur"}
        if bad or not self.estimators:
            raise ConfigError(f"analysis.estimators must be a non-empty subset of ['lmm', 'sur'], got {list(self.estimators)}")
        if self.primary_estimator not in self.estimators:
            raise ConfigError("analysis.primary_estimator must be one of analysis.estimators")
        if any(t <= 0 for t in self.thresholds):
            raise ConfigError("analysis.thresholds must be positive")
        lo, hi, step = self.ceac_grid
        if step <= 0 or hi < lo or lo < 0:
            raise ConfigError("analysis.ceac_grid must be [start >= 0, stop >= start, step > 0]")
        if not 0 < self.resource_threshold <= 1:
            raise ConfigError("analysis.resource_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class ImputationConfig:
    pmm_k: int = 5
    cycles: int = 20
    ridge: float = 1e-4
    min_complete: int = 10


@dataclass(frozen=True)
class RunConfig:
    inputs: dict = field(default_factory=dict)
    analysis: AnalysisConfig = AnalysisConfig()
    imputation: ImputationConfig = ImputationConfig()
    scenarios: tuple = (1, 2, 3, 4, 5, 6, 7)
    out: Path = Path("out")
    workers: int = 0
    strict: bool = True
    simulate: dict = field(default_factory=dict)
    source: Path | None = None

    @classmethod
    def from_dict(cls, data, base=Path(".")):
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        inputs = {}
        for k, v in data.get("inputs", {}).items():
            if k not in INPUT_KEYS:
                raise ConfigError(f"unknown input key {k!r}")
            if v:
                p = Path(v)
                inputs[k] = p if p.is_absolute() else (base / p)
        analysis = _build(AnalysisConfig, data.get("analysis", {}), "analysis")
        imputation = _build(ImputationConfig, data.get("imputation", {}), "imputation")
        sc = data.get("scenarios", {})
        ids = tuple(int(i) for i in sc.get("ids", range(1, 8))) if sc.get("enabled", True) else ()
        if any(not 1 <= i <= 7 for i in ids):
            raise ConfigError("scenarios.ids must lie in 1..7")
        run = data.get("run", {})
        out = Path(run.get("out", "out"))
        return cls(inputs, analysis, imputation, ids, out if out.is_absolute() else base / out,
                   int(run.get("workers", 0)), bool(run.get("strict", True)), dict(data.get("simulate", {})))

    @classmethod
    def load(cls, path):
        path = Path(path)
        cfg = cls.from_dict(read_toml(path), base=path.parent)
        return cls(**{**cfg.__dict__, "source": path})

    def override(self, seed=None, out=None, workers=None, strict=None):
        changes = dict(self.__dict__)
        if seed is not None:
            changes["analysis"] = AnalysisConfig(**{**asdict(self.analysis), "seed": int(seed)})
        if out is not None:
            changes["out"] = Path(out)
        if workers is not None:
            changes["workers"] = workers
        if strict is not None:
            changes["strict"] = strict
        return RunConfig(**changes)

    def require(self, *keys):
        for k in keys:
            if k not in self.inputs:
                raise ConfigError(f"inputs.{k} is not configured")
            if not self.inputs[k].exists():
                raise FileNotFoundError(f"file not found: {self.inputs[k]}")

    def input_hashes(self):
        return {k: sha256_file(p) for k, p in sorted(self.inputs.items()) if p.exists()}

    def settings(self):
        """Everything that can change a result.  Output location and worker
        count are excluded: they never alter output bytes."""
        a = asdict(self.analysis)
        return {"analysis": {k: list(v) if isinstance(v, tuple) else v for k, v in a.items()},
                "imputation": asdict(self.imputation), "scenarios": list(self.scenarios),
                "strict": self.strict, "simulate": self.simulate}

    def hash(self):
        return hashlib.sha256(canonical_json({"settings": self.settings(), "inputs": self.input_hashes(),
                                              "version": __version__}).encode()).hexdigest()


def _build(cls, section, name):
    known = set(cls.__dataclass_fields__)
    extra = set(section) - known
    if extra:
        raise ConfigError(f"unknown {name} key(s): {sorted(extra)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


class RunManifest:
    """Provenance record written next to every command's outputs."""

    def __init__(self, command, config: RunConfig):
        self.command = command
        self.config = config
        self.started = time.time()
        self.stages = {}
        self.outputs = {}
        self._t = time.perf_counter()

    def stage(self, name):
        now = time.perf_counter()
        self.stages[name] = round(now - self._t, 6)
        self._t = now

    def add_output(self, path):
        path = Path(path)
        if path.is_dir():
            for p in sorted(path.rglob("*")):
                if p.is_file():
                    self.outputs[str(p.relative_to(self.config.out))] = sha256_file(p)
        else:
            self.outputs[str(path.relative_to(self.config.out))] = sha256_file(path)

    def to_dict(self):
        return {
            "command": self.command,
            "config_hash": self.config.hash(),
            "config_file": str(self.config.source) if self.config.source else None,
            "seed": self.config.analysis.seed,
            "settings": self.config.settings(),
            "inputs": self.config.input_hashes(),
            "engine_version": __version__,
            "python": platform.python_version(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(self.started)),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "stage_seconds": self.stages,
            "outputs": self.outputs,
        }

    def write(self):
        path = self.config.out / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path
