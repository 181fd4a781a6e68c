"""JSON run configuration: pipeline, network and training sections."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .hisn import HisnConfig
from .pipeline import PipelineConfig, sample_exposures
from .training import TrainConfig

SCHEMA_VERSION = 1
CONFIG_ENV = "ITMKIT_CONFIG"
SECTIONS = {"pipeline": PipelineConfig, "network": HisnConfig, "train": TrainConfig}


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    network: HisnConfig = field(default_factory=HisnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def toy(cls):
        """Desk-scale preset used by tests and the README walkthrough."""
        return cls(
            pipeline=PipelineConfig(exposures=sample_exposures(3, -1.0, 1.0), crf_count=2),
            network=HisnConfig.toy(),
            train=TrainConfig.toy(),
        )

    def to_dict(self):
        out = {"schema_version": self.schema_version}
        for name in SECTIONS:
            sec = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS) - {"schema_version"}
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {version!r} not supported (expected {SCHEMA_VERSION})")
        sections = {}
        for name, klass in SECTIONS.items():
            body = doc.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(klass)}
            extra = set(body) - allowed
            if extra:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
            if name == "pipeline" and "jpeg_quality" in body:
                body = {**body, "jpeg_quality": tuple(body["jpeg_quality"])}
            try:
                sections[name] = klass(**body)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from None
        return cls(schema_version=version, **sections)

    @classmethod
    def load(cls, path=None):
        """Read ``path``, else $ITMKIT_CONFIG, else return defaults."""
        path = path or os.environ.get(CONFIG_ENV)
        if not path:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def with_seed(self, seed):
        """Copy with every section's seed set to ``seed``."""
        if seed is None:
            return self
        return RunConfig(
            pipeline=dataclasses.replace(self.pipeline, seed=seed),
            network=dataclasses.replace(self.network, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            schema_version=self.schema_version,
        )
