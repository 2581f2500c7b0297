"""Pipeline configuration, read from and written to JSON."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from drrg.errors import ArtifactIOError, ContractError

RETRIEVAL_MODES = ("dom", "pixel", "none")


@dataclass(frozen=True)
class PipelineConfig:
    # corpus
    seed: int = 7
    n_train: int = 500
    n_test: int = 100
    image_size: int = 64
    n_classes: int = 6
    prevalence: float = 0.25
    grammar: str = "grammar6"
    # classifier
    cls_epochs: int = 30
    cls_batch_size: int = 8
    cls_lr: float = 5e-3
    cls_channels: tuple[int, int, int] = (16, 32, 64)
    # retrieval and prior knowledge
    retrieval: str = "dom"
    k_retrieval: int = 3
    pixel_size: int = 16
    knowledge_cap: int = 100
    # generator
    patch: int = 8
    d_model: int = 128
    n_layers: int = 3
    n_heads: int = 8
    ff_mult: int = 2
    attn_dim: int = 64
    output_cap: int = 60
    use_copy: bool = True
    # 1e-4 leaves the copy model under-trained after 30 epochs of 500 samples
    lr: float = 3e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 8
    keep_checkpoints: int = 2
    # layout
    workdir: str = "runs/default"
    run_name: str = "main"
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        counts = ("n_train", "n_test", "image_size", "n_classes", "cls_epochs", "cls_batch_size", "k_retrieval",
                  "pixel_size", "knowledge_cap", "patch", "d_model", "n_layers", "n_heads", "ff_mult", "attn_dim",
                  "output_cap", "epochs", "batch_size", "keep_checkpoints")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ContractError(f"config field {name} must be a positive count, got {getattr(self, name)}")
        if self.retrieval not in RETRIEVAL_MODES:
            raise ContractError(f"retrieval must be one of {RETRIEVAL_MODES}, got {self.retrieval!r}")
        if not 0.0 < self.prevalence < 1.0:
            raise ContractError(f"prevalence must lie in (0, 1), got {self.prevalence}")
        if self.image_size % self.patch or self.image_size % self.pixel_size:
            raise ContractError("patch and pixel_size must divide image_size")
        if self.output_cap > 60:
            raise ContractError("output_cap cannot exceed 60 tokens")
        if not self.run_name or "/" in self.run_name:
            raise ContractError(f"run_name must be a plain directory name, got {self.run_name!r}")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("cls_channels", "adam_betas"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ContractError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ContractError(f"config {path} must hold a JSON object")
    return PipelineConfig.from_dict(data)
