"""JSON experiment configuration."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import TaskSpec
from .errors import ConfigError
from .optim import AdamWConfig, SgdConfig
from .peft import AdapterConfig, LiftMode
from .tensor import DType

TOP_KEYS = {
    "seed", "task", "model", "phase", "adapter", "optim", "epochs", "batch_size",
    "dtype", "checkpoint_in", "checkpoint_out", "report_out",
}
ADAPTER_KEYS = {"rank", "alpha", "lift_mode", "init_stddev", "target"}
OPTIM_KEYS = {"kind", "lr", "betas", "eps", "weight_decay", "momentum", "clip_norm"}

DEFAULT_ADAPTER = dict(rank=2, alpha=16.0, lift_mode="lie_taylor", init_stddev=0.02, target=["conv*", "linear*"])
DEFAULT_OPTIM = dict(kind="adamw", lr=1e-3, betas=[0.9, 0.999], eps=1e-8, weight_decay=0.0, momentum=0.0, clip_norm=None)


def _reject_unknown(d: dict, allowed: set, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    task: TaskSpec = field(default_factory=TaskSpec)
    model: str = "smallcnn"
    phase: str = "pretrain"
    adapter: AdapterConfig = field(default_factory=lambda: AdapterConfig(**{**DEFAULT_ADAPTER, "target": ("conv*", "linear*")}))
    optim: AdamWConfig | SgdConfig = field(default_factory=AdamWConfig)
    epochs: int = 20
    batch_size: int = 32
    dtype: DType = DType.F64
    checkpoint_in: Path | None = None
    checkpoint_out: Path | None = None
    report_out: Path | None = None

    @property
    def run_id(self) -> str:
        mode = self.adapter.lift_mode.value if self.phase == "finetune" else "full"
        return f"{self.phase}-{self.model}-{mode}-r{self.adapter.rank}-s{self.seed}"

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path = Path(".")) -> "ExperimentConfig":
        _reject_unknown(raw, TOP_KEYS, "config")
        try:
            adapter = {**DEFAULT_ADAPTER, **raw.get("adapter", {})}
            _reject_unknown(adapter, ADAPTER_KEYS, "adapter")
            target = adapter["target"]
            adapter_cfg = AdapterConfig(
                int(adapter["rank"]), float(adapter["alpha"]), LiftMode(adapter["lift_mode"]),
                float(adapter["init_stddev"]), target if isinstance(target, str) else tuple(target),
            )
            opt = {**DEFAULT_OPTIM, **raw.get("optim", {})}
            _reject_unknown(opt, OPTIM_KEYS, "optim")
            clip = None if opt["clip_norm"] is None else float(opt["clip_norm"])
            if opt["kind"] == "adamw":
                b1, b2 = opt["betas"]
                optim = AdamWConfig(float(opt["lr"]), float(b1), float(b2), float(opt["eps"]), float(opt["weight_decay"]), clip)
            elif opt["kind"] == "sgd":
                optim = SgdConfig(float(opt["lr"]), float(opt["momentum"]), clip)
            else:
                raise ConfigError(f"unknown optimizer {opt['kind']!r}")
            phase = raw.get("phase", "pretrain")
            if phase not in ("pretrain", "finetune"):
                raise ConfigError(f"phase must be 'pretrain' or 'finetune', got {phase!r}")
            model = raw.get("model", "smallcnn")
            if model not in ("smallcnn", "mlp"):
                raise ConfigError(f"model must be 'smallcnn' or 'mlp', got {model!r}")
            seed = int(raw.get("seed", 0))
            if not 0 <= seed < 2**64:
                raise ConfigError("seed must be a u64")
            epochs, batch_size = int(raw.get("epochs", 20)), int(raw.get("batch_size", 32))
            if epochs < 1 or batch_size < 1:
                raise ConfigError("epochs and batch_size must be positive")

            def path(key):
                value = raw.get(key)
                return None if value is None else (base_dir / value).resolve()

            return cls(
                seed=seed,
                task=TaskSpec.from_json(raw.get("task", {})),
                model=model,
                phase=phase,
                adapter=adapter_cfg,
                optim=optim,
                epochs=epochs,
                batch_size=batch_size,
                dtype=DType.parse(raw.get("dtype", "F64")),
                checkpoint_in=path("checkpoint_in"),
                checkpoint_out=path("checkpoint_out"),
                report_out=path("report_out"),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw, path.parent)
