"""Flat key=value run configuration with CLI overrides.

Files hold one ``key = value`` per line; ``#`` starts a comment. Unknown keys
are hard errors. Every key can be overridden on the command line as
``--key value``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

__all__ = ["RunConfig", "parse_config_file", "apply_overrides", "DOCUMENTED_KEYS"]


@dataclass
class RunConfig:
    # data
    dataset: str = "builtin"  # builtin | mnist | cifar10
    data_dir: str = ""  # empty => COLORSHIELD_DATA
    input_size: int = 16
    num_classes: int = 10
    train_size: int = 0  # 0 = all training images

    # model
    blocks: int = 3
    layers_per_block: int = 3
    growth_rate: int = 8
    initial_channels: int = 16
    seed: int = 0

    # training
    train_mode: str = "undefended"  # undefended | pipeline | surrogate
    train_epochs: int = 8
    phase2_epochs: int = 4
    lr: float = 0.05
    batch: int = 32
    momentum: float = 0.9
    lr_decay: float = 0.1

    # denoiser / defense
    denoise_levels: int = 2
    crop_fraction: float = 2.0 / 3.0

    # attack
    attack: str = "fgsm"  # fgsm | rand_fgsm | bim | deepfool | jsma | cw
    epsilon: float = 0.15
    alpha: float = 0.05
    iterations: int = 10
    target: int = -1  # -1 = untargeted
    paper_sign: bool = False
    cw_c_init: float = 1e-2
    cw_search_steps: int = 5
    cw_kappa: float = 0.0
    cw_steps: int = 1000
    cw_lr: float = 1e-2
    jsma_theta: float = 1.0
    jsma_gamma: float = 0.1
    deepfool_overshoot: float = 0.02
    deepfool_max_iter: int = 50

    # evaluation
    threat: str = "grey_box"  # white_box | grey_box | black_box
    eval_subset: int = 500
    runs: int = 6
    surrogate_seed: int = 777
    record_wall_time: bool = True

    # output
    out_dir: str = "runs"
    report_format: str = "csv"  # csv | markdown


DOCUMENTED_KEYS = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str, current) -> object:
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config: key {key!r} expects a boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"config: key {key!r} expects an integer, got {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"config: key {key!r} expects a number, got {raw!r}") from None
    return raw


def parse_config_file(path, base: RunConfig | None = None) -> RunConfig:
    """Parse a flat config file over defaults; unknown keys are errors."""
    cfg = base or RunConfig()
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in DOCUMENTED_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, raw, getattr(cfg, key)))
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    for key, raw in overrides.items():
        if key not in DOCUMENTED_KEYS:
            raise ValueError(f"config: unknown override key {key!r}")
        setattr(cfg, key, _coerce(key, raw, getattr(cfg, key)))
    return cfg


def config_echo(cfg: RunConfig) -> dict[str, str]:
    """Stable string form of every key, for report provenance headers."""
    return {f.name: repr(getattr(cfg, f.name)) for f in fields(RunConfig)}
