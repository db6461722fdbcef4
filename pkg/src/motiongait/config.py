"""Flat key=value run configuration.

A config file is UTF-8 text, one `key = value` per line, `#` comments.
Unknown keys are hard errors. Resolution order: profile defaults, then the
config file, then command-line overrides. The fully resolved mapping is
echoed into every output directory.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError
from .network import NetworkConfig
from .train import TrainConfig


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in s.replace(" ", "").split(",") if tok)


KEY_PARSERS = {
    "seed": int,
    "data.train_subjects": int,
    "net.stage_channels": _parse_int_list,
    "net.num_mge_blocks": int,
    "net.embed_dim": int,
    "net.lta_kernel": int,
    "net.lta_stride": int,
    "net.gem_p_init": float,
    "net.spatial_pool": _parse_bool,
    "mem.enabled": _parse_bool,
    "mem.clip_len": int,
    "ffe.num_parts": int,
    "ffe.local_enabled": _parse_bool,
    "train.subjects_per_batch": int,
    "train.samples_per_subject": int,
    "train.margin": float,
    "train.lr": float,
    "train.beta1": float,
    "train.beta2": float,
    "train.epsilon": float,
    "train.iterations": int,
    "train.frames_per_sample": int,
    "train.checkpoint_every": int,
}

PROFILES: dict[str, dict] = {
    # desk: fits the 8-subject synthetic corpus on one CPU in minutes
    "desk": {
        "seed": 0,
        "data.train_subjects": 8,
        "net.stage_channels": (4, 8, 16),
        "net.num_mge_blocks": 2,
        "net.embed_dim": 16,
        "net.lta_kernel": 3,
        "net.lta_stride": 3,
        "net.gem_p_init": 6.5,
        "net.spatial_pool": True,
        "mem.enabled": True,
        "mem.clip_len": 2,
        "ffe.num_parts": 8,
        "ffe.local_enabled": True,
        "train.subjects_per_batch": 4,
        "train.samples_per_subject": 4,
        "train.margin": 0.2,
        "train.lr": 3e-4,
        "train.beta1": 0.9,
        "train.beta2": 0.999,
        "train.epsilon": 1e-8,
        "train.iterations": 600,
        "train.frames_per_sample": 30,
        "train.checkpoint_every": 200,
    },
    # full: the standard 74/50 protocol at publication scale (GPU-free but slow)
    "full": {
        "seed": 0,
        "data.train_subjects": 74,
        "net.stage_channels": (32, 64, 128),
        "net.num_mge_blocks": 2,
        "net.embed_dim": 128,
        "net.lta_kernel": 3,
        "net.lta_stride": 3,
        "net.gem_p_init": 6.5,
        "net.spatial_pool": True,
        "mem.enabled": True,
        "mem.clip_len": 2,
        "ffe.num_parts": 8,
        "ffe.local_enabled": True,
        "train.subjects_per_batch": 8,
        "train.samples_per_subject": 8,
        "train.margin": 0.2,
        "train.lr": 1e-4,
        "train.beta1": 0.9,
        "train.beta2": 0.999,
        "train.epsilon": 1e-8,
        "train.iterations": 90000,
        "train.frames_per_sample": 30,
        "train.checkpoint_every": 5000,
    },
}


def parse_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    raw: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in stripped.split("=", 1))
        raw[key] = value
    return raw


class RunConfig:
    """The resolved key->typed-value mapping for one command invocation."""

    def __init__(self, values: dict, profile: str):
        self.values = values
        self.profile = profile

    def __getitem__(self, key: str):
        return self.values[key]

    def network_config(self, num_classes: int) -> NetworkConfig:
        v = self.values
        return NetworkConfig(
            stage_channels=tuple(v["net.stage_channels"]),
            num_mge_blocks=v["net.num_mge_blocks"],
            clip_len=v["mem.clip_len"],
            num_parts=v["ffe.num_parts"],
            embed_dim=v["net.embed_dim"],
            num_classes=num_classes,
            lta_kernel=v["net.lta_kernel"],
            lta_stride=v["net.lta_stride"],
            gem_p_init=v["net.gem_p_init"],
            spatial_pool=v["net.spatial_pool"],
            mem_enabled=v["mem.enabled"],
            ffe_local_enabled=v["ffe.local_enabled"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            subjects_per_batch=v["train.subjects_per_batch"],
            samples_per_subject=v["train.samples_per_subject"],
            margin=v["train.margin"],
            lr=v["train.lr"],
            beta1=v["train.beta1"],
            beta2=v["train.beta2"],
            epsilon=v["train.epsilon"],
            iterations=v["train.iterations"],
            frames_per_sample=v["train.frames_per_sample"],
            checkpoint_every=v["train.checkpoint_every"],
            seed=v["seed"],
        )

    def echo_text(self, extra: dict | None = None) -> str:
        lines = [f"profile = {self.profile}"]
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, tuple):
                val = ",".join(str(x) for x in val)
            lines.append(f"{key} = {val}")
        for key in sorted(extra or {}):
            lines.append(f"run.{key} = {extra[key]}")
        return "\n".join(lines) + "\n"

    def write_echo(self, directory, name: str = "config.echo",
                   extra: dict | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / name
        path.write_text(self.echo_text(extra))
        return path


def resolve(
    profile: str = "desk",
    config_file=None,
    overrides: dict[str, str] | None = None,
) -> RunConfig:
    """Merge profile defaults, config file, and overrides into a RunConfig."""
    if profile not in PROFILES:
        raise ConfigError(
            f"unknown profile {profile!r}; choose from {sorted(PROFILES)}"
        )
    values = dict(PROFILES[profile])
    raw: dict[str, str] = {}
    if config_file is not None:
        raw.update(parse_config_file(config_file))
    raw.update(overrides or {})
    for key, text in raw.items():
        if key not in KEY_PARSERS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = KEY_PARSERS[key](text) if isinstance(text, str) else text
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})")
    return RunConfig(values, profile)
