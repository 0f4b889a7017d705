"""Training/model configuration and its key=value file format.

Keys carry a section prefix (``train.lr_max=5e-4``).  Blank lines and lines
starting with ``#`` are ignored.  ``INKL_SEED`` in the environment overrides
``train.seed``.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from inklpose.errors import ConfigError


@dataclass
class TrainConfig:
    # train
    batch_size: int = 8
    lr_min: float = 2e-5
    lr_max: float = 5e-4
    cycle_len: int = 500
    max_steps: int = 5000
    seed: int = 0
    grad_clip: float = 10.0
    ckpt_every: int = 500
    log_every: int = 1
    precision: int = 32
    augment: bool = True
    # model
    n_points: int = 1024
    n_kpt: int = 96
    d: int = 256
    d1: int = 128
    d2: int = 128
    d3: int = 64
    K: int = 4
    S: int = 12
    n_rec: int = 960
    n_fps: int = 120
    M: int = 2
    heads: int = 4
    iakd_rounds: int = 2
    d_state: int = 8
    geo_knn: int = 16
    temperature: float = 1.0
    reflip_backward: bool = False
    # loss weights
    w_sep: float = 10.0
    w_surf: float = 10.0
    w_sim: float = 15.0
    w_map: float = 2.0
    w_pose: float = 0.3
    # ablations
    uni_mamba: bool = False
    attention_gkfa: bool = False
    psf_instead_of_fsf: bool = False
    disable_Lsurf: bool = False
    disable_Lsep: bool = False
    use_agpose_losses: bool = False

    def validate(self) -> "TrainConfig":
        if not self.lr_min < self.lr_max:
            raise ConfigError(f"lr_min ({self.lr_min}) must be below lr_max ({self.lr_max})")
        for name in ("batch_size", "cycle_len", "max_steps", "n_points", "n_kpt", "d", "d1", "d2", "d3",
                     "K", "S", "n_rec", "n_fps", "M", "heads", "iakd_rounds", "d_state", "geo_knn"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("w_sep", "w_surf", "w_sim", "w_map", "w_pose"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.n_rec < self.n_kpt:
            raise ConfigError("n_rec must be at least n_kpt")
        if self.M >= self.n_kpt:
            raise ConfigError("M must be smaller than n_kpt")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.uni_mamba and self.attention_gkfa:
            raise ConfigError("uni_mamba and attention_gkfa are mutually exclusive")
        return self

    @property
    def m(self) -> int:
        return self.n_rec // self.n_kpt

    @property
    def dtype(self):
        return "float64" if self.precision == 64 else "float32"

    def model_dict(self) -> dict:
        return {k: getattr(self, k) for k in MODEL_KEYS}

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return "".join(f"{SECTION[k]}.{k}={_fmt(v)}\n" for k, v in asdict(self).items())


_TRAIN = ("batch_size", "lr_min", "lr_max", "cycle_len", "max_steps", "seed", "grad_clip", "ckpt_every",
          "log_every", "precision", "augment")
MODEL_KEYS = ("n_points", "n_kpt", "d", "d1", "d2", "d3", "K", "S", "n_rec", "n_fps", "M", "heads",
              "iakd_rounds", "d_state", "geo_knn", "temperature", "reflip_backward", "uni_mamba",
              "attention_gkfa", "psf_instead_of_fsf")
_LOSS = ("w_sep", "w_surf", "w_sim", "w_map", "w_pose")
_ABLATION = ("uni_mamba", "attention_gkfa", "psf_instead_of_fsf", "disable_Lsurf", "disable_Lsep",
             "use_agpose_losses")

SECTION = {}
for _k in _TRAIN:
    SECTION[_k] = "train"
for _k in MODEL_KEYS:
    SECTION[_k] = "model"
for _k in _LOSS:
    SECTION[_k] = "loss"
for _k in _ABLATION:
    SECTION[_k] = "ablation"

_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    if kind in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind in ("int", int):
        return int(raw)
    return float(raw)


def parse_config(text: str, base: TrainConfig | None = None, source: str = "<config>") -> TrainConfig:
    values = (base or TrainConfig()).to_dict()
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {s!r}")
        key, raw = (p.strip() for p in s.split("=", 1))
        section, _, name = key.rpartition(".")
        if name not in SECTION or (section and section != SECTION[name]):
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[name] = _convert(name, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    cfg = TrainConfig(**values)
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path=None, env=None) -> TrainConfig:
    """Read a config file (or defaults) and apply the ``INKL_SEED`` override."""
    cfg = TrainConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        cfg = parse_config(text, source=str(p))
    env = os.environ if env is None else env
    if "INKL_SEED" in env:
        try:
            cfg.seed = int(env["INKL_SEED"])
        except ValueError:
            raise ConfigError(f"INKL_SEED must be an integer, got {env['INKL_SEED']!r}") from None
    return cfg.validate()
