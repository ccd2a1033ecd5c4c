"""Key-value run configuration.

One ``key = value`` per line; ``#`` starts a comment. Unknown keys, bad
values and repeated keys are errors that name the offending key.

    key                 default   meaning
    grid.h/.w/.z        32/32/8   voxel grid extents
    grid.resolution     0.4       voxel edge (m)
    model.c2d           32        2D feature channels
    model.c3d           16        3D voxel feature channels
    model.d_exp         4         pseudo semantic slices
    model.n_query       32        pixel and voxel query count
    model.k_critical    64        critical voxels per set
    model.k_nn          5         neighbours for the clustering density
    model.refine_hidden 32        refinement MLP width
    model.refine        true      false freezes the refinement output at zero
    loss.lambda_orth    0.01      orthogonal-loss scale
    loss.w_decouple     0.1       decoupling-loss weight
    loss.w_critical     0.1       critical-alignment weight
    train.lr            2e-4      AdamW learning rate
    train.weight_decay  1e-2      AdamW decoupled weight decay
    train.epochs        10        passes over the dataset (batch 1)
    train.seed          0         run seed
    train.eval_every    0         evaluate every N epochs (0: only at the end)
    data.count          4         scenes generated by ``gen``
    data.image_w/_h     128/96    rendered image size (multiples of 4)
    hsd.slice_level_sim false     one similarity weight per slice
    hor.kl_topk_only    false     restrict the alignment KL to the critical union
"""
from dataclasses import asdict, dataclass, fields, replace

from ..errors import ConfigError
from ..geometry import VoxelGridSpec

# reference hyperparameters of the full-scale model, for documentation
FULL_SCALE = {"c2d": 256, "c3d": 32, "d_exp": 4, "n_query": 100, "k_critical": 4096,
               "grid": (128, 128, 16), "output_grid": (256, 256, 32), "resolution": 0.2,
               "lr": 2e-4, "weight_decay": 1e-2, "epochs": 24}


@dataclass(frozen=True)
class ModelConfig:
    grid_h: int = 32
    grid_w: int = 32
    grid_z: int = 8
    grid_resolution: float = 0.4
    c2d: int = 32
    c3d: int = 16
    d_exp: int = 4
    n_query: int = 32
    k_critical: int = 64
    k_nn: int = 5
    refine_hidden: int = 32
    refine: bool = True
    lambda_orth: float = 0.01
    w_decouple: float = 0.1
    w_critical: float = 0.1
    lr: float = 2e-4
    weight_decay: float = 1e-2
    epochs: int = 10
    seed: int = 0
    eval_every: int = 0
    count: int = 4
    image_w: int = 128
    image_h: int = 96
    slice_level_sim: bool = False
    kl_topk_only: bool = False

    def __post_init__(self):
        validate(self)

    @property
    def grid(self):
        H, W, Z = self.grid_h, self.grid_w, self.grid_z
        # camera sits at x=0 looking along +x; the grid is centred laterally
        return VoxelGridSpec((H, W, Z), (0.0, -W * self.grid_resolution / 2, 0.0),
                             self.grid_resolution)

    @property
    def image_size(self):
        return (self.image_w, self.image_h)

    def with_overrides(self, **kw):
        return replace(self, **kw)

    def to_text(self):
        inv = {v: k for k, v in KEYS.items()}
        lines = []
        for name, value in asdict(self).items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{inv[name]} = {value!r}" if isinstance(value, float)
                         else f"{inv[name]} = {value}")
        return "\n".join(lines) + "\n"


KEYS = {
    "grid.h": "grid_h", "grid.w": "grid_w", "grid.z": "grid_z",
    "grid.resolution": "grid_resolution",
    "model.c2d": "c2d", "model.c3d": "c3d", "model.d_exp": "d_exp",
    "model.n_query": "n_query", "model.k_critical": "k_critical", "model.k_nn": "k_nn",
    "model.refine_hidden": "refine_hidden", "model.refine": "refine",
    "loss.lambda_orth": "lambda_orth", "loss.w_decouple": "w_decouple",
    "loss.w_critical": "w_critical",
    "train.lr": "lr", "train.weight_decay": "weight_decay", "train.epochs": "epochs",
    "train.seed": "seed", "train.eval_every": "eval_every",
    "data.count": "count", "data.image_w": "image_w", "data.image_h": "image_h",
    "hsd.slice_level_sim": "slice_level_sim", "hor.kl_topk_only": "kl_topk_only",
}
_TYPES = {f.name: f.type for f in fields(ModelConfig)}


def validate(cfg):
    positive = ("grid_h", "grid_w", "grid_z", "c2d", "c3d", "d_exp", "n_query",
                "k_critical", "k_nn", "refine_hidden", "image_w", "image_h")
    for name in positive:
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{_key(name)} must be >= 1, got {getattr(cfg, name)}")
    for name in ("lambda_orth", "w_decouple", "w_critical", "lr", "weight_decay",
                 "epochs", "eval_every", "count"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{_key(name)} must be >= 0")
    if not cfg.grid_resolution > 0:
        raise ConfigError("grid.resolution must be positive")
    if cfg.n_query < cfg.d_exp:
        raise ConfigError("model.n_query must be >= model.d_exp")
    if cfg.k_critical > cfg.grid_h * cfg.grid_w * cfg.grid_z:
        raise ConfigError("model.k_critical exceeds the voxel count")
    if cfg.image_w % 4 or cfg.image_h % 4:
        raise ConfigError("data.image_w and data.image_h must be multiples of 4")


def _key(field_name):
    return next(k for k, v in KEYS.items() if v == field_name)


def _coerce(key, raw):
    kind = _TYPES[KEYS[key]]
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError
            return low in ("true", "1")
        if kind in (int, "int"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {getattr(kind, '__name__', kind)}") from None


def parse_config_text(text, base=None):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        if KEYS[key] in values:
            raise ConfigError(f"config key {key!r} given twice")
        values[KEYS[key]] = _coerce(key, raw)
    return replace(base or ModelConfig(), **values)


def parse_config(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    return parse_config_text(text)


def parse_override(item):
    """'model.d_exp=4' -> ('d_exp', 4)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = (s.strip() for s in item.split("=", 1))
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    return KEYS[key], _coerce(key, raw)
