"""Run configuration: a line-oriented `key = value` format with [section]
headers, no nesting. Every field has a default; unknown keys are rejected
with their line number.
"""

from __future__ import annotations

from dataclasses import dataclass

from .irreps import parse_irreps
from .model import ModelConfig
from .flow import FlowConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    dataset: str = "data/train.aeqg"
    checkpoint_dir: str = "runs"
    gripper_dir: str = ""  # empty = shipped grippers
    # data generation
    grippers: tuple = ("jaw2",)
    scenes: int = 50
    eval_scenes: int = 5
    min_objects: int = 1
    max_objects: int = 3
    workspace: float = 0.22
    density: float = 30000.0
    table: bool = True
    table_margin: float = 0.08
    table_density: float = 4000.0
    grasps_per_object: int = 120
    contact_attempts: int = 200
    contact_lambda_n: float = 0.0001
    contact_steps: int = 120
    voxel_cell: float = 0.001
    # model
    scene_spec: str = "16x0+8x1+4x2"
    query_spec: str = "16x0+8x1+4x2"
    levels: tuple = (2048, 512, 128, 32)
    knn_k: int = 16
    pool_k: int = 8
    query_k: int = 8
    mp_layers: int = 2
    blocks: int = 2
    decode_layers: int = 2
    rbf: int = 8
    time_enc: int = 16
    hidden: int = 32
    rcut: float = 0.12
    # training
    seed: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    scenes_per_batch: int = 5
    grasps_per_batch: int = 128
    p_dummy: float = 0.1
    alpha_late: float = 2.0
    lambda_omega: float = 1.0
    lambda_v: float = 10.0
    lambda_q: float = 1.0
    sigma_p: float = 0.3
    checkpoint_every: int = 500
    # sampling
    sample_steps: int = 50
    guidance: float = 0.0
    count: int = 100

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            scene_spec=parse_irreps(self.scene_spec),
            query_spec=parse_irreps(self.query_spec),
            level_sizes=tuple(self.levels),
            knn_k=self.knn_k,
            pool_k=self.pool_k,
            query_k=self.query_k,
            mp_layers=self.mp_layers,
            n_blocks=self.blocks,
            decode_layers=self.decode_layers,
            rbf_count=self.rbf,
            time_count=self.time_enc,
            mlp_hidden=self.hidden,
            rbf_rcut=self.rcut,
            voxel_cell=self.voxel_cell,
        )

    def flow_config(self) -> FlowConfig:
        return FlowConfig(
            sigma_p=self.sigma_p,
            lambda_omega=self.lambda_omega,
            lambda_v=self.lambda_v,
            lambda_q=self.lambda_q,
            alpha_late=self.alpha_late,
            p_dummy=self.p_dummy,
            steps=self.sample_steps,
            guidance=self.guidance,
        )


# section.key -> RunConfig field
_KEYMAP = {
    "paths.dataset": "dataset",
    "paths.checkpoint_dir": "checkpoint_dir",
    "paths.gripper_dir": "gripper_dir",
    "data.grippers": "grippers",
    "data.scenes": "scenes",
    "data.eval_scenes": "eval_scenes",
    "data.min_objects": "min_objects",
    "data.max_objects": "max_objects",
    "data.workspace": "workspace",
    "data.density": "density",
    "data.table": "table",
    "data.table_margin": "table_margin",
    "data.table_density": "table_density",
    "data.grasps_per_object": "grasps_per_object",
    "data.contact_attempts": "contact_attempts",
    "data.contact_lambda_n": "contact_lambda_n",
    "data.contact_steps": "contact_steps",
    "data.voxel_cell": "voxel_cell",
    "model.scene_spec": "scene_spec",
    "model.query_spec": "query_spec",
    "model.levels": "levels",
    "model.knn_k": "knn_k",
    "model.pool_k": "pool_k",
    "model.query_k": "query_k",
    "model.mp_layers": "mp_layers",
    "model.blocks": "blocks",
    "model.decode_layers": "decode_layers",
    "model.rbf": "rbf",
    "model.time_enc": "time_enc",
    "model.hidden": "hidden",
    "model.rcut": "rcut",
    "train.seed": "seed",
    "train.lr": "lr",
    "train.beta1": "beta1",
    "train.beta2": "beta2",
    "train.eps": "eps",
    "train.steps": "steps",
    "train.scenes_per_batch": "scenes_per_batch",
    "train.grasps_per_batch": "grasps_per_batch",
    "train.p_dummy": "p_dummy",
    "train.alpha_late": "alpha_late",
    "train.lambda_omega": "lambda_omega",
    "train.lambda_v": "lambda_v",
    "train.lambda_q": "lambda_q",
    "train.sigma_p": "sigma_p",
    "train.checkpoint_every": "checkpoint_every",
    "sample.steps": "sample_steps",
    "sample.guidance": "guidance",
    "sample.count": "count",
}


def _convert(raw: str, template, where: str):
    if isinstance(template, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(template, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from e
    if isinstance(template, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from e
    if isinstance(template, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if template and isinstance(template[0], int):
            return tuple(int(s) for s in items)
        return tuple(items)
    return raw


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    section = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        full = f"{section}.{key}" if section else key
        if full not in _KEYMAP:
            raise ConfigError(f"line {line_no}: unknown key {full!r}")
        name = _KEYMAP[full]
        template = getattr(cfg, name)
        try:
            setattr(cfg, name, _convert(value, template, f"line {line_no} ({full})"))
        except ConfigError:
            raise
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    parse_irreps(cfg.scene_spec)
    parse_irreps(cfg.query_spec)
    if any(b >= a for a, b in zip(cfg.levels, cfg.levels[1:])):
        raise ConfigError(f"model.levels must strictly decrease, got {cfg.levels}")
    if not (1 <= cfg.min_objects <= cfg.max_objects <= 7):
        raise ConfigError("data.min_objects/max_objects must stay within 1..7")
    if cfg.eval_scenes >= cfg.scenes and cfg.scenes > 0:
        raise ConfigError("data.eval_scenes must be smaller than data.scenes")


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())


def print_config(cfg: RunConfig) -> str:
    by_section: dict[str, list[str]] = {}
    for full, name in _KEYMAP.items():
        section, key = full.split(".")
        value = getattr(cfg, name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        by_section.setdefault(section, []).append(f"{key} = {value}")
    out = []
    for section in ("paths", "data", "model", "train", "sample"):
        out.append(f"[{section}]")
        out.extend(by_section[section])
        out.append("")
    return "\n".join(out)
