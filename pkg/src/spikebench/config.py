"""Run configuration: YAML files with ``key: value`` lines, nested sections and ``--set`` overrides.

Nested sections are flattened, so ``node: {tau: 2.0}`` and ``tau: 2.0`` are
the same setting. Key names follow the usual classification config layout
(``step``, ``embed_dim``, ``attn_layer``, ``node_type`` ...) plus a few
extensions for the encoders, ablations and energy model.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import yaml

from .attention import AttnConfig
from .data import DATASET_KINDS, DatasetSpec
from .encoders import EncoderSpec
from .errors import ConfigError
from .network import ModelConfig
from .neurons import NeuronConfig
from .train import TrainConfig

DEFAULTS: dict = {
    # model structure
    "model": "spikformer_toy",
    "step": 2,
    "patch_size": 4,
    "in_channels": 1,
    "embed_dim": 32,
    "num_heads": 4,
    "mlp_ratio": 4.0,
    "depths": 1,
    "embed_layer": "SPS",
    "attn_layer": "SSA",
    "sps_conv_layers": 4,
    "qkv_generator": "linear",
    "num_experts": 1,
    "randomized_qk": False,
    "attn_scale": None,
    "scale_position": "pre",
    "out_proj": True,
    # node
    "tau": 2.0,
    "threshold": 1.0,
    "v_reset": 0.0,
    "reset_mode": "hard",
    "act_function": "SigmoidGrad",
    "node_type": "LIFNode",
    "alpha": 4.0,
    # encoding
    "encoder": "direct",
    "ttfs_binary": False,
    # dataset
    "data_dir": None,
    "dataset": "synthetic_blobs",
    "num_classes": 2,
    "img_size": 16,
    "mean": [0.0],
    "std": [1.0],
    "sequential": False,
    "permute_seed": None,
    "n_train": None,
    "n_test": None,
    "noise": 0.1,
    # train hyperparameters
    "batch_size": 16,
    "val_batch_size": 128,
    "lr": 1e-2,
    "min_lr": 1e-5,
    "sched": "cosine",
    "epochs": 20,
    "weight_decay": 0.05,
    "betas": [0.9, 0.999],
    # ablation and energy
    "ablation": "random_attn",
    "quant_bits": 8,
    # run
    "output": "runs",
    "device": "cpu",
    "seed": 0,
}

# accepted for compatibility with existing config files and recorded in the snapshot, but unused
IGNORED_KEYS = frozenset({"amp", "crop_pct", "mixup", "cutmix", "reprob", "remode"})

NODE_TYPES = {"LIFNode": "LIF", "PLIFNode": "PLIF", "CLIFNode": "CLIF", "GLIFNode": "GLIF", "KLIFNode": "KLIF"}
ACT_FUNCTIONS = {"SigmoidGrad": "sigmoid", "sigmoid": "sigmoid"}
DATASET_ALIASES = {"mnist": "idx_images", "torch/mnist": "idx_images", "cifar10": "cifar_binary",
                   "torch/cifar10": "cifar_binary"}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``5e-4``) as numbers."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?(?:[eE][-+]?[0-9]+)?|\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)|\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


class ConfigKeyError(ConfigError):
    """An unknown configuration key; ``key`` holds its name."""

    def __init__(self, key: str, where: str = "config"):
        super().__init__(f"unknown {where} key {key!r}")
        self.key = key


def flatten(tree: dict, where: str = "config") -> dict:
    """Merge nested sections into one flat mapping; a key defined twice is an error."""
    flat: dict = {}

    def walk(node: dict, path: str):
        for key, value in node.items():
            key = str(key)
            if isinstance(value, dict):
                walk(value, f"{path}{key}.")
                continue
            if key in flat:
                raise ConfigError(f"{where}: key {key!r} is set twice (second time under {path or 'top level'})")
            flat[key] = value

    walk(tree, "")
    return flat


def _check_keys(flat: dict, where: str) -> None:
    for key in flat:
        if key not in DEFAULTS and key not in IGNORED_KEYS:
            raise ConfigKeyError(key, where)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as a YAML scalar or list."""
    key, sep, value = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        parsed = load_yaml(value) if value.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key}: cannot parse value {value!r}: {exc}") from None
    return key, parsed


def load_config(path=None, overrides=(), seed: int | None = None) -> dict:
    """Defaults, then the file at ``path``, then ``overrides``, then ``seed``."""
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            tree = load_yaml(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if tree is None:
            tree = {}
        if not isinstance(tree, dict):
            raise ConfigError(f"config {path} must be a mapping of key: value lines")
        flat = flatten(tree, str(path))
        _check_keys(flat, str(path))
        cfg.update(flat)
    for item in overrides:
        key, value = parse_override(item)
        _check_keys({key: value}, "--set")
        cfg[key] = value
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(dict(sorted(cfg.items())), default_flow_style=None, sort_keys=False)


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DatasetSpec
    seed: int
    output: str
    ablation: str
    quant_bits: int


def _lookup(table: dict, key: str, value) -> str:
    if value in table.values():
        return value
    if value not in table:
        raise ConfigError(f"{key}: unsupported value {value!r}; expected one of {sorted(table)}")
    return table[value]


def _as_list(key: str, value) -> list:
    return [float(v) for v in (value if isinstance(value, (list, tuple)) else [value])]


def build(cfg: dict) -> RunConfig:
    """Validate a flat config and turn it into typed model, train and data settings."""
    c = cfg
    if c["embed_layer"] != "SPS":
        raise ConfigError(f"embed_layer: only 'SPS' is implemented, got {c['embed_layer']!r}")
    dataset = c["dataset"]
    dataset = DATASET_ALIASES.get(dataset, dataset)
    if dataset not in DATASET_KINDS:
        raise ConfigError(f"dataset: unknown kind {c['dataset']!r}; expected one of "
                          f"{DATASET_KINDS + tuple(DATASET_ALIASES)}")
    try:
        seed = int(c["seed"])
        neuron = NeuronConfig(kind=_lookup(NODE_TYPES, "node_type", c["node_type"]), tau=float(c["tau"]),
                              v_threshold=float(c["threshold"]), v_reset=float(c["v_reset"]),
                              reset_mode=c["reset_mode"], alpha=float(c["alpha"]),
                              surrogate=_lookup(ACT_FUNCTIONS, "act_function", c["act_function"]))
        attn = AttnConfig(variant=c["attn_layer"], qkv_generator=c["qkv_generator"],
                          heads=int(c["num_heads"]), dim=int(c["embed_dim"]),
                          scale=None if c["attn_scale"] is None else float(c["attn_scale"]),
                          num_experts=int(c["num_experts"]), randomized_qk=bool(c["randomized_qk"]),
                          scale_position=c["scale_position"], out_proj=bool(c["out_proj"]))
        encoder = EncoderSpec(kind=c["encoder"], steps=int(c["step"]), seed=seed,
                              ttfs_binary=bool(c["ttfs_binary"]))
        sequential = bool(c["sequential"])
        img_size = int(c["img_size"])
        model = ModelConfig(step=int(c["step"]), patch_size=int(c["patch_size"]),
                            in_channels=int(c["in_channels"]),
                            img_size=img_size * img_size if sequential else img_size,
                            embed_dim=int(c["embed_dim"]), num_heads=int(c["num_heads"]),
                            mlp_ratio=float(c["mlp_ratio"]), depths=int(c["depths"]),
                            sps_conv_layers=int(c["sps_conv_layers"]), conv_dims=1 if sequential else 2,
                            num_classes=int(c["num_classes"]), attn=attn, neuron=neuron, encoder=encoder)
        train = TrainConfig(lr=float(c["lr"]), min_lr=float(c["min_lr"]), sched=c["sched"],
                            batch_size=int(c["batch_size"]), val_batch_size=int(c["val_batch_size"]),
                            epochs=int(c["epochs"]), seed=seed, betas=tuple(_as_list("betas", c["betas"])),
                            weight_decay=float(c["weight_decay"]))
        data = DatasetSpec(kind=dataset, path=c["data_dir"], sequential=sequential,
                           permute_seed=None if c["permute_seed"] is None else int(c["permute_seed"]),
                           n_train=None if c["n_train"] is None else int(c["n_train"]),
                           n_test=None if c["n_test"] is None else int(c["n_test"]),
                           num_classes=int(c["num_classes"]), img_size=img_size,
                           in_channels=int(c["in_channels"]), noise=float(c["noise"]), seed=seed,
                           mean=_as_list("mean", c["mean"]), std=_as_list("std", c["std"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    quant_bits = int(c["quant_bits"])
    if quant_bits < 1:
        raise ConfigError(f"quant_bits must be >= 1, got {quant_bits}")
    return RunConfig(model, train, data, seed, str(c["output"]), str(c["ablation"]), quant_bits)
