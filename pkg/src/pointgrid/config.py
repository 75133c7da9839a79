"""Run configuration: one INI-style text file drives every command.

Every known key has a default; unknown sections or keys are rejected so
typos fail loudly instead of silently training the wrong model.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from .network import ModelConfig
from .pointcloud import AugmentationSpec
from .projection import GridSpec

# section -> key -> (converter, default)
_SCHEMA = {
    "data": {
        "source": (str, "synthetic"),
        "scan_dir": (str, ""),
        "label_map": (str, ""),
        "synthetic_scenes": (int, 20),
        "synthetic_seed": (int, 0),
        "synthetic_symmetric": (bool, False),
    },
    "bev": {
        "width": (int, 64),
        "height": (int, 64),
        "x_min": (float, -50.0),
        "y_min": (float, -50.0),
        "x_max": (float, 50.0),
        "y_max": (float, 50.0),
    },
    "rv": {
        "width": (int, 256),
        "height": (int, 16),
        "f_up_deg": (float, 3.0),
        "f_down_deg": (float, 25.0),
    },
    "model": {
        "num_classes": (int, 5),
        "num_blocks": (int, 2),
        "block_in_channels": ("int_list", [9, 32]),
        "block_out_channels": ("int_list", [32, 48]),
        "mlp_channels": (int, 32),
        "stage_channels": ("int_list", [32, 16, 32, 64, 64, 48, 32, 32]),
        "use_point_branch": (bool, True),
        "use_point_fusion": (bool, True),
        "use_ddb": (bool, True),
        "use_afpn": (bool, True),
        "per_channel_gate": (bool, False),
    },
    "optim": {
        "lr0": (float, 0.02),
        "lr_decay": (float, 0.1),
        "decay_every": (int, 6),
        "momentum": (float, 0.9),
        "grad_accum": (int, 1),
    },
    "train": {
        "epochs": (int, 200),
        "seed": (int, 0),
        "stop_miou": (float, 0.90),
        "eval_every": (int, 1),
        "out_dir": (str, "runs/default"),
    },
    "augment": {
        "rotation_deg": (float, 180.0),
        "scale_min": (float, 0.95),
        "scale_max": (float, 1.05),
        "flip_x": (float, 0.5),
        "flip_y": (float, 0.5),
        "noise_sigma": (float, 0.02),
    },
    "loss": {
        "use_consistency": (bool, True),
        "epsilon": (float, 0.001),
        "class_frequencies": (str, "auto"),
    },
}

_TRUE = {"1", "yes", "true", "on"}
_FALSE = {"0", "no", "false", "off"}


def _convert(section, key, conv, raw):
    try:
        if conv is bool:
            low = raw.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if conv == "int_list":
            return [int(tok) for tok in raw.replace(",", " ").split()]
        return conv(raw)
    except ValueError as exc:
        raise ValueError(f"config [{section}] {key}: {exc}") from None


@dataclass
class RunConfig:
    """Flattened view of the config file with typed values per section."""

    values: dict = field(default_factory=dict)

    @classmethod
    def defaults(cls) -> "RunConfig":
        vals = {s: {k: d for k, (_c, d) in keys.items()} for s, keys in _SCHEMA.items()}
        return cls(values=vals)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls.defaults()
        parser = configparser.ConfigParser(interpolation=None)
        with open(path) as f:
            parser.read_file(f)
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ValueError(f"config: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ValueError(f"config: unknown key {key!r} in [{section}]")
                conv = _SCHEMA[section][key][0]
                cfg.values[section][key] = _convert(section, key, conv, raw)
        return cfg

    def get(self, section, key):
        return self.values[section][key]

    def set(self, section, key, value):
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise KeyError(f"[{section}] {key} is not a known config entry")
        self.values[section][key] = value

    def bev_spec(self) -> GridSpec:
        b = self.values["bev"]
        return GridSpec.bev(b["width"], b["height"], b["x_min"], b["y_min"],
                            b["x_max"], b["y_max"])

    def rv_spec(self) -> GridSpec:
        r = self.values["rv"]
        return GridSpec.rv(r["width"], r["height"],
                           f_up=np.deg2rad(r["f_up_deg"]),
                           f_down=np.deg2rad(r["f_down_deg"]))

    def model_config(self) -> ModelConfig:
        m = self.values["model"]
        return ModelConfig(
            bev_spec=self.bev_spec(),
            rv_spec=self.rv_spec(),
            num_classes=m["num_classes"],
            num_blocks=m["num_blocks"],
            block_in_channels=tuple(m["block_in_channels"]),
            block_out_channels=tuple(m["block_out_channels"]),
            mlp_channels=m["mlp_channels"],
            stage_channels=tuple(m["stage_channels"]),
            use_point_branch=m["use_point_branch"],
            use_point_fusion=m["use_point_fusion"],
            use_ddb=m["use_ddb"],
            use_afpn=m["use_afpn"],
            per_channel_gate=m["per_channel_gate"],
        )

    def augmentation_spec(self) -> AugmentationSpec:
        a = self.values["augment"]
        return AugmentationSpec(
            rotation_z=np.deg2rad(a["rotation_deg"]),
            scale_min=a["scale_min"],
            scale_max=a["scale_max"],
            flip_x=a["flip_x"],
            flip_y=a["flip_y"],
            noise_sigma=a["noise_sigma"],
        )

    def class_frequencies(self):
        """Explicit per-class frequencies, or None for data-derived ones."""
        raw = self.values["loss"]["class_frequencies"]
        if raw.strip().lower() == "auto":
            return None
        freq = [float(tok) for tok in raw.replace(",", " ").split()]
        if len(freq) != self.values["model"]["num_classes"]:
            raise ValueError("config: class_frequencies length != num_classes")
        return np.asarray(freq)

    def write(self, path):
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in self.values.items():
            parser[section] = {}
            for key, val in keys.items():
                if isinstance(val, list):
                    parser[section][key] = ",".join(str(v) for v in val)
                elif isinstance(val, bool):
                    parser[section][key] = "true" if val else "false"
                else:
                    parser[section][key] = str(val)
        with open(path, "w") as f:
            parser.write(f)
