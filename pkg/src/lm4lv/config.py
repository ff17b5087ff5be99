"""Run configuration: flat key=value sections, resolved against defaults.

The same config file drives every pipeline stage; a SHA-256 over the
canonicalized resolved content is embedded in every checkpoint and report so
any emitted number is traceable to an exact run.
"""

import configparser
import hashlib
import io
from dataclasses import dataclass, field


def _default_sections():
    from .backbone import TextBackbone
    from .core import Lm4lvRestorer
    from .mae import MaskedAutoencoderCodec

    codec = MaskedAutoencoderCodec().get_params()
    backbone = TextBackbone().get_params()
    task = Lm4lvRestorer().get_params()
    for params in (codec, backbone, task):
        params.pop("seed", None)
    for key in ("codec", "backbone"):
        task.pop(key, None)
    return {
        "run": {"seed": 0, "out_dir": "runs/default"},
        "corpus": {"n_train": 4096, "n_test": 256, "image_size": 32,
                   "text_chars": 1_200_000},
        "codec": codec,
        "backbone": backbone,
        "task": task,
        "eval": {"n_images": 64, "misalignment": True, "predict_batch": 32},
    }


def _parse_scalar(text):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _format_scalar(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Typed section -> key -> value mapping, fully resolved."""

    sections: dict = field(default_factory=_default_sections)

    @classmethod
    def from_ini(cls, text):
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        resolved = _default_sections()
        for section in parser.sections():
            if section not in resolved:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in resolved[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                resolved[section][key] = _parse_scalar(raw)
        return cls(resolved)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as f:
                return cls.from_ini(f.read())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")

    def to_ini(self):
        out = io.StringIO()
        for section in sorted(self.sections):
            out.write(f"[{section}]\n")
            for key in sorted(self.sections[section]):
                out.write(f"{key} = {_format_scalar(self.sections[section][key])}\n")
            out.write("\n")
        return out.getvalue()

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_ini())

    def hash(self):
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def __getitem__(self, section):
        return self.sections[section]

    # ------------------------------------------------------------------
    # model builders
    # ------------------------------------------------------------------

    def build_codec(self):
        from .mae import MaskedAutoencoderCodec
        return MaskedAutoencoderCodec(seed=self["run"]["seed"], **self["codec"])

    def build_backbone(self, init=None):
        from .backbone import TextBackbone
        params = dict(self["backbone"])
        if init is not None:
            params["init"] = init
        return TextBackbone(seed=self["run"]["seed"], **params)

    def build_restorer(self, codec, backbone, task=None):
        from .core import Lm4lvRestorer
        params = dict(self["task"])
        if task is not None:
            params["task"] = task
        return Lm4lvRestorer(codec=codec, backbone=backbone,
                             seed=self["run"]["seed"], **params)
