"""Run configuration: INI sections [model] [mask] [train] [task] [output].

Every key maps onto a dataclass field; values are coerced from the type of
the field's default. ``RunConfig.load`` merges file values with CLI
overrides (override wins) and validates the combination before any compute.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

from .masking import PSEUDO_KINDS, Mode
from .model import ModelConfig
from .position import PE_KINDS
from .tasks import POSITION_TASKS, TASK_KINDS, TaskSpec
from .training import TrainConfig

OUT_ENV = "STABLEMASK_OUT"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (CLI exit code 1)."""


@dataclass
class ModelSection:
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ffn_expansion: int = 4
    pe: str = "rope"
    rope_base: float = 10000.0
    max_len: int = 32
    tie_embeddings: bool = False
    norm_eps: float = 1e-6
    init_std: float = 0.02
    vocab_size: int = 0          # 0: derived from the task


@dataclass
class MaskSection:
    mask: str = "stablemask"
    gamma: float = 0.5
    headwise_gamma: bool = False
    pseudo: str = "decay"
    pseudo_value: float = 1e-2
    mode: str = "train"


@dataclass
class TrainSection:
    peak_lr: float = 3e-3
    begin_lr: float = 1e-6
    warmup_steps: int = 100
    total_steps: int = 2000
    decay: str = "linear"
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    batch_size: int = 16
    seq_len: int = 32
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0


@dataclass
class TaskSection:
    kind: str = "pos-mapping"
    train_lengths: str = "4-32"
    eval_lengths: str = "4-32"
    n_max: int = 32
    vocab: int = 0
    corpus: str = ""
    at_tokens: int = 0


@dataclass
class OutputSection:
    dir: str = ""
    plots: bool = True


SECTIONS = {"model": ModelSection, "mask": MaskSection, "train": TrainSection,
            "task": TaskSection, "output": OutputSection}


def parse_lengths(text: str) -> list[int]:
    """``"4-32"`` or ``"4,8,16"`` (or a mix) to a sorted list of ints."""
    out = set()
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.update(range(int(lo), int(hi) + 1))
        else:
            out.add(int(part))
    if not out:
        raise ConfigError(f"empty length list {text!r}")
    return sorted(out)


def _coerce(value, like, key: str):
    if isinstance(value, str):
        value = value.strip()
    try:
        if isinstance(like, bool):
            if isinstance(value, bool):
                return value
            low = str(value).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {type(like).__name__}") from None


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    mask: MaskSection = field(default_factory=MaskSection)
    train: TrainSection = field(default_factory=TrainSection)
    task: TaskSection = field(default_factory=TaskSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        """Read ``path`` (optional) then apply ``{"section.key": value}`` overrides."""
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser()
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except (OSError, configparser.Error) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            for sec in parser.sections():
                for key, val in parser.items(sec):
                    cfg.set(f"{sec}.{key}", val)
        for key, val in (overrides or {}).items():
            if val is not None:
                cfg.set(key, val)
        cfg.validate()
        return cfg

    def set(self, dotted: str, value) -> None:
        sec, _, key = dotted.partition(".")
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        obj = getattr(self, sec)
        if key not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown key {key!r} in [{sec}]")
        setattr(obj, key, _coerce(value, getattr(SECTIONS[sec](), key), dotted))

    def validate(self) -> None:
        m, k, t, s = self.mask, self.model, self.train, self.task
        if not m.gamma > 0:
            raise ConfigError(f"mask.gamma must be > 0, got {m.gamma}")
        if m.mask not in ("vanilla", "stablemask"):
            raise ConfigError(f"mask.mask must be vanilla or stablemask, got {m.mask!r}")
        if m.pseudo not in PSEUDO_KINDS:
            raise ConfigError(f"mask.pseudo must be one of {PSEUDO_KINDS}")
        try:
            mode = Mode(m.mode)
        except ValueError:
            raise ConfigError(f"mask.mode must be one of {[x.value for x in Mode]}") from None
        if mode is not Mode.TRAIN:
            raise ConfigError(f"mask.mode={m.mode!r} is an inference mode; training needs 'train'")
        if k.pe not in PE_KINDS:
            raise ConfigError(f"model.pe must be one of {PE_KINDS}")
        if s.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}")
        if s.kind == "char-lm" and not s.corpus:
            raise ConfigError("task.corpus is required for char-lm")
        if t.seq_len > k.max_len and s.kind not in POSITION_TASKS:
            raise ConfigError(f"train.seq_len {t.seq_len} exceeds model.max_len {k.max_len}")
        if s.kind in POSITION_TASKS:
            longest = max(parse_lengths(s.train_lengths)) + s.at_tokens
            if longest > k.max_len:
                raise ConfigError(f"task lengths up to {longest} exceed model.max_len {k.max_len}")
        try:
            self.model_config()
            self.train_config()
            self.task_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def task_spec(self) -> TaskSpec:
        s = self.task
        return TaskSpec(s.kind, parse_lengths(s.train_lengths), parse_lengths(s.eval_lengths),
                        s.n_max, s.vocab, self.train.seed)

    def model_config(self) -> ModelConfig:
        k, m = self.model, self.mask
        vocab = k.vocab_size or self.task_spec().vocab
        return ModelConfig(vocab_size=vocab, model_dim=k.model_dim, n_layers=k.n_layers,
                           n_heads=k.n_heads, ffn_expansion=k.ffn_expansion, pe=k.pe,
                           rope_base=k.rope_base, mask=m.mask, gamma=m.gamma,
                           headwise_gamma=m.headwise_gamma, pseudo=m.pseudo,
                           pseudo_value=m.pseudo_value, max_len=k.max_len,
                           tie_embeddings=k.tie_embeddings, norm_eps=k.norm_eps,
                           init_std=k.init_std)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(peak_lr=t.peak_lr, begin_lr=t.begin_lr, warmup_steps=t.warmup_steps,
                           total_steps=t.total_steps, decay=t.decay, betas=(t.beta1, t.beta2),
                           eps=t.eps, weight_decay=t.weight_decay, clip_norm=t.clip_norm,
                           batch_size=t.batch_size, seq_len=t.seq_len, seed=t.seed,
                           eval_every=t.eval_every)

    def out_dir(self) -> Path:
        return Path(self.output.dir or os.environ.get(OUT_ENV) or "runs")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for sec in SECTIONS:
            parser[sec] = {k: str(v) for k, v in dataclasses.asdict(getattr(self, sec)).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {sec: dataclasses.asdict(getattr(self, sec)) for sec in SECTIONS}
