"""Flat ``key = value`` run configuration shared by every CLI subcommand."""
from __future__ import annotations

import os
from dataclasses import MISSING, dataclass, field, fields

from .encoder import AGGREGATIONS, EncoderConfig
from .inputs import SCHEMES
from .training import OptimConfig, TrainConfig

OUTPUT_ENV = "UNIENC_OUTPUT_DIR"
PARADIGMS = ("bi", "poly", "cross", "uni")


class ConfigError(ValueError):
    pass


def _doc(default, text):
    return field(default=default, metadata={"doc": text})


@dataclass
class RunConfig:
    paradigm: str = _doc("uni", "bi | poly | cross | uni")
    scheme: str = _doc("repeated", "candidate position ids: repeated | sequential")
    context_sees_candidates: bool = _doc(True, "arrow: context rows may attend to candidates")
    poly_codes: int = _doc(4, "number of learned context codes (poly only)")

    layers: int = _doc(2, "transformer layers")
    heads: int = _doc(4, "attention heads")
    model_dim: int = _doc(64, "hidden size")
    ff_dim: int = _doc(256, "feed-forward size")
    max_len: int = _doc(512, "position table size and total sequence budget")
    dropout: float = _doc(0.1, "dropout rate during training")
    aggregation: str = _doc("avg_tokens", "candidate vector: avg_tokens | cls")
    include_special: bool = _doc(True, "average over [CLS]/[SEP] too")

    peak_lr: float = _doc(2e-4, "maximum learning rate of the warmup schedule")
    warmup_steps: int = _doc(1000, "steps to peak learning rate")
    beta1: float = _doc(0.9, "Adam beta1")
    beta2: float = _doc(0.98, "Adam beta2")
    weight_decay: float = _doc(0.01, "decoupled weight decay on matrices")
    adam_eps: float = _doc(1e-8, "Adam epsilon")

    batch_size: int = _doc(8, "contexts per step; in-batch negatives K = batch_size")
    epochs: int = _doc(10, "passes over the training file")
    max_steps: int = _doc(0, "stop after this many steps (0 = no limit)")
    eval_every: int = _doc(0, "validate every n steps (0 = once per epoch)")
    patience: int = _doc(3, "evaluations without improvement before stopping")
    mlm_rate: float = _doc(0.15, "fraction of tokens selected for the masked-token loss")
    mlm_weight: float = _doc(1.0, "weight of the masked-token loss (0 disables it)")

    train_path: str = _doc("", "training corpus (JSONL)")
    valid_path: str = _doc("", "validation corpus (JSONL)")
    test_path: str = _doc("", "evaluation corpus (JSONL)")
    vocab_path: str = _doc("", "vocabulary file; built from the corpora when empty")
    checkpoint: str = _doc("", "checkpoint to load before eval")
    batch_eval: int = _doc(8, "records per scoring batch during eval")

    seed: int = _doc(0, "global seed")
    output_dir: str = _doc("runs/default", f"where outputs go; ${OUTPUT_ENV} overrides")

    # -- (de)serialisation --------------------------------------------------

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def docs(cls) -> dict[str, str]:
        return {f.name: f.metadata.get("doc", "") for f in fields(cls)}

    @classmethod
    def defaults(cls) -> dict:
        return {f.name: f.default for f in fields(cls) if f.default is not MISSING}

    @classmethod
    def coerce(cls, key: str, raw):
        types = {f.name: type(f.default) for f in fields(cls)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}; known keys: {', '.join(cls.keys())}")
        kind = types[key]
        if not isinstance(raw, str):
            if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
                return float(raw)
            if isinstance(raw, kind):
                return raw
            raw = str(raw)
        text = raw.strip()
        try:
            if kind is bool:
                low = text.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(text)
            if kind is int:
                return int(text)
            if kind is float:
                return float(text)
        except ValueError:
            raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None
        return text

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        cfg = cls(**{k: cls.coerce(k, v) for k, v in values.items()})
        cfg.validate()
        return cfg

    @classmethod
    def parse_text(cls, text: str, source: str = "<config>") -> dict:
        """Raw ``key -> string`` pairs; ``#`` starts a comment, blank lines are ignored."""
        out = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in out:
                raise ConfigError(f"{source}:{n}: {key} given twice")
            cls.coerce(key, value)
            out[key] = value
        return out

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            values = cls.parse_text(fh.read(), str(path))
        values.update(overrides or {})
        return cls.from_mapping(values)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    # -- checks and views ---------------------------------------------------

    def validate(self) -> None:
        problems = []
        if self.paradigm not in PARADIGMS:
            problems.append(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.scheme not in SCHEMES:
            problems.append(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.aggregation not in AGGREGATIONS:
            problems.append(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        for key in ("layers", "heads", "model_dim", "ff_dim", "max_len", "batch_size", "epochs",
                    "warmup_steps", "poly_codes", "batch_eval", "patience"):
            if getattr(self, key) < 1:
                problems.append(f"{key} must be >= 1, got {getattr(self, key)}")
        for key in ("max_steps", "eval_every"):
            if getattr(self, key) < 0:
                problems.append(f"{key} must be >= 0, got {getattr(self, key)}")
        if self.heads >= 1 and self.model_dim % self.heads:
            problems.append(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.mlm_rate < 1.0:
            problems.append(f"mlm_rate must lie in (0, 1), got {self.mlm_rate}")
        if self.mlm_weight < 0:
            problems.append(f"mlm_weight must be >= 0, got {self.mlm_weight}")
        if self.peak_lr <= 0:
            problems.append(f"peak_lr must be > 0, got {self.peak_lr}")
        if not 0.0 < self.beta1 < self.beta2 < 1.0:
            problems.append(f"need 0 < beta1 < beta2 < 1, got {self.beta1}, {self.beta2}")
        if problems:
            raise ConfigError("; ".join(problems))

    def resolved_output_dir(self) -> str:
        return os.environ.get(OUTPUT_ENV) or self.output_dir

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(layers=self.layers, heads=self.heads, model_dim=self.model_dim,
                             ff_dim=self.ff_dim, max_len=self.max_len, vocab_size=vocab_size,
                             dropout=self.dropout, aggregation=self.aggregation,
                             include_special=self.include_special)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(peak_lr=self.peak_lr, warmup_steps=self.warmup_steps, beta1=self.beta1,
                           beta2=self.beta2, weight_decay=self.weight_decay, eps=self.adam_eps)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs,
                           max_steps=self.max_steps or None, eval_every=self.eval_every or None,
                           patience=self.patience, mlm_rate=self.mlm_rate,
                           mlm_weight=self.mlm_weight, seed=self.seed)
