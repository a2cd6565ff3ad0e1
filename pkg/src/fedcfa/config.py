"""Experiment configuration: a flat ``key = value`` file with sections.

    [data]
    partition = simpson
    clients = 5

    [train]
    algo = fedcfa
    rounds = 50

    [cfa]
    topk = 24
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

ALGORITHMS = ("fedavg", "fedprox", "fedmix", "fedcfa")
PARTITIONS = ("simpson", "dirichlet", "iid")
DATASETS = ("synthetic", "mnist")


class ConfigError(ValueError):
    pass


def _sec(name: str, **kw):
    return field(metadata={"section": name}, **kw)


@dataclass
class ExperimentConfig:
    # [data]
    dataset: str = _sec("data", default="synthetic")
    data_dir: str = _sec("data", default="")
    partition: str = _sec("data", default="simpson")
    clients: int = _sec("data", default=5)
    alpha: float = _sec("data", default=0.6)
    samples: int = _sec("data", default=3000)
    image_side: int = _sec("data", default=12)
    ambiguity: float = _sec("data", default=0.08)
    test_fraction: float = _sec("data", default=0.2)
    global_avg_size: int = _sec("data", default=64)
    data_seed: int = _sec("data", default=0)
    # [train]
    algo: str = _sec("train", default="fedcfa")
    rounds: int = _sec("train", default=50)
    clients_per_round: int = _sec("train", default=0)
    lr: float = _sec("train", default=0.01)
    epochs: int = _sec("train", default=1)
    batch_size: int = _sec("train", default=32)
    mu: float = _sec("train", default=0.01)
    lam_mix: float = _sec("train", default=0.1)
    seed: int = _sec("train", default=0)
    hidden: str = _sec("train", default="256,64,128")
    hook: int = _sec("train", default=2)
    activation: str = _sec("train", default="relu")
    use_global_avg: bool = _sec("train", default=True)
    pretrain: bool = _sec("train", default=False)
    pretrain_target: float = _sec("train", default=0.9)
    pretrain_max_epochs: int = _sec("train", default=30)
    pretrain_lr: float = _sec("train", default=0.05)
    record_wall_time: bool = _sec("train", default=False)
    # [cfa]
    topk: int = _sec("cfa", default=24)
    lambda_pos: float = _sec("cfa", default=1.0)
    lambda_neg: float = _sec("cfa", default=1.0)
    lambda_corr: float = _sec("cfa", default=0.1)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self.hidden.split(",") if w.strip())

    def validate(self) -> None:
        if self.algo not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algo!r}; valid options: {', '.join(ALGORITHMS)}")
        if self.partition not in PARTITIONS:
            raise ConfigError(f"unknown partition {self.partition!r}; valid options: {', '.join(PARTITIONS)}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; valid options: {', '.join(DATASETS)}")
        if self.partition == "simpson" and self.clients != 5:
            raise ConfigError("the simpson partition uses exactly 5 clients")
        positive = ("clients", "rounds", "epochs", "batch_size", "global_avg_size", "samples", "image_side")
        for name in positive:
            if getattr(self, name) < 0 or (name != "epochs" and getattr(self, name) == 0):
                raise ConfigError(f"{name} must be positive")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.lr < 0 or self.mu < 0:
            raise ConfigError("lr and mu must be non-negative")
        if not 0 <= self.lam_mix <= 1:
            raise ConfigError("lam_mix must lie in [0, 1]")
        if not 0 <= self.clients_per_round <= self.clients:
            raise ConfigError("clients_per_round must lie in [0, clients] (0 = all)")
        try:
            widths = self.widths
        except ValueError:
            raise ConfigError(f"hidden must be a comma list of ints, got {self.hidden!r}") from None
        if not widths or min(widths) < 1:
            raise ConfigError("hidden needs at least one positive width")
        if not 1 <= self.hook <= len(widths):
            raise ConfigError(f"hook must lie in [1, {len(widths)}]")
        factor_dim = widths[self.hook - 1]
        if not 0 <= self.topk <= factor_dim:
            raise ConfigError(f"topk must lie in [0, {factor_dim}]")
        for name in ("lambda_pos", "lambda_neg", "lambda_corr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    def replace(self, **changes) -> "ExperimentConfig":
        d = asdict(self)
        unknown = set(changes) - set(d)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d.update(changes)
        return ExperimentConfig(**d)

    def to_text(self) -> str:
        lines: list[str] = []
        current = None
        for f in fields(self):
            sec = f.metadata["section"]
            if sec != current:
                if current is not None:
                    lines.append("")
                lines.append(f"[{sec}]")
                current = sec
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        by_name = {f.name: f for f in fields(cls)}
        values = {}
        section = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in ("data", "train", "cfa"):
                    raise ConfigError(f"line {lineno}: unknown section [{section}]")
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            f = by_name.get(key)
            if f is None:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if section is not None and f.metadata["section"] != section:
                raise ConfigError(f"line {lineno}: key {key!r} belongs in [{f.metadata['section']}]")
            values[key] = _parse(value, type(f.default), key)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(value: str, kind: type, key: str):
    try:
        if kind is bool:
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None
    return value
