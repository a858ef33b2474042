"""Training configuration shared by the DBN and the federation loop."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters for pre-training and (federated) fine-tuning.

    ``learning_rate`` is the global step size applied to the averaged gradient
    each round. ``local_batch=None`` means every node uses its full local
    training set for the round's gradient.
    """

    learning_rate: float = 5.0
    max_rounds: int = 800
    convergence_epsilon: float = 1e-5
    local_batch: int | None = None
    n_nodes: int = 3
    seed: int = 0
    include_generative_term: bool = False
    hidden_sizes: tuple[int, ...] = (64, 32)
    pretrain_epochs: int = 3
    pretrain_lr: float = 0.01
    pretrain_batch: int = 64
    cd_k: int = 1
    straggler_timeout: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not self.learning_rate >= 0:
            raise InvalidConfig("learning_rate must be >= 0")
        if self.max_rounds < 0:
            raise InvalidConfig("max_rounds must be >= 0")
        if self.n_nodes < 1:
            raise InvalidConfig("n_nodes must be >= 1")
        if self.local_batch is not None and self.local_batch < 1:
            raise InvalidConfig("local_batch must be >= 1 or None")
        if self.cd_k < 1:
            raise InvalidConfig("cd_k must be >= 1")
        if self.pretrain_epochs < 0 or self.pretrain_batch < 1:
            raise InvalidConfig("pretrain_epochs must be >= 0 and pretrain_batch >= 1")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise InvalidConfig("hidden_sizes must be non-empty positive widths")

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise InvalidConfig(f"unknown training keys: {sorted(unknown)}")
        return cls(**mapping)
