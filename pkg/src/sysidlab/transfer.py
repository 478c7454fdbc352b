"""Fine-tuning and layer-freezing transfer between identification tasks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

from . import bench, nn
from .data import Dataset

__all__ = [
    "TransferStrategy",
    "TrainMask",
    "TransferReport",
    "ConfigurationError",
    "ArityError",
    "pretrain",
    "prepare_for_target",
    "run_transfer",
]


class ConfigurationError(ValueError):
    pass


class ArityError(ValueError):
    pass


@dataclass(frozen=True)
class TransferStrategy:
    kind: str  # "finetune" | "freeze"
    source_epochs: int
    frozen_layers: frozenset = frozenset()
    reinit_layers: frozenset = frozenset()
    reinit_seed: int = 1

    def __post_init__(self):
        object.__setattr__(self, "frozen_layers", frozenset(self.frozen_layers))
        object.__setattr__(self, "reinit_layers", frozenset(self.reinit_layers))
        if self.kind not in ("finetune", "freeze"):
            raise ConfigurationError(f"unknown strategy kind {self.kind!r}")
        if self.source_epochs < 0:
            raise ConfigurationError("source_epochs must be >= 0")
        if self.kind == "finetune" and (self.frozen_layers or self.reinit_layers):
            raise ConfigurationError("fine-tuning keeps every layer trainable and untouched")
        overlap = self.frozen_layers & self.reinit_layers
        if overlap:
            raise ConfigurationError(f"layers both frozen and re-initialized: {sorted(overlap)}")

    @classmethod
    def finetune(cls, source_epochs: int = 10) -> "TransferStrategy":
        return cls("finetune", source_epochs)

    @classmethod
    def freeze(
        cls,
        source_epochs: int = 40,
        frozen: Sequence[str] = ("LSTM1", "LSTM2"),
        reinit: Sequence[str] | None = None,
        reinit_seed: int = 1,
        layer_names: Sequence[str] = ("LSTM1", "LSTM2", "LSTM3", "Dense"),
    ) -> "TransferStrategy":
        """By default every layer that is not frozen is re-initialized."""
        if reinit is None:
            reinit = [n for n in layer_names if n not in set(frozen)]
        return cls("freeze", source_epochs, frozenset(frozen), frozenset(reinit), reinit_seed)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "source_epochs": self.source_epochs,
            "frozen_layers": sorted(self.frozen_layers),
            "reinit_layers": sorted(self.reinit_layers),
            "reinit_seed": self.reinit_seed,
        }


@dataclass(frozen=True)
class TrainMask:
    trainable: dict  # layer name -> bool

    @classmethod
    def all_trainable(cls, net: nn.Network) -> "TrainMask":
        return cls({name: True for name in net.layer_names})

    def flags(self, net: nn.Network) -> list[bool]:
        return [self.trainable[name] for name in net.layer_names]


def pretrain(
    net: nn.Network,
    source_train: Sequence[Dataset],
    source_test: Dataset,
    strategy: TransferStrategy,
    cfg: bench.TrainConfig,
) -> tuple[nn.Network, bench.LearningCurve]:
    """Train for exactly ``strategy.source_epochs`` epochs on the source task."""
    if strategy.source_epochs == 0:
        return net, bench.LearningCurve(stopped_by="fixed")
    return bench.train(net, source_train, source_test, None, cfg, fixed_epochs=strategy.source_epochs)


def prepare_for_target(net: nn.Network, strategy: TransferStrategy) -> tuple[nn.Network, TrainMask]:
    """Copy of ``net`` ready for target training, plus its training mask."""
    out = net.copy()
    if strategy.kind == "finetune":
        return out, TrainMask.all_trainable(out)
    names = out.layer_names
    unknown = (strategy.frozen_layers | strategy.reinit_layers) - set(names)
    if unknown:
        raise ConfigurationError(f"unknown layer names {sorted(unknown)}; network has {names}")
    fresh = nn.init_network(out.sizes, strategy.reinit_seed, out.in_dim, out.out_dim)
    for name in strategy.reinit_layers:
        for dst, src in zip(out.layer(name).tensors(), fresh.layer(name).tensors()):
            dst[...] = src
    return out, TrainMask({name: name in strategy.reinit_layers for name in names})


@dataclass
class TransferReport:
    strategy: TransferStrategy
    source_curve: bench.LearningCurve
    target_curve: bench.LearningCurve
    network: nn.Network
    pretrained: nn.Network
    seed: int
    checkpoints: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.to_dict(),
            "seed": self.seed,
            "source_epochs": len(self.source_curve),
            "target_epochs": len(self.target_curve),
            "source_curve": self.source_curve.to_dict(),
            "target_curve": self.target_curve.to_dict(),
            "checkpoints": dict(self.checkpoints),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check_arity(a: Dataset, b: Dataset) -> None:
    if a.features.shape[2] != b.features.shape[2] or a.labels.shape[2] != b.labels.shape[2]:
        raise ArityError(
            f"source has {a.features.shape[2]} inputs/{a.labels.shape[2]} outputs, "
            f"target has {b.features.shape[2]}/{b.labels.shape[2]}"
        )


def run_transfer(
    source: tuple[Sequence[Dataset], Dataset],
    target: tuple[Sequence[Dataset], Dataset],
    strategy: TransferStrategy,
    cfg: bench.TrainConfig,
    sizes: Sequence[int] = nn.DEFAULT_SIZES,
) -> TransferReport:
    """Pretrain on ``source``, adapt, then train on ``target`` to convergence.

    Each of ``source``/``target`` is ``(train_groups, test)``. The network is
    initialized from ``cfg.seed``, as a scratch run would be.
    """
    (s_train, s_test), (t_train, t_test) = source, target
    _check_arity(s_test, t_test)
    net = nn.init_network(sizes, cfg.seed, s_test.features.shape[2], s_test.labels.shape[2])
    net, source_curve = pretrain(net, s_train, s_test, strategy, cfg)
    pretrained = net.copy()
    net, mask = prepare_for_target(net, strategy)
    net, target_curve = bench.train(net, t_train, t_test, mask.flags(net), cfg)
    return TransferReport(strategy, source_curve, target_curve, net, pretrained, cfg.seed)
