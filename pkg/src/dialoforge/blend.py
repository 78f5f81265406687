"""Deterministic synthetic/real blending for training streams.

Per item, one uniform variate mu is drawn from the seeded SplitMix64 stream
(see :mod:`dialoforge.rng` for the exact generator specification); the item
comes from the synthetic pool iff mu < alpha, otherwise from the real pool.
Item choice within a pool is uniform with replacement by default; an
epoch-without-replacement mode is available behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError, ContractError
from .rng import SplitMix64, derive_seed
from .schema import iter_manifest_file

SYNTHETIC = "synthetic"
REAL = "real"


@dataclass(frozen=True)
class BlendConfig:
    """Sampling rate alpha plus the two id pools."""

    alpha: float
    seed: int
    synthetic_pool: tuple[str, ...]
    real_pool: tuple[str, ...]
    without_replacement: bool = False

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigurationError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.alpha > 0.0 and not self.synthetic_pool:
            raise ConfigurationError("synthetic pool is reachable (alpha > 0) but empty")
        if self.alpha < 1.0 and not self.real_pool:
            raise ConfigurationError("real pool is reachable (alpha < 1) but empty")


def load_pool(manifest_path: str | Path) -> tuple[str, ...]:
    """Entry ids from a manifest file, in file order."""
    return tuple(entry.id for entry in iter_manifest_file(manifest_path))


@dataclass
class BlendState:
    """Single-owner sampler state; fork per shard via ``child``."""

    config: BlendConfig
    rng: SplitMix64
    _epoch_order: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: BlendConfig) -> "BlendState":
        return cls(config=config, rng=SplitMix64(config.seed))

    def child(self, shard_index: int) -> "BlendState":
        """Derived state for a parallel consumer (splits the stream by seed)."""
        cfg = self.config
        return BlendState(
            config=cfg, rng=SplitMix64(derive_seed(cfg.seed, "shard", shard_index))
        )


def next_source(state: BlendState) -> str:
    """Advance one step: draw mu ~ Uniform[0,1); synthetic iff mu < alpha.

    Consumes exactly one uniform variate per call.
    """
    mu = state.rng.uniform()
    return SYNTHETIC if mu < state.config.alpha else REAL


def _draw_item(state: BlendState, source: str) -> str:
    pool = (
        state.config.synthetic_pool if source == SYNTHETIC else state.config.real_pool
    )
    if not pool:
        raise ConfigurationError(f"{source} pool is empty but was selected")
    if not state.config.without_replacement:
        return pool[state.rng.randint(len(pool))]
    # epoch mode: lazily shuffle the pool, deal items until exhausted, reshuffle
    order = state._epoch_order.get(source)
    if not order:
        order = list(pool)
        for i in range(len(order) - 1, 0, -1):
            j = state.rng.randint(i + 1)
            order[i], order[j] = order[j], order[i]
        state._epoch_order[source] = order
    return state._epoch_order[source].pop()


def sample_batch(state: BlendState, batch_size: int) -> list[tuple[str, str]]:
    """Fill a batch of (source, entry_id) pairs, advancing the state."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    batch = []
    for _ in range(batch_size):
        source = next_source(state)
        batch.append((source, _draw_item(state, source)))
    return batch


def sample_stream(
    alpha: float,
    seed: int,
    synthetic_manifest: str | Path,
    real_manifest: str | Path,
    n: int,
    without_replacement: bool = False,
) -> list[tuple[str, str]]:
    """Convenience wrapper for the CLI: load pools, emit n tagged ids."""
    config = BlendConfig(
        alpha=alpha,
        seed=seed,
        synthetic_pool=load_pool(synthetic_manifest),
        real_pool=load_pool(real_manifest),
        without_replacement=without_replacement,
    )
    state = BlendState.initialize(config)
    return sample_batch(state, n)
