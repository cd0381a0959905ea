"""Heterogeneity-aware spatiotemporal graph convolution forecasting."""

from .data import (
    Normalizer,
    TrafficSeries,
    WindowedDataset,
    add_gaussian_noise,
    apply_normalizer,
    chronological_split,
    fit_normalizer,
    interpolate_missing,
    invert_normalizer,
    load_series,
    make_windows,
)
from .graphgen import (
    DynamicAdjacencyFactors,
    SeedAdjacency,
    StaticAdjacencyFactors,
    build_seed_adjacency,
    init_factors_from_seed,
    materialize_dynamic_slot,
    materialize_static,
    period_slot,
)
from .attention import ChannelAttention, decentralization_pool, global_average_pool
from .layers import GatedTemporalConv, HeteroGraphConv
from .model import (
    HeteroGraphNet,
    ModelConfig,
    build_model,
    l1_loss,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .synth import SynthSpec, generate, write_synth_dataset
from .training import (
    MetricsReport,
    TrainSettings,
    compute_metrics,
    evaluate,
    run_ablation_suite,
    run_robustness,
    train,
    train_fresh,
)

__version__ = "0.1.0"
