"""Codebook-channel diagnostics for small VAEs: hard-code maps, the coupled
encoder/decoder label channel, and grid-exact variational audit certificates.
"""

from .channel import (
    ChannelReport,
    JointCodeTable,
    lagged_interference,
    row_normalize,
    stress_table,
    summarize,
    table_from_pairs,
)
from .codemaps import (
    DecoderCodeMap,
    EncoderCodeMap,
    FisherMismatch,
    GmmCodebook,
    GmmSummary,
    fisher_mismatch,
    fit_gmm,
)
from .estimators import IwaeDiagnostic, SnisResult, heuristic_audit, iwae_gap_diagnostic, mc_agreement, snis_eta_p
from .gibbs import DiscreteJoint, GibbsKernel, build_kernels, horizon_agreement, one_step_mismatch, path_mismatch
from .gridaudit import (
    AuditReport,
    GridPosteriorSet,
    LatentGrid,
    audit_exact,
    build_grid,
    data_bounds,
    free_energy_stack,
    grid_posteriors,
    joint_table_from_grid,
    mean_code_agreement,
)
from .infokl import BoundInversion, bretagnolle_huber_upper, d_bin, invert_bound, pinsker_upper
from .synth import Dataset, gen_blobs, gen_moons, gen_setting1, load_csv, save_csv, standardize
from .vae import TrainConfig, VaeModel, VaeSpec, active_units, elbo_terms, restore, snapshot, train

__version__ = "0.1.0"

__all__ = [
    "AuditReport",
    "BoundInversion",
    "ChannelReport",
    "Dataset",
    "DecoderCodeMap",
    "DiscreteJoint",
    "EncoderCodeMap",
    "FisherMismatch",
    "GibbsKernel",
    "GmmCodebook",
    "GmmSummary",
    "GridPosteriorSet",
    "IwaeDiagnostic",
    "JointCodeTable",
    "LatentGrid",
    "SnisResult",
    "TrainConfig",
    "VaeModel",
    "VaeSpec",
    "active_units",
    "audit_exact",
    "bretagnolle_huber_upper",
    "build_grid",
    "build_kernels",
    "d_bin",
    "data_bounds",
    "elbo_terms",
    "fisher_mismatch",
    "fit_gmm",
    "free_energy_stack",
    "gen_blobs",
    "gen_moons",
    "gen_setting1",
    "grid_posteriors",
    "heuristic_audit",
    "horizon_agreement",
    "invert_bound",
    "iwae_gap_diagnostic",
    "joint_table_from_grid",
    "lagged_interference",
    "load_csv",
    "mc_agreement",
    "mean_code_agreement",
    "one_step_mismatch",
    "path_mismatch",
    "pinsker_upper",
    "restore",
    "row_normalize",
    "save_csv",
    "snapshot",
    "snis_eta_p",
    "standardize",
    "stress_table",
    "summarize",
    "table_from_pairs",
    "train",
]
