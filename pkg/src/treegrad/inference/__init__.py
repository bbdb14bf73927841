from .diagnostics import EssResult, effective_sample_size, ess_columns, ess_report, ess_table
from .hmc import Chain, HmcConfig, hmc_sample, leapfrog
from .lbfgs import LbfgsConfig, LbfgsResult, lbfgs_minimize, two_loop_direction
from .univariate import UnivariateConfig, univariate_baseline_sample

__all__ = [
    "Chain",
    "EssResult",
    "HmcConfig",
    "LbfgsConfig",
    "LbfgsResult",
    "UnivariateConfig",
    "effective_sample_size",
    "ess_columns",
    "ess_report",
    "ess_table",
    "hmc_sample",
    "lbfgs_minimize",
    "leapfrog",
    "two_loop_direction",
    "univariate_baseline_sample",
]
