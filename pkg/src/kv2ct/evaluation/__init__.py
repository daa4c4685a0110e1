"""Image, dose, and robustness metrics."""

from kv2ct.evaluation.dvh import DvhSpec, dvh_indices, dose_at_cc, dose_at_percent
from kv2ct.evaluation.gamma import GammaCriteria, gamma3d, gamma_map, gamma_both
from kv2ct.evaluation.image import cdvh, diff_quantiles, mae, shift_error, shift_search
from kv2ct.evaluation.report import MetricReport

__all__ = [
    "DvhSpec", "dvh_indices", "dose_at_cc", "dose_at_percent",
    "GammaCriteria", "gamma3d", "gamma_map", "gamma_both",
    "cdvh", "diff_quantiles", "mae", "shift_error", "shift_search", "MetricReport",
]
