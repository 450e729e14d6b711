"""Multiwell deconvolution and capacitance resistance models.

Units: days, bar, m3/day. Production rates are positive, injection rates
negative; every well is at rest before t = 0.
"""

from .bridge import EquivalenceReport, crm_to_mdcv, equivalence_check
from .convolution import (
    CorrectionTable,
    DeconvolutionModel,
    simulate_pressure,
    simulate_pressure_derivative_form,
    simulate_rates,
)
from .crm import CrmFitMode, CrmModel, crm_fit, crm_simulate_pressure, crm_simulate_rates, formation_pressure, icrm_pressure
from .errors import DataError, FitError, InfeasibleAllocation, ModelError, MultiwellError, PressureControlInfeasible
from .mdcv import MdcvOptions, correct_rates, deconvolve, predict
from .reports import FitReport
from .synthetic import RateSchedule, SyntheticSpec, WellSite, generate_scenario
from .utr import ReservoirParams, Utr, UtrMatrix, analytic_utr, crm_utr, eval_utr
from .validation import ValidationReport, bootstrap_tune, cross_validate, metrics, rehearse_split
from .welldata import (
    CumulativeRecord,
    PressureSeries,
    QcReport,
    RateHistory,
    Scenario,
    SplitSpec,
    Well,
    load_scenario,
    qc_report,
    split_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "CorrectionTable", "CrmFitMode", "CrmModel", "CumulativeRecord", "DataError", "DeconvolutionModel",
    "EquivalenceReport", "FitError", "FitReport", "InfeasibleAllocation", "MdcvOptions", "ModelError",
    "MultiwellError", "PressureControlInfeasible", "PressureSeries", "QcReport", "RateHistory", "RateSchedule",
    "ReservoirParams", "Scenario", "SplitSpec", "SyntheticSpec", "Utr", "UtrMatrix", "ValidationReport", "Well",
    "WellSite", "analytic_utr", "bootstrap_tune", "correct_rates", "crm_fit", "crm_simulate_pressure",
    "crm_simulate_rates", "crm_to_mdcv", "crm_utr", "cross_validate", "deconvolve", "equivalence_check",
    "eval_utr", "formation_pressure", "generate_scenario", "icrm_pressure", "load_scenario", "metrics",
    "predict", "qc_report", "rehearse_split", "simulate_pressure", "simulate_pressure_derivative_form",
    "simulate_rates", "split_dataset",
]
