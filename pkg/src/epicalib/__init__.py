"""Calibration toolkit for SIQR compartmental models via graybox BO."""

from .acquisition import (
    DG_CF,
    EI,
    KG,
    KG_CF,
    KG_FN,
    AcquisitionSpec,
    BaseSampleBank,
    Decision,
    dg_estimate,
    ei,
    kg_estimate,
    maximize_acquisition,
)
from .calibrate import (
    BORunState,
    Bounds,
    CalibrationPoint,
    CalibrationResult,
    TwoStageConfig,
    init_design,
    recommend,
    run_bo,
    run_two_stage,
)
from .dataio import (
    RealSeries,
    Scenario,
    ScenarioSpec,
    eval_against_truth,
    load_covid_csv,
    make_scenario,
)
from .funcnet import (
    FunctionNetwork,
    NetworkSurrogate,
    expected_metric,
    fit_network,
    prune_metric_edges,
    sample_network,
)
from .gp import KernelHyperparams, SurrogateNode, fit_mle
from .metrics import MetricValue, ObservationSet, neg_se_at_t, objective
from .ode import (
    CompartmentState,
    RateNet,
    RateSpec,
    TimeGrid,
    Trajectory,
    eval_rates,
    simulate,
)

__version__ = "0.1.0"
