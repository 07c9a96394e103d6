"""Temporal registration of volumetric time series with a Markov motion model.

Each frame of a series is aligned to a template by diffeomorphic registration;
in sequential mode the previous frame's estimate seeds (and optionally
penalizes) the next one.
"""
from .deform import (
    DisplacementField,
    VelocityField,
    compose,
    exp_velocity,
    invert,
    jacobian_determinant,
)
from .errors import (
    ConvergenceError,
    DataError,
    FormatError,
    GridMismatchError,
    NonFiniteError,
    RegistrationError,
    TempRegError,
)
from .evaluation import OverlapReport, build_report, dice, endpoint_error
from .phantom import PhantomSeries, PhantomSpec, make_phantom
from .registration import RegConfig, RegResult, register_pair
from .similarity import CcConfig, cc_gradient, local_cc
from .temporal import SeriesInput, SeriesResult, filter_series, propagate_labels
from .volume import LabelMap, Volume3, warp_labels, warp_volume

__version__ = "0.1.0"
