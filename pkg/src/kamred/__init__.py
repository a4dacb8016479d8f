"""Reduction engine for the 1-D Schrodinger operator with a small analytic
quasi-periodic perturbation: weighted Fourier algebra, seven-step symbol
normalization, KAM block-diagonalization, Diophantine measure studies, and
dynamical verification."""

from .errors import (CertificateError, ConfigError, InversionError,
                     KamredError, OmegaExcludedError, SeriesDivergenceError,
                     SmallDivisorError, SmallnessError, WidthError)
from .fourier import Fun, compose_analytic, compose_angle_shift, \
    compose_x_shift, invert_angle_shift, invert_x_shift
from .indices import Frequency, enumerate_indices, make_index
from .operators import QPOp, multiplication_operator, dx_op, symbol_op
from .regularization import RegularizedForm, SchrodingerInput, regularize
from .kam import KamState, kam_init, kam_run, fit_spectrum

__version__ = "0.1.0"

__all__ = [
    "CertificateError", "ConfigError", "InversionError", "KamredError",
    "OmegaExcludedError", "SeriesDivergenceError", "SmallDivisorError",
    "SmallnessError", "WidthError", "Fun", "compose_analytic",
    "compose_angle_shift", "compose_x_shift", "invert_angle_shift",
    "invert_x_shift", "Frequency", "enumerate_indices", "make_index",
    "QPOp", "multiplication_operator", "dx_op", "symbol_op",
    "RegularizedForm", "SchrodingerInput", "regularize", "KamState",
    "kam_init", "kam_run", "fit_spectrum",
]
